#!/usr/bin/env python3

"""
Command implementations: one function per subcommand, each driven by a RunConfig

Every command writes its resolved config as config.json next to its outputs; feeding that file back with --config
reproduces the run's CSV outputs exactly.
"""

from dataclasses import asdict, dataclass, fields
import json
import logging
from pathlib import Path
import time
from typing import Any, Callable, Final

import numpy as np
import pandas as pd

from pathways import attribution, evalharness, model_io
from pathways.contrib import DEFAULT_INTGRAD_STEPS, INTGRAD_MODES, contributions
from pathways.data import Dataset, FillRule, gen_synthetic, load_idx, split
from pathways.linearity import linear_region_radius, verify_linear_region
from pathways.network import Network, forward_record, predict
from pathways.pathway import PathwayMethod, build_frozen, dead_fraction, masked_record, select_pathway
from pathways.pruneobj import (
	DGR_DEFAULT_GAMMA, DGR_DEFAULT_ITERATIONS, DGR_DEFAULT_LR, DgrConfig, dgr_optimize, gate_pathway, greedy_prune,
)
from pathways.train import DenseSpec, FlattenSpec, NetSpec, TrainConfig, evaluate, small_conv_spec, train, write_metrics_csv


logger = logging.getLogger(__name__)


CONFIG_FILENAME: Final = 'config.json'
LOG_FILENAME: Final = 'run.log'
MODEL_FILENAME: Final = 'model.json'
FLOAT_FORMAT: Final = '%.10g'

DEFAULT_SYNTHETIC_SIZE: Final = 400

# CLI spellings of attributor names
ATTRIBUTOR_ALIASES: Final = {
	'pathway_gradient': 'neuron_intgrad',
	'pathwaygradient': 'neuron_intgrad',
	'neuronintgrad': 'neuron_intgrad',
	'neuronmct': 'neuron_mct',
	'inputmct': 'input_x_grad',
	'inputxgrad': 'input_x_grad',
	'intgrad': 'input_intgrad',
	'inputintgrad': 'input_intgrad',
	'guided': 'guided_backprop',
	'guidedbackprop': 'guided_backprop',
	'grad_cam': 'gradcam',
}


# Config


@dataclass(frozen=True)
class RunConfig:
	command: str
	out: str = 'out'
	seed: int = 0
	jobs: int = 1

	model: str | None = None
	dataset: str | None = None
	# Single-input commands use sample `index`; dataset commands use the first `limit` samples (all if None)
	index: int = 0
	limit: int | None = None
	class_index: int | None = None

	method: str | None = None
	methods: tuple[str, ...] = ()
	sparsity: tuple[float, ...] = (0.9,)
	steps: int = DEFAULT_INTGRAD_STEPS
	mode: str = 'layer'

	# Training
	hidden: tuple[int, ...] = (16, 16)
	conv: tuple[int, ...] = ()
	pool: int | None = None
	epochs: int = 20
	lr: float = 0.05
	momentum: float = 0.9
	batch_size: int = 32
	optimizer: str = 'momentum'
	loss: str = 'cross_entropy'
	test_fraction: float = 0.25

	# Pruning
	chunk: int | None = None
	gamma: float = DGR_DEFAULT_GAMMA
	dgr_lr: float = DGR_DEFAULT_LR
	iterations: int = DGR_DEFAULT_ITERATIONS
	init: str = 'one'
	dgr_loss: str = 'mse'

	# Attribution and evaluation
	smooth: bool = False
	kernel: int = attribution.DEFAULT_OPENING_KERNEL
	reduction: str = 'abs'
	fill: str = FillRule.mean.value
	samples: int = 64
	shrink: float = 0.01
	percentiles: tuple[int, ...] = evalharness.ROAR_PERCENTILES
	seeds_per_cell: int = evalharness.ROAR_SEEDS_PER_CELL

	def __post_init__(self):
		if self.command not in COMMANDS:
			raise ValueError(f'Unknown command {self.command!r}, expected one of {sorted(COMMANDS)}')
		for s in self.sparsity:
			if not 0.0 <= s < 1.0:
				raise ValueError(f'Sparsity must be in [0, 1), got {s}')
		if self.mode not in INTGRAD_MODES:
			raise ValueError(f'Unknown IntGrad mode {self.mode!r}, expected one of {INTGRAD_MODES}')
		if self.jobs < 1:
			raise ValueError(f'jobs must be >= 1, got {self.jobs}')
		if self.index < 0:
			raise ValueError(f'index must be >= 0, got {self.index}')

	def to_json(self) -> str:
		return json.dumps(asdict(self), indent=1, sort_keys=True) + '\n'

	@classmethod
	def from_dict(cls, d: dict[str, Any]) -> 'RunConfig':
		known = {f.name for f in fields(cls)}
		unknown = set(d) - known
		if unknown:
			raise ValueError(f'Unknown config keys: {sorted(unknown)}')
		return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

	@classmethod
	def load(cls, path: Path | str) -> 'RunConfig':
		return cls.from_dict(json.loads(Path(path).read_text()))

	def train_config(self) -> TrainConfig:
		return TrainConfig(
			optimizer=self.optimizer,
			lr=self.lr,
			momentum=self.momentum,
			epochs=self.epochs,
			batch_size=self.batch_size,
			seed=self.seed,
			loss=self.loss,
		)

	def dgr_config(self, init: str | None = None) -> DgrConfig:
		return DgrConfig(
			gamma=self.gamma,
			lr=self.dgr_lr,
			iterations=self.iterations,
			init=init or self.init,
			loss=self.dgr_loss,
			seed=self.seed,
		)


class StageTimer:
	"""
	Accumulates wall time per named stage; each checkin charges the time since the previous one
	"""
	def __init__(self):
		self._start = self._last_checkin = time.perf_counter()
		self._sums: dict[str, float] = dict()

	def checkin(self, name: str) -> None:
		now = time.perf_counter()
		delta = now - self._last_checkin
		self._last_checkin = now

		assert delta >= 0

		if name not in self._sums:
			self._sums[name] = 0.0
		self._sums[name] += delta

	@property
	def sums(self) -> dict[str, float]:
		return dict(self._sums)

	def dump(self) -> None:
		total = time.perf_counter() - self._start
		for name, seconds in self._sums.items():
			logger.debug(f'{name}: {seconds:.3f} s ({100 * seconds / total if total else 0:.1f}%)')
		logger.debug(f'Total: {total:.3f} s')


# Inputs


def parse_dataset_spec(spec: str, seed: int) -> Dataset:
	"""
	'synthetic:KIND[:key=value,...]' (keys n, shape as CxHxW, pixels) or 'idx:IMAGES[,LABELS]'
	"""

	source, _, rest = spec.partition(':')
	match source:
		case 'synthetic':
			kind, _, options = rest.partition(':')
			kwargs = {}
			n = DEFAULT_SYNTHETIC_SIZE
			for option in filter(None, options.split(',')):
				key, sep, value = option.partition('=')
				if not sep:
					raise ValueError(f'Dataset option {option!r} is not key=value')
				match key:
					case 'n':
						n = int(value)
					case 'shape':
						kwargs['shape'] = tuple(int(v) for v in value.split('x'))
					case 'pixels':
						kwargs['num_informative'] = int(value)
					case _:
						raise ValueError(f'Unknown synthetic dataset option {key!r}')
			return gen_synthetic(kind, n, seed, **kwargs)

		case 'idx':
			paths = rest.split(',')
			if not paths[0] or len(paths) > 2:
				raise ValueError(f'Expected idx:IMAGES[,LABELS], got {spec!r}')
			return load_idx(paths[0], paths[1] if len(paths) > 1 else None)

		case _:
			raise ValueError(f"Unknown dataset source {source!r} in {spec!r}, expected 'synthetic:...' or 'idx:...'")


def _dataset(cfg: RunConfig) -> Dataset:
	if not cfg.dataset:
		raise ValueError(f'{cfg.command} needs --dataset')
	return parse_dataset_spec(cfg.dataset, cfg.seed)


def _limited(cfg: RunConfig, dataset: Dataset) -> Dataset:
	if cfg.limit is None:
		return dataset
	return dataset.subset(np.arange(min(cfg.limit, len(dataset))))


def _model(cfg: RunConfig) -> Network:
	if not cfg.model:
		raise ValueError(f'{cfg.command} needs --model')
	return model_io.load_network(cfg.model)


def _single_input(cfg: RunConfig, net: Network, dataset: Dataset) -> tuple[np.ndarray, int]:
	if cfg.index >= len(dataset):
		raise ValueError(f'Input index {cfg.index} out of range for {len(dataset)} samples')
	x = dataset.inputs[cfg.index]
	class_index = int(predict(net, x[None, ...])[0]) if cfg.class_index is None else cfg.class_index
	return x, class_index


def net_spec(cfg: RunConfig, dataset: Dataset) -> NetSpec:
	if cfg.conv:
		if not dataset.is_image:
			raise ValueError(f'Conv layers need image inputs, {dataset.name} has input shape {dataset.input_shape}')
		return small_conv_spec(dataset.input_shape, cfg.conv, cfg.hidden, dataset.num_classes, pool=cfg.pool)
	hidden = ((FlattenSpec(),) if dataset.is_image else ()) + tuple(DenseSpec(n) for n in cfg.hidden)
	return NetSpec(dataset.input_shape, hidden, dataset.num_classes)


def _attributor_method(name: str) -> str:
	key = name.lower().replace('-', '_')
	return ATTRIBUTOR_ALIASES.get(key, ATTRIBUTOR_ALIASES.get(key.replace('_', ''), key))


def attributors(cfg: RunConfig, dataset: Dataset) -> list[evalharness.Attributor]:
	"""
	One attributor per requested method; pathway methods get one per sparsity
	"""
	names = cfg.methods or ((cfg.method,) if cfg.method else ())
	if not names:
		raise ValueError(f'{cfg.command} needs --method or --methods')

	result = []
	for name in names:
		method = _attributor_method(name)
		sparsities = cfg.sparsity if method in attribution.PATHWAY_METHODS else cfg.sparsity[:1]
		for sparsity in sparsities:
			result.append(evalharness.make_attributor(
				method, dataset, sparsity=sparsity, steps=cfg.steps, smooth=cfg.smooth, kernel=cfg.kernel))
	return result


# Outputs


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
	frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
	logger.info(f'Wrote {path}')


def _write_json(obj: Any, path: Path) -> None:
	path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + '\n')
	logger.info(f'Wrote {path}')


def _json_default(obj: Any) -> Any:
	if isinstance(obj, np.generic):
		return obj.item()
	if isinstance(obj, np.ndarray):
		return obj.tolist()
	raise TypeError(f'Not JSON serializable: {type(obj)}')


def _tag(value: float) -> str:
	return f'{value:g}'


def _method_name(name: str | None, default: str) -> str:
	return PathwayMethod.parse(name or default).value


# Commands


def cmd_train(cfg: RunConfig, out: Path, timer: StageTimer) -> dict:
	dataset = _dataset(cfg)
	train_set, test_set = split(dataset, cfg.test_fraction, cfg.seed)
	timer.checkin('data')

	result = train(net_spec(cfg, dataset), train_set, cfg.train_config())
	timer.checkin('train')

	manifest_sha256 = model_io.save_network(result.net, out / MODEL_FILENAME)
	write_metrics_csv(result.history, out / 'metrics.csv')

	train_eval = evaluate(result.net, train_set)
	test_eval = evaluate(result.net, test_set)
	logger.info(f'Train accuracy {train_eval.accuracy:.4f}, test accuracy {test_eval.accuracy:.4f}')

	return dict(
		model=result.net.digest,
		manifest_sha256=manifest_sha256,
		train_accuracy=train_eval.accuracy,
		test_accuracy=test_eval.accuracy,
		train_samples=len(train_set),
		test_samples=len(test_set),
	)


def cmd_contrib(cfg: RunConfig, out: Path, timer: StageTimer) -> dict:
	net = _model(cfg)
	x, class_index = _single_input(cfg, net, _dataset(cfg))
	method = _method_name(cfg.method, 'neuron_intgrad')

	c = contributions(net, x, class_index, method, steps=cfg.steps, mode=cfg.mode)
	timer.checkin('contributions')

	c.to_csv(out / 'contributions.csv')
	c.save_npz(out / 'contributions.npz')

	return dict(
		method=method,
		class_index=class_index,
		model=net.digest,
		num_neurons=c.num_neurons,
		num_nonzero=int(np.count_nonzero(c.values)),
		layer_sums=[float(v.sum()) for v in c.per_layer(signed=True)],
	)


def cmd_select_path(cfg: RunConfig, out: Path, timer: StageTimer) -> dict:
	net = _model(cfg)
	x, class_index = _single_input(cfg, net, _dataset(cfg))
	method = _method_name(cfg.method, 'neuron_intgrad')

	c = contributions(net, x, class_index, method, steps=cfg.steps, mode=cfg.mode)
	record = forward_record(net, x, class_index=class_index)
	timer.checkin('contributions')

	pathways = []
	for sparsity in cfg.sparsity:
		mask = select_pathway(c, sparsity)
		mask.save(out / f'mask_{_tag(sparsity)}.txt')
		frozen = build_frozen(net, record, mask)
		dead = dead_fraction(mask, record)
		pathways.append(dict(
			sparsity=sparsity,
			kept=mask.num_kept,
			threshold=mask.threshold,
			degenerate=mask.degenerate,
			dead_fraction=dead.originally_dead,
			frozen_output=frozen.output(x),
		))
	timer.checkin('select')

	return dict(method=method, class_index=class_index, model=net.digest, output=record.output, pathways=pathways)


def cmd_greedy_prune(cfg: RunConfig, out: Path, timer: StageTimer) -> dict:
	net = _model(cfg)
	x, class_index = _single_input(cfg, net, _dataset(cfg))
	original = forward_record(net, x, class_index=class_index)

	pathways = []
	for sparsity in cfg.sparsity:
		mask, state = greedy_prune(net, x, class_index, sparsity, cfg.chunk)
		mask.save(out / f'mask_{_tag(sparsity)}.txt')
		_write_csv(state.to_frame(), out / f'prune_trace_{_tag(sparsity)}.csv')
		dead = dead_fraction(mask, original, masked_record(net, x, mask, class_index))
		pathways.append(dict(
			sparsity=sparsity,
			kept=mask.num_kept,
			exhausted=state.exhausted,
			final_output=state.final_output,
			originally_dead=dead.originally_dead,
			now_active=dead.now_active,
		))
		timer.checkin('prune')

	return dict(class_index=class_index, model=net.digest, output=original.output, pathways=pathways)


def cmd_dgr(cfg: RunConfig, out: Path, timer: StageTimer) -> dict:
	net = _model(cfg)
	x, class_index = _single_input(cfg, net, _dataset(cfg))
	original = forward_record(net, x, class_index=class_index)

	gates, _ = dgr_optimize(net, x, class_index, cfg.dgr_config())
	timer.checkin('optimize')

	_write_csv(gates.to_frame(), out / 'dgr_objective.csv')
	_write_csv(pd.DataFrame(dict(flat_index=np.arange(len(gates.gates)), gate=gates.gates)), out / 'gates.csv')

	pathways = []
	for sparsity in cfg.sparsity:
		mask = gate_pathway(net, gates, sparsity)
		mask.save(out / f'mask_{_tag(sparsity)}.txt')
		dead = dead_fraction(mask, original, masked_record(net, x, mask, class_index))
		pathways.append(dict(
			sparsity=sparsity,
			kept=mask.num_kept,
			threshold=mask.threshold,
			originally_dead=dead.originally_dead,
			now_active=dead.now_active,
		))

	return dict(
		class_index=class_index,
		model=net.digest,
		initial_objective=gates.objective[0],
		final_objective=gates.objective[-1],
		closed_gates=int(np.count_nonzero(gates.gates == 0)),
		pathways=pathways,
	)


def cmd_pathway_stats(cfg: RunConfig, out: Path, timer: StageTimer) -> dict:
	net = _model(cfg)
	dataset = _limited(cfg, _dataset(cfg))
	methods = cfg.methods or evalharness.STATS_METHODS
	stats_cfg = evalharness.StatsConfig(steps=cfg.steps, chunk=cfg.chunk, dgr=cfg.dgr_config())

	frame = evalharness.pathway_stats(
		net, dataset.inputs, methods, cfg.sparsity, stats_cfg, seed=cfg.seed, jobs=cfg.jobs, progress=True)
	timer.checkin('stats')

	summary = evalharness.summarize_stats(frame)
	_write_csv(frame, out / 'pathway_stats.csv')
	_write_csv(summary, out / 'pathway_summary.csv')

	return dict(model=net.digest, dataset=dataset.name, samples=len(dataset), rows=summary.to_dict(orient='records'))


def cmd_linearity(cfg: RunConfig, out: Path, timer: StageTimer) -> dict:
	net = _model(cfg)
	dataset = _limited(cfg, _dataset(cfg))
	methods = [_method_name(m, 'neuron_intgrad') for m in (cfg.methods or (cfg.method or 'neuron_intgrad',))]

	rows = []
	for i, x in enumerate(dataset.inputs):
		class_index = int(predict(net, x[None, ...])[0])
		record = forward_record(net, x, class_index=class_index)
		for method in methods:
			c = contributions(net, x, class_index, method, steps=cfg.steps, mode=cfg.mode)
			for sparsity in cfg.sparsity:
				frozen = build_frozen(net, record, select_pathway(c, sparsity))
				report = linear_region_radius(frozen, x)
				check = verify_linear_region(frozen, x, report, cfg.samples, cfg.shrink, seed=cfg.seed)
				rows.append(dict(
					sample=i,
					method=method,
					sparsity=sparsity,
					radius=report.radius,
					considered=report.num_considered,
					passed=check.passed,
					max_deviation=check.max_deviation,
					pattern_mismatches=check.pattern_mismatches,
				))
				if not check.passed:
					logger.warning(f'Sample {i}, {method} at sparsity {sparsity}: linear region check failed: {check.reason}')
	timer.checkin('linearity')

	frame = pd.DataFrame(rows)
	_write_csv(frame, out / 'linearity.csv')
	return dict(
		model=net.digest,
		checks=len(frame),
		passed=int(frame['passed'].sum()) if len(frame) else 0,
		min_radius=float(frame['radius'].min()) if len(frame) else None,
	)


def cmd_attribute(cfg: RunConfig, out: Path, timer: StageTimer) -> dict:
	net = _model(cfg)
	dataset = _dataset(cfg)
	x, class_index = _single_input(cfg, net, dataset)

	maps = []
	for attributor in attributors(cfg, dataset):
		amap = attributor(net, x, class_index, np.random.default_rng([cfg.seed, cfg.index]))
		stem = f'map_{attributor.method}' + (f'_{_tag(attributor.sparsity)}' if amap.pathway is not None else '')
		if attributor.smooth:
			stem += '_smooth'
		attribution.save_map_csv(amap, out / f'{stem}.csv')
		attribution.save_map_pgm(amap, out / f'{stem}.pgm')
		maps.append(dict(method=attributor.name, file=stem, warning=amap.warning))
		timer.checkin(attributor.name)

	return dict(model=net.digest, index=cfg.index, class_index=class_index, maps=maps)


def _summary_key(method: str, dataset: Dataset, net: Network) -> str:
	return f'{method}|{dataset.name}|{net.digest[:12]}'


def cmd_eval_lerf(cfg: RunConfig, out: Path, timer: StageTimer) -> dict:
	net = _model(cfg)
	dataset = _limited(cfg, _dataset(cfg))
	fill = FillRule(cfg.fill)

	frames = []
	aucs = {}
	for attributor in attributors(cfg, dataset):
		curve = evalharness.lerf_curve(
			net, dataset, attributor, fill, reduction=cfg.reduction, seed=cfg.seed, jobs=cfg.jobs, progress=True)
		frames.append(curve.to_frame().assign(method=attributor.name))
		aucs[_summary_key(attributor.name, dataset, net)] = curve.auc
		timer.checkin(attributor.name)

	_write_csv(pd.concat(frames, ignore_index=True)[['method', 'fraction', 'value']], out / 'lerf.csv')
	return dict(auc=aucs, samples=len(dataset))


def cmd_eval_roar(cfg: RunConfig, out: Path, timer: StageTimer) -> dict:
	dataset = _dataset(cfg)
	train_set, test_set = split(dataset, cfg.test_fraction, cfg.seed)
	spec = net_spec(cfg, dataset)
	train_cfg = cfg.train_config()

	reference = model_io.load_network(cfg.model) if cfg.model else train(spec, train_set, train_cfg).net
	timer.checkin('reference')

	frames = []
	summaries = []
	aucs = {}
	for attributor in attributors(cfg, dataset):
		result = evalharness.roar_run(
			spec, train_set, test_set, attributor, train_cfg,
			reference=reference,
			percentiles=cfg.percentiles,
			seeds_per_cell=cfg.seeds_per_cell,
			reduction=cfg.reduction,
			jobs=cfg.jobs,
			progress=True,
		)
		frames.append(result.to_frame().assign(method=attributor.name))
		summaries.append(result.summary_frame().assign(method=attributor.name))
		aucs[_summary_key(attributor.name, dataset, reference)] = result.auc
		timer.checkin(attributor.name)

	_write_csv(pd.concat(frames, ignore_index=True)[['method', 'percentile', 'seed', 'accuracy']], out / 'roar.csv')
	_write_csv(pd.concat(summaries, ignore_index=True)[['method', 'percentile', 'mean', 'std']], out / 'roar_summary.csv')
	return dict(auc=aucs, reference=reference.digest)


def cmd_sanity_check(cfg: RunConfig, out: Path, timer: StageTimer) -> dict:
	net = _model(cfg)
	dataset = _limited(cfg, _dataset(cfg))

	frames = []
	final = {}
	for attributor in attributors(cfg, dataset):
		trace = evalharness.randomization_sanity(net, dataset, attributor, seed=cfg.seed, jobs=cfg.jobs, progress=True)
		frames.append(trace.to_frame().assign(method=attributor.name))
		final[attributor.name] = dict(ssim=trace.ssim[-1], spearman=trace.spearman[-1])
		timer.checkin(attributor.name)

	_write_csv(pd.concat(frames, ignore_index=True), out / 'sanity.csv')
	return dict(model=net.digest, samples=len(dataset), fully_randomized=final)


COMMANDS: Final[dict[str, Callable[[RunConfig, Path, StageTimer], dict]]] = {
	'train': cmd_train,
	'contrib': cmd_contrib,
	'select-path': cmd_select_path,
	'greedy-prune': cmd_greedy_prune,
	'dgr': cmd_dgr,
	'pathway-stats': cmd_pathway_stats,
	'linearity': cmd_linearity,
	'attribute': cmd_attribute,
	'eval-lerf': cmd_eval_lerf,
	'eval-roar': cmd_eval_roar,
	'sanity-check': cmd_sanity_check,
}


def run(cfg: RunConfig) -> dict:
	"""
	Run one command: writes config.json, the command's artifacts, and summary.json into cfg.out
	"""

	out = Path(cfg.out)
	out.mkdir(parents=True, exist_ok=True)
	(out / CONFIG_FILENAME).write_text(cfg.to_json())
	logger.info(f'Running {cfg.command}, outputs in {out}')

	timer = StageTimer()
	summary = COMMANDS[cfg.command](cfg, out, timer)
	timer.dump()

	_write_json(summary, out / 'summary.json')
	return summary
