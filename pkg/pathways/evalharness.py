#!/usr/bin/env python3

"""
Quantitative attribution evaluation: least-relevant-first degradation, remove-and-retrain, cascading parameter
randomization, and pathway statistics sweeps

Attributions are always explained for the original network's predicted class, and every per-sample random draw uses
a generator seeded by (seed, sample index), so results do not depend on worker count or scheduling.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
import logging
from typing import Callable, Final, Iterable, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from pathways import attribution, graphics_utils, metrics
from pathways.attribution import AttributionMap
from pathways.contrib import DEFAULT_INTGRAD_STEPS, contributions
from pathways.data import Dataset, FillRule, num_pixel_sites, perturb_pixels
from pathways.network import DTYPE, Network, forward_batch, forward_record, predict
from pathways.pathway import (
	PathwayMask, active_subnet, build_frozen, dead_fraction, jaccard, masked_record, select_pathway,
)
from pathways.pruneobj import DgrConfig, dgr_optimize, greedy_prune
from pathways.train import NetSpec, TrainConfig, evaluate, train


logger = logging.getLogger(__name__)


LERF_FRACTIONS: Final = tuple(round(0.1 * i, 1) for i in range(11))
ROAR_PERCENTILES: Final = (10, 30, 50, 70, 90)
ROAR_SEEDS_PER_CELL: Final = 3

# Weight std of randomized layers (variance 0.01)
SANITY_WEIGHT_STD: Final = 0.1

ATTRIBUTORS: Final = (
	'gradient', 'input_x_grad', 'input_intgrad', 'guided_backprop', 'gradcam',
	'neuron_mct', 'neuron_intgrad', 'random', 'oracle', 'edge',
)

STATS_METHODS: Final = ('neuron_mct', 'neuron_intgrad', 'greedy', 'dgr_one', 'dgr_random', 'active_subnet')


# Attributors


@dataclass(frozen=True)
class Attributor:
	"""
	Picklable attribution method with its settings

	- neuron_mct / neuron_intgrad: pathway gradient at `sparsity`
	- random: uniform noise map (a random ranking)
	- oracle: 1 on the dataset's known informative pixels, 0 elsewhere
	- edge: Sobel magnitude of the input itself, independent of the network
	"""
	method: str
	sparsity: float = 0.9
	steps: int = DEFAULT_INTGRAD_STEPS
	smooth: bool = False
	kernel: int = attribution.DEFAULT_OPENING_KERNEL
	gradcam_layer: int | None = None
	informative_pixels: tuple[int, ...] | None = None

	def __post_init__(self):
		if self.method not in ATTRIBUTORS:
			raise ValueError(f'Unknown attributor {self.method!r}, expected one of {ATTRIBUTORS}')
		if self.method == 'oracle' and self.informative_pixels is None:
			raise ValueError('The oracle attributor needs the ground-truth informative pixels')

	@property
	def name(self) -> str:
		name = self.method
		if self.method in attribution.PATHWAY_METHODS:
			name += f'@{self.sparsity:g}'
		return name + ('*' if self.smooth else '')

	def __call__(self, net: Network, x: np.ndarray, class_index: int, rng: np.random.Generator) -> AttributionMap:
		amap = self._attribute(net, np.asarray(x, dtype=DTYPE), class_index, rng)
		if self.smooth:
			amap = attribution.smooth_opening(amap, self.kernel)
		return amap

	def _attribute(self, net: Network, x: np.ndarray, class_index: int, rng: np.random.Generator) -> AttributionMap:
		match self.method:
			case 'neuron_mct' | 'neuron_intgrad':
				return attribution.pathway_gradient(
					net, x, class_index, self.method, self.sparsity, steps=self.steps)
			case 'gradcam':
				return attribution.gradcam(net, x, class_index, self.gradcam_layer)
			case 'random':
				return AttributionMap(raw=rng.uniform(0.0, 1.0, size=x.shape), method='random', class_index=class_index)
			case 'oracle':
				return AttributionMap(raw=self._oracle_map(x), method='oracle', class_index=class_index)
			case 'edge':
				return AttributionMap(raw=self._edge_map(x), method='edge', class_index=class_index)
			case _:
				return attribution.baseline_attribution(net, x, class_index, self.method, steps=self.steps)

	def _oracle_map(self, x: np.ndarray) -> np.ndarray:
		sites = np.zeros(num_pixel_sites(x.shape), dtype=DTYPE)
		sites[list(self.informative_pixels)] = 1.0
		if x.ndim == 3:
			return np.broadcast_to(sites.reshape(x.shape[1:]), x.shape).copy()
		return sites.reshape(x.shape)

	@staticmethod
	def _edge_map(x: np.ndarray) -> np.ndarray:
		if x.ndim == 3:
			edges = graphics_utils.edge_magnitude(x.mean(axis=0))
			return np.broadcast_to(edges, x.shape).copy()
		return graphics_utils.edge_magnitude(x.reshape(1, -1)).reshape(x.shape)


def make_attributor(method: str, dataset: Dataset | None = None, **kwargs) -> Attributor:
	if method == 'oracle':
		if dataset is None or dataset.informative_pixels is None:
			raise ValueError('The oracle attributor needs a dataset with known informative pixels')
		kwargs['informative_pixels'] = tuple(int(i) for i in dataset.informative_pixels)
	return Attributor(method=method, **kwargs)


def _sample_rng(seed: int, index: int) -> np.random.Generator:
	return np.random.default_rng([seed, index])


def _map_jobs(fn: Callable, items: Sequence, jobs: int, desc: str, progress: bool) -> list:
	"""
	Ordered map over items, in worker processes if jobs > 1
	"""
	if jobs <= 1 or len(items) <= 1:
		return [fn(item) for item in tqdm(items, desc=desc, disable=not progress, leave=False)]

	chunksize = max(1, len(items) // (4 * jobs))
	with ProcessPoolExecutor(max_workers=jobs) as pool:
		return list(tqdm(pool.map(fn, items, chunksize=chunksize), total=len(items), desc=desc, disable=not progress, leave=False))


def _nanmean(values: np.ndarray, axis: int = 0) -> np.ndarray:
	values = np.asarray(values, dtype=DTYPE)
	count = np.sum(~np.isnan(values), axis=axis)
	total = np.nansum(values, axis=axis)
	with np.errstate(invalid='ignore', divide='ignore'):
		return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def _resolve_fill(dataset: Dataset, fill: FillRule | float | np.ndarray) -> Callable[[int], np.ndarray]:
	"""
	:returns: fill value lookup by sample index
	"""
	if isinstance(fill, FillRule):
		value = dataset.fill_value(fill)
		return lambda i: value

	fill = np.asarray(fill, dtype=DTYPE)
	if fill.shape == dataset.inputs.shape:
		return lambda i: fill[i]
	return lambda i: fill


# LeRF


@dataclass(frozen=True, eq=False)
class DegradationCurve:
	fractions: np.ndarray
	values: np.ndarray  # mean |dPhi| / |Phi| per fraction
	auc: float
	per_sample: np.ndarray  # (n, T)
	method: str
	dataset: str
	digest: str

	def to_frame(self) -> pd.DataFrame:
		return pd.DataFrame(dict(fraction=self.fractions, value=self.values))


def relative_change(original: float, perturbed: np.ndarray) -> np.ndarray:
	"""
	|Phi_t - Phi| / |Phi|; absolute change when Phi is exactly 0
	"""
	scale = abs(original) if original != 0 else 1.0
	return np.abs(np.asarray(perturbed) - original) / scale


def _lerf_sample(
		item: tuple[int, np.ndarray, np.ndarray],
		*,
		net: Network,
		attributor: Attributor,
		fractions: tuple[float, ...],
		reduction: str,
		seed: int,
		) -> np.ndarray:

	index, x, fill = item
	class_index = int(predict(net, x[None, ...])[0])
	record = forward_record(net, x, class_index=class_index)

	amap = attributor(net, x, class_index, _sample_rng(seed, index))
	ranking = amap.ranking(reduction=reduction)

	perturbed = np.stack([perturb_pixels(x, ranking, t, fill) for t in fractions])
	outputs = forward_batch(net, perturbed).outputs(class_index)
	return relative_change(record.output, outputs)


def lerf_curve(
		net: Network,
		dataset: Dataset,
		attributor: Attributor,
		fill: FillRule | float | np.ndarray = FillRule.mean,
		*,
		fractions: Sequence[float] = LERF_FRACTIONS,
		reduction: str = 'abs',
		seed: int = 0,
		jobs: int = 1,
		progress: bool = False,
		) -> DegradationCurve:
	"""
	Remove pixels least relevant first and measure the output change of the original network

	Each input's attribution is computed once on the intact network and reused at every fraction
	"""

	if not len(dataset):
		raise ValueError('LeRF needs a non-empty dataset')

	fill_for = _resolve_fill(dataset, fill)
	items = [(i, dataset.inputs[i], fill_for(i)) for i in range(len(dataset))]
	fractions = tuple(float(t) for t in fractions)

	fn = partial(_lerf_sample, net=net, attributor=attributor, fractions=fractions, reduction=reduction, seed=seed)
	per_sample = np.stack(_map_jobs(fn, items, jobs, f'LeRF {attributor.name}', progress))

	values = per_sample.mean(axis=0)
	curve = DegradationCurve(
		fractions=np.array(fractions),
		values=values,
		auc=metrics.auc(np.array(fractions), values),
		per_sample=per_sample,
		method=attributor.name,
		dataset=dataset.name,
		digest=net.digest,
	)
	logger.info(f'LeRF {attributor.name} on {dataset.name} ({len(dataset)} inputs): AUC {curve.auc:.5f}')
	return curve


# ROAR


@dataclass(frozen=True, eq=False)
class RoarResult:
	percentiles: tuple[int, ...]  # starts with the unmodified 0 baseline
	accuracies: np.ndarray  # (P, seeds), nan where training diverged
	seeds: tuple[int, ...]
	method: str
	auc: float
	diverged: tuple[tuple[int, int], ...] = field(default=())

	@property
	def mean(self) -> np.ndarray:
		return _nanmean(self.accuracies, axis=1)

	@property
	def std(self) -> np.ndarray:
		return np.array([np.nanstd(row) if not np.all(np.isnan(row)) else np.nan for row in self.accuracies])

	def accuracy_at(self, percentile: int) -> float:
		return float(self.mean[self.percentiles.index(percentile)])

	def to_frame(self) -> pd.DataFrame:
		rows = []
		for p, row in zip(self.percentiles, self.accuracies):
			for s, acc in zip(self.seeds, row):
				rows.append((p, s, acc))
		return pd.DataFrame(rows, columns=['percentile', 'seed', 'accuracy'])

	def summary_frame(self) -> pd.DataFrame:
		return pd.DataFrame(dict(percentile=self.percentiles, mean=self.mean, std=self.std))


def roar_rankings(net: Network, dataset: Dataset, attributor: Attributor, *, seed: int = 0, reduction: str = 'abs') -> np.ndarray:
	"""
	Most relevant first rankings for every input, from the reference network
	"""
	rankings = []
	for i, x in enumerate(dataset.inputs):
		class_index = int(predict(net, x[None, ...])[0])
		amap = attributor(net, x, class_index, _sample_rng(seed, i))
		rankings.append(amap.ranking(reduction=reduction, descending=True))
	return np.stack(rankings) if rankings else np.zeros((0, dataset.num_pixels), dtype=np.int64)


def remove_top(dataset: Dataset, rankings: np.ndarray, fraction: float, fill: np.ndarray) -> Dataset:
	inputs = np.stack([perturb_pixels(x, r, fraction, fill) for x, r in zip(dataset.inputs, rankings)]) \
		if len(dataset) else dataset.inputs
	return dataset.with_inputs(inputs)


def _roar_cell(item: tuple[int, int, Dataset, Dataset], *, spec: NetSpec, cfg: TrainConfig) -> tuple[int, int, float]:
	percentile, seed, train_set, test_set = item
	try:
		result = train(spec, train_set, replace(cfg, seed=seed))
	except FloatingPointError as ex:
		logger.warning(f'ROAR cell (percentile {percentile}, seed {seed}) diverged: {ex}')
		return percentile, seed, np.nan
	return percentile, seed, evaluate(result.net, test_set).accuracy


def roar_run(
		spec: NetSpec,
		train_set: Dataset,
		test_set: Dataset,
		attributor: Attributor,
		cfg: TrainConfig,
		*,
		reference: Network | None = None,
		percentiles: Sequence[int] = ROAR_PERCENTILES,
		seeds_per_cell: int = ROAR_SEEDS_PER_CELL,
		reduction: str = 'abs',
		jobs: int = 1,
		progress: bool = False,
		) -> RoarResult:
	"""
	Remove the top-t% pixels of every train and test image (per-channel train mean fill), retrain from scratch with
	`seeds_per_cell` seeds per percentile, and record test accuracy. A lower area under the accuracy curve means the
	attribution found the informative pixels.

	Seeds are cfg.seed, cfg.seed + 1, ...; a diverged cell is recorded as nan and the run continues.
	"""

	if not len(train_set) or not len(test_set):
		raise ValueError('ROAR needs non-empty train and test splits')

	if reference is None:
		logger.info('Training ROAR reference network')
		reference = train(spec, train_set, cfg).net

	train_rank = roar_rankings(reference, train_set, attributor, seed=cfg.seed, reduction=reduction)
	test_rank = roar_rankings(reference, test_set, attributor, seed=cfg.seed + 1, reduction=reduction)
	fill = train_set.channel_means

	all_percentiles = (0,) + tuple(int(p) for p in percentiles if p != 0)
	seeds = tuple(cfg.seed + k for k in range(seeds_per_cell))

	items = []
	for p in all_percentiles:
		mod_train = remove_top(train_set, train_rank, p / 100, fill)
		mod_test = remove_top(test_set, test_rank, p / 100, fill)
		items.extend((p, s, mod_train, mod_test) for s in seeds)

	fn = partial(_roar_cell, spec=spec, cfg=cfg)
	cells = _map_jobs(fn, items, jobs, f'ROAR {attributor.name}', progress)

	accuracies = np.full((len(all_percentiles), len(seeds)), np.nan, dtype=DTYPE)
	diverged = []
	for p, s, acc in cells:
		accuracies[all_percentiles.index(p), seeds.index(s)] = acc
		if np.isnan(acc):
			diverged.append((p, s))

	means = _nanmean(accuracies, axis=1)
	valid = ~np.isnan(means)
	fractions = np.array(all_percentiles, dtype=DTYPE) / 100
	auc = metrics.auc(fractions[valid], means[valid]) if valid.sum() >= 2 else np.nan

	result = RoarResult(
		percentiles=all_percentiles,
		accuracies=accuracies,
		seeds=seeds,
		method=attributor.name,
		auc=auc,
		diverged=tuple(diverged),
	)
	logger.info(f'ROAR {attributor.name}: mean accuracy {dict(zip(all_percentiles, np.round(means, 3)))}, AUC {auc:.4f}')
	return result


# Sanity check


def randomize_cascade(net: Network, seed: int, std: float = SANITY_WEIGHT_STD) -> list[tuple[int, Network]]:
	"""
	:returns: [(layer position, network)] with parameter layers re-initialized cumulatively from the head backwards
		(weights ~ N(0, std^2), biases 0)
	"""
	rng = np.random.default_rng(seed)
	params = [(w.copy(), b.copy()) for w, b in net.params]
	checkpoints = []
	for k in reversed(range(len(params))):
		w, _ = params[k]
		params[k] = (rng.normal(0.0, std, size=w.shape), np.zeros(params[k][1].shape))
		checkpoints.append((net.param_positions[k], net.with_params(params)))
	return checkpoints


@dataclass(frozen=True, eq=False)
class SanityTrace:
	labels: tuple[str, ...]  # 'original', then one per randomized layer
	ssim: np.ndarray  # per checkpoint, mean over inputs
	spearman: np.ndarray
	per_sample_ssim: np.ndarray  # (n, checkpoints)
	per_sample_spearman: np.ndarray
	method: str

	def to_frame(self) -> pd.DataFrame:
		return pd.DataFrame(dict(
			checkpoint=np.arange(len(self.labels)),
			randomized=self.labels,
			ssim=self.ssim,
			spearman=self.spearman,
			spearman_undefined=np.sum(np.isnan(self.per_sample_spearman), axis=0),
		))


def _comparison_map(amap: AttributionMap) -> np.ndarray:
	raw = attribution.normalize_map(amap).raw
	return raw.mean(axis=0) if raw.ndim == 3 else raw.reshape(1, -1)


def _sanity_sample(
		item: tuple[int, np.ndarray],
		*,
		nets: tuple[Network, ...],
		attributor: Attributor,
		seed: int,
		) -> tuple[np.ndarray, np.ndarray]:

	index, x = item
	original = nets[0]
	class_index = int(predict(original, x[None, ...])[0])

	reference = _comparison_map(attributor(original, x, class_index, _sample_rng(seed, index)))
	ssims = []
	spearmans = []
	for net in nets:
		current = _comparison_map(attributor(net, x, class_index, _sample_rng(seed, index)))
		ssims.append(metrics.ssim(reference, current))
		spearmans.append(metrics.spearman(reference, current))
	return np.array(ssims), np.array(spearmans)


def randomization_sanity(
		net: Network,
		dataset: Dataset,
		attributor: Attributor,
		*,
		seed: int = 0,
		jobs: int = 1,
		progress: bool = False,
		) -> SanityTrace:
	"""
	Similarity of each input's attribution before and after cascading layer randomization

	Maps are normalized to [-1, 1] and averaged over channels before comparison. The class explained is always the
	original network's prediction.
	"""

	if not len(dataset):
		raise ValueError('Sanity check needs a non-empty dataset')

	cascade = randomize_cascade(net, seed)
	nets = (net,) + tuple(n for _, n in cascade)
	labels = ('original',) + tuple(f'layer {pos}' for pos, _ in cascade)

	items = list(enumerate(dataset.inputs))
	fn = partial(_sanity_sample, nets=nets, attributor=attributor, seed=seed)
	results = _map_jobs(fn, items, jobs, f'Sanity {attributor.name}', progress)

	per_ssim = np.stack([r[0] for r in results])
	per_spearman = np.stack([r[1] for r in results])

	trace = SanityTrace(
		labels=labels,
		ssim=_nanmean(per_ssim, axis=0),
		spearman=_nanmean(per_spearman, axis=0),
		per_sample_ssim=per_ssim,
		per_sample_spearman=per_spearman,
		method=attributor.name,
	)
	logger.info(f'Sanity {attributor.name}: final SSIM {trace.ssim[-1]:.3f}, Spearman {trace.spearman[-1]:.3f}')
	return trace


# Pathway statistics


def parse_stats_method(name: str) -> str:
	key = name.lower().replace('-', '').replace('_', '')
	aliases = {m.replace('_', ''): m for m in STATS_METHODS}
	aliases.update(greedypruning='greedy', dgr='dgr_one', dgrinit1='dgr_one', dgrinitrandom='dgr_random')
	if key not in aliases:
		raise ValueError(f'Unknown pathway method {name!r}, expected one of {STATS_METHODS}')
	return aliases[key]


@dataclass(frozen=True)
class StatsConfig:
	steps: int = DEFAULT_INTGRAD_STEPS
	chunk: int | None = None
	dgr: DgrConfig = DgrConfig()
	reference: str = 'neuron_intgrad'


def _pathway_masks(
		net: Network,
		x: np.ndarray,
		class_index: int,
		method: str,
		sparsity: float,
		cfg: StatsConfig,
		seed: int,
		) -> tuple[PathwayMask, bool]:
	"""
	:returns: mask, and whether it uses pruning semantics (m * a) rather than frozen semantics
	"""
	match method:
		case 'neuron_mct' | 'neuron_intgrad':
			c = contributions(net, x, class_index, method, steps=cfg.steps)
			return select_pathway(c, sparsity), False
		case 'greedy':
			mask, _ = greedy_prune(net, x, class_index, sparsity, cfg.chunk)
			return mask, True
		case 'dgr_one' | 'dgr_random':
			dgr_cfg = replace(cfg.dgr, init='one' if method == 'dgr_one' else 'random', seed=seed)
			_, mask = dgr_optimize(net, x, class_index, dgr_cfg, sparsity)
			return mask, True
		case 'active_subnet':
			return active_subnet(forward_record(net, x, class_index=class_index)), False
		case _:
			raise ValueError(f'Unknown pathway method {method!r}')


def _stats_sample(
		item: tuple[int, np.ndarray],
		*,
		net: Network,
		methods: tuple[str, ...],
		sparsities: tuple[float, ...],
		cfg: StatsConfig,
		seed: int,
		) -> list[dict]:

	index, x = item
	class_index = int(predict(net, x[None, ...])[0])
	original = forward_record(net, x, class_index=class_index)
	sample_seed = int(np.random.default_rng([seed, index]).integers(2 ** 31))

	rows = []
	for sparsity in sparsities:
		masks = {m: _pathway_masks(net, x, class_index, m, sparsity, cfg, sample_seed) for m in methods}
		if cfg.reference in masks:
			reference = masks[cfg.reference][0]
		else:
			reference, _ = _pathway_masks(net, x, class_index, cfg.reference, sparsity, cfg, sample_seed)

		for method, (mask, pruning) in masks.items():
			if not mask.num_kept:
				logger.warning(f'Sample {index}: {method} pathway is empty at sparsity {sparsity}, skipping')
				continue
			current = masked_record(net, x, mask, class_index) if pruning else build_frozen(net, original, mask).forward(x)
			dead = dead_fraction(mask, original, current)
			row = dict(
				sample=index,
				method=method,
				sparsity=sparsity,
				kept=mask.num_kept,
				threshold=np.nan if mask.threshold is None else mask.threshold,
				degenerate=mask.degenerate,
				originally_dead=dead.originally_dead,
				now_active=dead.now_active,
				jaccard=jaccard(mask, reference),
			)
			for layer, value in enumerate(jaccard(mask, reference, mode='layer')):
				row[f'jaccard_layer_{layer}'] = value
			rows.append(row)
	return rows


def pathway_stats(
		net: Network,
		inputs: Iterable[np.ndarray],
		methods: Sequence[str] = STATS_METHODS,
		sparsities: Sequence[float] = (0.8, 0.9, 0.99),
		cfg: StatsConfig = StatsConfig(),
		*,
		seed: int = 0,
		jobs: int = 1,
		progress: bool = False,
		) -> pd.DataFrame:
	"""
	Dead-neuron fractions and Jaccard overlap with the reference pathway, per input, method and sparsity

	"now_active" uses a forward pass under mask semantics for pruning-derived pathways, and the frozen network (whose
	pathway activations equal the original ones) for the others.
	"""

	methods = tuple(parse_stats_method(m) for m in methods)
	items = list(enumerate(np.asarray(x, dtype=DTYPE) for x in inputs))
	if not items:
		raise ValueError('Pathway statistics need at least one input')

	fn = partial(_stats_sample, net=net, methods=methods, sparsities=tuple(sparsities), cfg=cfg, seed=seed)
	rows = [row for sample_rows in _map_jobs(fn, items, jobs, 'Pathway stats', progress) for row in sample_rows]
	return pd.DataFrame(rows)


def summarize_stats(frame: pd.DataFrame) -> pd.DataFrame:
	"""
	Mean of every statistic per (method, sparsity)
	"""
	value_columns = [c for c in frame.columns if c not in ('sample', 'method', 'sparsity', 'degenerate')]
	return frame.groupby(['method', 'sparsity'], sort=True)[value_columns].mean().reset_index()
