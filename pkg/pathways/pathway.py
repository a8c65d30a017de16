#!/usr/bin/env python3

"""
Pathway masks over hidden neurons: selection, frozen sub-network approximation, and statistics
"""

from dataclasses import dataclass
from enum import Enum, unique
import logging
from os import PathLike
from pathlib import Path
from typing import Final

import numpy as np

from pathways.contrib import ContributionMap
from pathways.network import (
	DTYPE, ActivationRecord, InterceptSpec, Network, ReluRule,
	backward, forward_batch, forward_record,
)


logger = logging.getLogger(__name__)


MASK_FORMAT: Final = 'pathway-mask 1'


@unique
class PathwayMethod(Enum):
	neuron_mct = 'neuron_mct'
	neuron_intgrad = 'neuron_intgrad'
	marginal = 'marginal'
	greedy = 'greedy'
	dgr = 'dgr'
	active_subnet = 'active_subnet'
	manual = 'manual'

	@classmethod
	def parse(cls, name: str) -> 'PathwayMethod':
		"""
		Accepts CLI spellings: 'neuronintgrad', 'neuron-intgrad', 'NeuronIntGrad', ...
		"""
		key = name.lower().replace('-', '').replace('_', '')
		for method in cls:
			if method.value.replace('_', '') == key:
				return method
		if key in ('greedypruning', 'prune'):
			return cls.greedy
		raise ValueError(f'Unknown pathway method {name!r}, expected one of {[m.value for m in cls]}')


@dataclass(frozen=True, eq=False)
class PathwayMask:
	e: np.ndarray  # (N,) bool
	layer_sizes: tuple[int, ...]
	method: PathwayMethod
	sparsity: float
	# Smallest kept score (c_kappa); None when the mask was not selected by score
	threshold: float | None = None
	digest: str = ''
	# Set when the threshold is 0, i.e. some kept neurons contribute nothing
	degenerate: bool = False

	def __post_init__(self):
		e = np.asarray(self.e, dtype=bool)
		e.setflags(write=False)
		object.__setattr__(self, 'e', e)
		object.__setattr__(self, 'sparsity', float(self.sparsity))
		if self.threshold is not None:
			object.__setattr__(self, 'threshold', float(self.threshold))
		if e.shape != (sum(self.layer_sizes),):
			raise ValueError(f'Mask of shape {e.shape} does not match layer sizes {self.layer_sizes}')

	@property
	def num_neurons(self) -> int:
		return len(self.e)

	@property
	def num_kept(self) -> int:
		return int(self.e.sum())

	@property
	def realized_sparsity(self) -> float:
		return 1.0 - self.num_kept / self.num_neurons if self.num_neurons else 0.0

	def per_layer(self) -> tuple[np.ndarray, ...]:
		bounds = np.cumsum((0,) + self.layer_sizes)
		return tuple(self.e[a:b] for a, b in zip(bounds[:-1], bounds[1:]))

	def indices(self) -> np.ndarray:
		return np.flatnonzero(self.e)

	def to_text(self) -> str:
		lines = [
			MASK_FORMAT,
			f'model: {self.digest}',
			f'method: {self.method.value}',
			f'sparsity: {self.sparsity!r}',
			f'threshold: {"none" if self.threshold is None else repr(self.threshold)}',
			f'degenerate: {str(self.degenerate).lower()}',
			f'layer_sizes: {" ".join(str(n) for n in self.layer_sizes)}',
			f'indices: {" ".join(str(i) for i in self.indices())}',
		]
		return '\n'.join(lines) + '\n'

	@classmethod
	def from_text(cls, text: str) -> 'PathwayMask':
		lines = text.splitlines()
		if not lines or lines[0].strip() != MASK_FORMAT:
			raise ValueError(f'Not a pathway mask: expected first line {MASK_FORMAT!r}')

		fields = {}
		for line in lines[1:]:
			if not line.strip():
				continue
			key, sep, value = line.partition(':')
			if not sep:
				raise ValueError(f'Malformed pathway mask line {line!r}')
			fields[key.strip()] = value.strip()

		try:
			layer_sizes = tuple(int(v) for v in fields['layer_sizes'].split())
			e = np.zeros(sum(layer_sizes), dtype=bool)
			indices = np.array([int(v) for v in fields['indices'].split()], dtype=np.int64)
			if len(indices) and (indices.min() < 0 or indices.max() >= len(e)):
				raise ValueError(f'Pathway index out of range for {len(e)} neurons')
			e[indices] = True
			threshold = None if fields['threshold'] == 'none' else float(fields['threshold'])
			return cls(
				e=e,
				layer_sizes=layer_sizes,
				method=PathwayMethod(fields['method']),
				sparsity=float(fields['sparsity']),
				threshold=threshold,
				digest=fields['model'],
				degenerate=fields.get('degenerate', 'false') == 'true',
			)
		except KeyError as ex:
			raise ValueError(f'Pathway mask is missing field {ex}') from ex

	def save(self, path: Path | PathLike | str) -> None:
		Path(path).write_text(self.to_text(), encoding='utf-8')

	@classmethod
	def load(cls, path: Path | PathLike | str) -> 'PathwayMask':
		return cls.from_text(Path(path).read_text(encoding='utf-8'))


def _check_sparsity(sparsity: float) -> None:
	if not 0.0 <= sparsity < 1.0:
		raise ValueError(f'Sparsity must be in [0, 1), got {sparsity}')


def keep_count(num_neurons: int, sparsity: float) -> int:
	"""
	Number of neurons kept at sparsity kappa: (1 - kappa) * N, rounded half up, at least 1
	"""
	_check_sparsity(sparsity)
	return max(1, int(np.floor((1.0 - sparsity) * num_neurons + 0.5)))


def top_indicator(scores: np.ndarray, keep: int) -> tuple[np.ndarray, float]:
	"""
	:returns: indicator of the `keep` highest scores (ties to the lowest flat index, i.e. (layer, unit) order),
		and the smallest kept score
	"""
	order = np.argsort(-scores, kind='stable')
	e = np.zeros(len(scores), dtype=bool)
	e[order[:keep]] = True
	return e, float(scores[order[keep - 1]])


def select_pathway(c: ContributionMap, sparsity: float, *, method: PathwayMethod | None = None) -> PathwayMask:
	"""
	Keep the top (1 - kappa) * N neurons by contribution, ranked network-wide
	"""

	n = c.num_neurons
	if n == 0:
		raise ValueError('Network has no hidden neurons to select from')

	keep = keep_count(n, sparsity)
	e, threshold = top_indicator(c.values, keep)

	degenerate = threshold <= 0.0
	if degenerate:
		logger.warning(
			f'Pathway threshold is 0 at sparsity {sparsity}: only {np.count_nonzero(c.values)} of {n} neurons contribute, '
			f'so the kept set includes zero-contribution neurons')

	return PathwayMask(
		e=e,
		layer_sizes=c.layer_sizes,
		method=method or PathwayMethod(c.method.value),
		sparsity=sparsity,
		threshold=threshold,
		digest=c.digest,
		degenerate=degenerate,
	)


def active_subnet(record: ActivationRecord) -> PathwayMask:
	"""
	All neurons with a > 0 at the recorded input
	"""
	e = record.pattern()
	layer_sizes = tuple(len(a) for a in record.activations)
	n = len(e)
	return PathwayMask(
		e=e,
		layer_sizes=layer_sizes,
		method=PathwayMethod.active_subnet,
		sparsity=(1.0 - e.sum() / n) if n else 0.0,
		digest=record.digest,
	)


def manual_mask(net: Network, e: np.ndarray, sparsity: float | None = None) -> PathwayMask:
	e = np.asarray(e, dtype=bool)
	return PathwayMask(
		e=e,
		layer_sizes=net.layer_sizes,
		method=PathwayMethod.manual,
		sparsity=(1.0 - e.sum() / len(e)) if sparsity is None else sparsity,
		digest=net.digest,
	)


def _check_mask(net: Network, mask: PathwayMask) -> None:
	if mask.layer_sizes != net.layer_sizes:
		raise ValueError(f'Mask layer sizes {mask.layer_sizes} do not match network layer sizes {net.layer_sizes}')
	if mask.digest and mask.digest != net.digest:
		logger.warning(f'Mask was selected on model {mask.digest[:12]}, applying it to {net.digest[:12]}')


# Frozen network


@dataclass(frozen=True, eq=False)
class FrozenNetwork:
	"""
	The network with every neuron outside the pathway replaced by its recorded activation

	Frozen neurons are input-independent constants, so they pass no gradient and define no ReLU boundary
	"""
	net: Network
	record: ActivationRecord
	mask: PathwayMask
	intercept: InterceptSpec

	@property
	def class_index(self) -> int:
		return self.record.class_index

	@property
	def reference_input(self) -> np.ndarray:
		return self.record.input

	@property
	def live(self) -> np.ndarray:
		return self.mask.e

	def forward(self, x: np.ndarray, class_index: int | None = None) -> ActivationRecord:
		ci = self.class_index if class_index is None else class_index
		return forward_record(self.net, x, class_index=ci, intercept=self.intercept)

	def forward_batch(self, xs: np.ndarray):
		return forward_batch(self.net, xs, self.intercept)

	def output(self, x: np.ndarray) -> float:
		return self.forward(x).output

	def outputs(self, xs: np.ndarray) -> np.ndarray:
		return self.forward_batch(xs).outputs(self.class_index)

	def input_gradient(self, x: np.ndarray, *, relu_rule: ReluRule = ReluRule.standard) -> np.ndarray:
		return backward(self.net, self.forward(x), relu_rule=relu_rule).input_grad


def build_frozen(net: Network, record: ActivationRecord, mask: PathwayMask) -> FrozenNetwork:

	if record.digest != net.digest:
		raise ValueError('Activation record was produced by a different network')
	if record.intercept is not None:
		raise ValueError('Frozen networks need a record of the unmodified network')
	_check_mask(net, mask)

	intercept = InterceptSpec.freeze(net, ~mask.e, record.flat_activations())
	return FrozenNetwork(net=net, record=record, mask=mask, intercept=intercept)


def masked_record(net: Network, x: np.ndarray, mask: PathwayMask, class_index: int) -> ActivationRecord:
	"""
	Forward pass under pruning semantics m * a (excluded neurons transmit 0)
	"""
	_check_mask(net, mask)
	return forward_record(net, x, class_index=class_index, intercept=InterceptSpec.from_mask(net, mask.e))


# Statistics


@dataclass(frozen=True)
class DeadFraction:
	# Fraction of pathway neurons with a = 0 in the original record
	originally_dead: float
	# Fraction of pathway neurons dead originally but active in `current`; None without a current record
	now_active: float | None
	num_kept: int


def dead_fraction(
		mask: PathwayMask,
		original: ActivationRecord,
		current: ActivationRecord | None = None,
		) -> DeadFraction:

	kept = mask.num_kept
	if kept == 0:
		raise ValueError('Empty pathway: no neurons kept')

	original_pattern = original.pattern()
	if original_pattern.shape != mask.e.shape:
		raise ValueError(f'Record has {len(original_pattern)} neurons, mask has {mask.num_neurons}')

	dead_kept = mask.e & ~original_pattern
	now_active = None
	if current is not None:
		current_pattern = current.pattern()
		if current_pattern.shape != mask.e.shape:
			raise ValueError(f'Current record has {len(current_pattern)} neurons, mask has {mask.num_neurons}')
		now_active = float(np.count_nonzero(dead_kept & current_pattern) / kept)

	return DeadFraction(
		originally_dead=float(np.count_nonzero(dead_kept) / kept),
		now_active=now_active,
		num_kept=kept,
	)


def jaccard(e1: PathwayMask, e2: PathwayMask, mode: str = 'global') -> float | np.ndarray:
	"""
	|e1 & e2| / |e1 | e2|; an empty union counts as identical (1.0)

	:param mode: 'global' for one network-wide value, 'layer' for one value per hidden layer
	"""

	if e1.layer_sizes != e2.layer_sizes:
		raise ValueError(f'Mask shapes differ: {e1.layer_sizes} vs {e2.layer_sizes}')

	def score(a: np.ndarray, b: np.ndarray) -> float:
		union = np.count_nonzero(a | b)
		if union == 0:
			return 1.0
		return np.count_nonzero(a & b) / union

	match mode:
		case 'global':
			return float(score(e1.e, e2.e))
		case 'layer':
			return np.array([score(a, b) for a, b in zip(e1.per_layer(), e2.per_layer())], dtype=DTYPE)
		case _:
			raise ValueError(f"Unknown Jaccard mode {mode!r}, expected 'global' or 'layer'")
