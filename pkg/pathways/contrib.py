#!/usr/bin/env python3

"""
Neuron contribution scores

All scores use a zero-activation baseline. Maps keep both the signed value (for completeness checks) and its magnitude
(for ranking).
"""

from dataclasses import dataclass
from enum import Enum, unique
import logging
from math import comb
from os import PathLike
from pathlib import Path
from typing import Final

import numpy as np
import pandas as pd

from pathways.network import (
	DTYPE, InterceptSpec, Network, NeuronId,
	backward, forward_batch, forward_record, logit_seed, reverse,
)


logger = logging.getLogger(__name__)


DEFAULT_INTGRAD_STEPS: Final = 50
INTGRAD_MODES: Final = ('layer', 'neuron')

MAX_SHAPLEY_WIDTH: Final = 20
SHAPLEY_CHUNK: Final = 4096


@unique
class ContributionMethod(Enum):
	neuron_mct = 'neuron_mct'
	neuron_intgrad = 'neuron_intgrad'
	marginal = 'marginal'


@dataclass(frozen=True, eq=False)
class ContributionMap:
	values: np.ndarray  # (N,) |c|, used for ranking
	signed: np.ndarray  # (N,) before the absolute value
	method: ContributionMethod
	class_index: int
	layer_sizes: tuple[int, ...]
	digest: str
	steps: int | None = None
	mode: str | None = None

	def __post_init__(self):
		if self.values.shape != (sum(self.layer_sizes),):
			raise ValueError(f'Contribution vector shape {self.values.shape} does not match layer sizes {self.layer_sizes}')

	@property
	def num_neurons(self) -> int:
		return len(self.values)

	def per_layer(self, signed: bool = False) -> tuple[np.ndarray, ...]:
		arr = self.signed if signed else self.values
		bounds = np.cumsum((0,) + self.layer_sizes)
		return tuple(arr[a:b] for a, b in zip(bounds[:-1], bounds[1:]))

	def to_frame(self) -> pd.DataFrame:
		layers = np.repeat(np.arange(len(self.layer_sizes)), self.layer_sizes)
		units = np.concatenate([np.arange(n) for n in self.layer_sizes]) if self.layer_sizes else np.zeros(0, int)
		return pd.DataFrame(dict(layer=layers, unit=units, value=self.values, signed=self.signed))

	def to_csv(self, path: Path | PathLike | str) -> None:
		self.to_frame().to_csv(path, index=False, float_format='%.17g')

	def save_npz(self, path: Path | PathLike | str) -> None:
		"""
		Compact binary form, keyed by the network digest
		"""
		np.savez(
			path,
			values=self.values,
			signed=self.signed,
			layer_sizes=np.array(self.layer_sizes, dtype=np.int64),
			meta=np.array([self.method.value, self.digest, self.mode or '']),
			ints=np.array([self.class_index, -1 if self.steps is None else self.steps], dtype=np.int64),
		)

	@classmethod
	def load_npz(cls, path: Path | PathLike | str, *, digest: str | None = None) -> 'ContributionMap':
		with np.load(path) as f:
			method, file_digest, mode = (str(s) for s in f['meta'])
			class_index, steps = (int(v) for v in f['ints'])
			if digest is not None and file_digest != digest:
				raise ValueError(f'{path}: contribution map was computed for model {file_digest[:12]}, not {digest[:12]}')
			return cls(
				values=f['values'],
				signed=f['signed'],
				method=ContributionMethod(method),
				class_index=class_index,
				layer_sizes=tuple(int(n) for n in f['layer_sizes']),
				digest=file_digest,
				steps=None if steps < 0 else steps,
				mode=mode or None,
			)


def _map(net: Network, signed: np.ndarray, method: ContributionMethod, class_index: int, **kwargs) -> ContributionMap:
	signed = np.asarray(signed, dtype=DTYPE)
	return ContributionMap(
		values=np.abs(signed),
		signed=signed,
		method=method,
		class_index=class_index,
		layer_sizes=net.layer_sizes,
		digest=net.digest,
		**kwargs,
	)


def _repeat(x: np.ndarray, count: int) -> np.ndarray:
	x = np.asarray(x, dtype=DTYPE)
	return np.repeat(x[None, ...], count, axis=0)


def neuron_mct(
		net: Network,
		x: np.ndarray,
		class_index: int,
		*,
		intercept: InterceptSpec | None = None,
		) -> ContributionMap:
	"""
	First-order Taylor estimate |a * dPhi/da| of each neuron's marginal contribution

	Under a masking intercept, a is the neuron's activation in the masked network and the gradient is gated by the mask
	"""
	record = forward_record(net, x, class_index=class_index, intercept=intercept)
	grads = backward(net, record)
	signed = record.flat_activations() * grads.flat_neuron_grads()
	return _map(net, signed, ContributionMethod.neuron_mct, class_index)


def intgrad_alphas(steps: int) -> np.ndarray:
	"""
	Midpoint rule over (0, 1]
	"""
	if steps < 1:
		raise ValueError(f'IntGrad needs at least 1 step, got {steps=}')
	return (np.arange(steps, dtype=DTYPE) + 0.5) / steps


def _intgrad_layer(net: Network, x: np.ndarray, class_index: int, layer: int, alphas: np.ndarray) -> np.ndarray:
	"""
	Mean path gradient dPhi/dt along t = alpha * a for every neuron of one layer, scaled jointly
	"""
	steps = len(alphas)
	intercept = InterceptSpec.scale_layer(net, layer, alphas)
	trace = forward_batch(net, _repeat(x, steps), intercept)
	grads = reverse(net, trace, logit_seed(net, class_index, steps))
	return grads.transmitted_grads[layer].mean(axis=0)


def _intgrad_neuron(net: Network, x: np.ndarray, class_index: int, layer: int, alphas: np.ndarray) -> np.ndarray:
	"""
	Mean path gradient for every neuron of one layer, each scaled on its own with the rest of the layer intact
	"""
	steps = len(alphas)
	n = net.layer_sizes[layer]
	gates = np.ones((n, steps, n), dtype=DTYPE)
	gates[np.arange(n), :, np.arange(n)] = alphas
	intercept = InterceptSpec(gates={layer: gates.reshape(n * steps, n)})

	trace = forward_batch(net, _repeat(x, n * steps), intercept)
	grads = reverse(net, trace, logit_seed(net, class_index, n * steps))
	g = grads.transmitted_grads[layer].reshape(n, steps, n)
	return g[np.arange(n), :, np.arange(n)].mean(axis=1)


def neuron_intgrad(
		net: Network,
		x: np.ndarray,
		class_index: int,
		steps: int = DEFAULT_INTGRAD_STEPS,
		*,
		mode: str = 'layer',
		) -> ContributionMap:
	"""
	Integrated-gradients contribution of each neuron along the path from zero to its activation

	mode='layer' scales a whole layer's activations jointly per step (L * steps forwards), so each layer's signed
	contributions sum to Phi(x) - Phi(layer zeroed) up to quadrature error. mode='neuron' scales one neuron at a time
	(N * steps forwards).
	"""

	alphas = intgrad_alphas(steps)
	if mode not in INTGRAD_MODES:
		raise ValueError(f'Unknown IntGrad mode {mode!r}, expected one of {INTGRAD_MODES}')

	record = forward_record(net, x, class_index=class_index)
	integrate = _intgrad_layer if mode == 'layer' else _intgrad_neuron

	path_grads = [integrate(net, x, class_index, i, alphas) for i in range(net.num_hidden_layers)]
	signed = record.flat_activations() * net.concat(path_grads)

	return _map(net, signed, ContributionMethod.neuron_intgrad, class_index, steps=steps, mode=mode)


def marginal_exact(net: Network, x: np.ndarray, neuron: NeuronId, class_index: int) -> float:
	"""
	|Phi(x) - Phi(x; a <- 0)| for one neuron
	"""
	flat = net.flat_index(neuron)
	gates = np.ones(net.num_neurons, dtype=DTYPE)
	gates[flat] = 0.0

	full = forward_record(net, x, class_index=class_index).output
	ablated = forward_record(net, x, class_index=class_index, intercept=InterceptSpec.from_gates(net, gates)).output
	return abs(full - ablated)


def marginal_all(net: Network, x: np.ndarray, class_index: int) -> ContributionMap:
	"""
	Exact single-neuron ablation effect for every neuron, one batched forward
	"""
	n = net.num_neurons
	full = forward_record(net, x, class_index=class_index).output

	if n == 0:
		return _map(net, np.zeros(0), ContributionMethod.marginal, class_index)

	intercept = InterceptSpec.from_gates(net, 1.0 - np.eye(n, dtype=DTYPE))
	ablated = forward_batch(net, _repeat(x, n), intercept).outputs(class_index)
	return _map(net, full - ablated, ContributionMethod.marginal, class_index)


def layer_ablation_delta(net: Network, x: np.ndarray, layer: int, class_index: int) -> float:
	"""
	Phi(x) - Phi(x; whole layer zeroed): the completeness target of per-layer IntGrad
	"""
	gates = np.ones(net.num_neurons, dtype=DTYPE)
	a, b = net.offsets[layer], net.offsets[layer + 1]
	gates[a:b] = 0.0
	full = forward_record(net, x, class_index=class_index).output
	zeroed = forward_record(net, x, class_index=class_index, intercept=InterceptSpec.from_gates(net, gates)).output
	return full - zeroed


def shapley_bruteforce(net: Network, x: np.ndarray, layer: int, class_index: int) -> np.ndarray:
	"""
	Exact Shapley values of every neuron of one layer, absent neurons zeroed

	Evaluates all 2^N_i coalitions, so only usable as a test oracle on narrow layers
	"""

	if not 0 <= layer < net.num_hidden_layers:
		raise ValueError(f'Hidden layer {layer} out of range, network has {net.num_hidden_layers}')

	n = net.layer_sizes[layer]
	if n > MAX_SHAPLEY_WIDTH:
		raise ValueError(f'Layer {layer} has N_i={n} neurons; brute-force Shapley supports at most {MAX_SHAPLEY_WIDTH}')

	coalitions = np.arange(2 ** n, dtype=np.int64)
	members = ((coalitions[:, None] >> np.arange(n)) & 1).astype(DTYPE)

	values = np.empty(len(coalitions), dtype=DTYPE)
	for start in range(0, len(coalitions), SHAPLEY_CHUNK):
		gates = members[start : start + SHAPLEY_CHUNK]
		intercept = InterceptSpec(gates={layer: gates})
		values[start : start + len(gates)] = forward_batch(net, _repeat(x, len(gates)), intercept).outputs(class_index)

	sizes = np.bitwise_count(coalitions)
	# |S|! (n - |S| - 1)! / n!
	weights = np.array([1.0 / (n * comb(n - 1, s)) for s in range(n)], dtype=DTYPE)

	shapley = np.empty(n, dtype=DTYPE)
	for j in range(n):
		without = coalitions[((coalitions >> j) & 1) == 0]
		gains = values[without | (1 << j)] - values[without]
		shapley[j] = np.sum(weights[sizes[without]] * gains)

	logger.debug(f'Shapley over {len(coalitions)} coalitions of layer {layer}: {shapley}')
	return shapley


def contributions(
		net: Network,
		x: np.ndarray,
		class_index: int,
		method: ContributionMethod | str,
		*,
		steps: int = DEFAULT_INTGRAD_STEPS,
		mode: str = 'layer',
		) -> ContributionMap:
	method = ContributionMethod(method)
	match method:
		case ContributionMethod.neuron_mct:
			return neuron_mct(net, x, class_index)
		case ContributionMethod.neuron_intgrad:
			return neuron_intgrad(net, x, class_index, steps, mode=mode)
		case ContributionMethod.marginal:
			return marginal_all(net, x, class_index)
