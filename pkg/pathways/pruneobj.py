#!/usr/bin/env python3

"""
Pathways selected by a pruning objective rather than by contribution: greedy pruning with rescoring, and distillation
guided routing (continuous gates with an L1 penalty)

Both keep the network's output close to the original under mask semantics m * a, which lets originally-dead neurons
become active once their inhibitors are removed.
"""

from dataclasses import dataclass, field
import logging
from typing import Final

import numpy as np
import pandas as pd

from pathways.network import (
	DTYPE, InterceptSpec, Network,
	backward, forward_record, reverse,
)
from pathways.pathway import PathwayMask, PathwayMethod, keep_count, top_indicator


logger = logging.getLogger(__name__)


DGR_DEFAULT_LR: Final = 0.1
DGR_DEFAULT_ITERATIONS: Final = 30
DGR_DEFAULT_GAMMA: Final = 0.05
DGR_INITS: Final = ('one', 'random')
DGR_LOSSES: Final = ('mse', 'cross_entropy')

# Step halvings tried before an iteration is skipped
MAX_STEP_HALVINGS: Final = 30


# Greedy pruning


@dataclass(frozen=True)
class PruneStep:
	iteration: int
	kept: int
	removed: tuple[int, ...]
	min_score: float
	drift: float


@dataclass(frozen=True, eq=False)
class PruneState:
	mask: np.ndarray
	scores: tuple[np.ndarray, ...]
	steps: tuple[PruneStep, ...]
	original_output: float
	final_output: float
	# Stopped before reaching the target because every remaining neuron scored 0
	exhausted: bool = False

	@property
	def kept_history(self) -> tuple[int, ...]:
		return tuple(s.kept for s in self.steps)

	@property
	def drift(self) -> tuple[float, ...]:
		return tuple(s.drift for s in self.steps)

	def to_frame(self) -> pd.DataFrame:
		return pd.DataFrame(
			[(s.iteration, s.kept, s.min_score, s.drift, ' '.join(str(i) for i in s.removed)) for s in self.steps],
			columns=['iteration', 'kept', 'min_score', 'drift', 'removed'],
		)


def default_chunk(num_neurons: int) -> int:
	return max(1, num_neurons // 100)


def greedy_prune(
		net: Network,
		x: np.ndarray,
		class_index: int,
		sparsity: float,
		chunk: int | None = None,
		) -> tuple[PathwayMask, PruneState]:
	"""
	Alternate between scoring and removal until at most (1 - kappa) * N neurons remain

	Each pass rescores s = |a * dPhi/da| under the current mask, then removes the `chunk` lowest-scoring neurons with
	s != 0. Removal never goes below the target count.
	"""

	n = net.num_neurons
	if n == 0:
		raise ValueError('Network has no hidden neurons to prune')

	target = keep_count(n, sparsity)
	chunk = default_chunk(n) if chunk is None else chunk
	if chunk < 1:
		raise ValueError(f'chunk must be >= 1, got {chunk}')

	original = forward_record(net, x, class_index=class_index).output
	current_output = original

	m = np.ones(n, dtype=bool)
	scores = []
	steps = []
	exhausted = False

	iteration = 0
	while m.sum() > target:
		record = forward_record(net, x, class_index=class_index, intercept=InterceptSpec.from_mask(net, m))
		a = record.flat_activations()
		s = np.abs(a * backward(net, record).flat_neuron_grads())
		scores.append(s)

		candidates = m & (s != 0)
		if not candidates.any():
			exhausted = True
			logger.warning(
				f'Greedy pruning exhausted at {m.sum()} kept neurons (target {target}): every remaining neuron scores 0')
			break

		assert np.all(a[candidates] > 0)

		count = min(chunk, int(m.sum()) - target, int(candidates.sum()))
		order = np.argsort(np.where(candidates, s, np.inf), kind='stable')[:count]
		m[order] = False

		current_output = forward_record(
			net, x, class_index=class_index, intercept=InterceptSpec.from_mask(net, m)).output

		steps.append(PruneStep(
			iteration=iteration,
			kept=int(m.sum()),
			removed=tuple(int(i) for i in order),
			min_score=float(s[order[0]]),
			drift=abs(current_output - original),
		))
		logger.debug(f'Pruning pass {iteration}: removed {order.tolist()}, {m.sum()} kept, output {current_output:.6g}')
		iteration += 1

	state = PruneState(
		mask=m.copy(),
		scores=tuple(scores),
		steps=tuple(steps),
		original_output=original,
		final_output=current_output,
		exhausted=exhausted,
	)

	mask = PathwayMask(
		e=m,
		layer_sizes=net.layer_sizes,
		method=PathwayMethod.greedy,
		sparsity=sparsity,
		digest=net.digest,
	)
	return mask, state


# Distillation guided routing


@dataclass(frozen=True)
class DgrConfig:
	gamma: float = DGR_DEFAULT_GAMMA
	lr: float = DGR_DEFAULT_LR
	iterations: int = DGR_DEFAULT_ITERATIONS
	init: str = 'one'
	loss: str = 'mse'
	seed: int = 0

	def __post_init__(self):
		if self.gamma < 0:
			raise ValueError(f'gamma must be >= 0, got {self.gamma}')
		if self.lr <= 0:
			raise ValueError(f'lr must be > 0, got {self.lr}')
		if self.iterations < 0:
			raise ValueError(f'iterations must be >= 0, got {self.iterations}')
		if self.init not in DGR_INITS:
			raise ValueError(f'Unknown gate init {self.init!r}, expected one of {DGR_INITS}')
		if self.loss not in DGR_LOSSES:
			raise ValueError(f'Unknown DGR loss {self.loss!r}, expected one of {DGR_LOSSES}')


@dataclass(frozen=True, eq=False)
class GateVector:
	gates: np.ndarray  # (N,), all >= 0
	layer_sizes: tuple[int, ...]
	cfg: DgrConfig
	# Objective at the initial gates, then after every iteration
	objective: tuple[float, ...] = field(default=())
	step_sizes: tuple[float, ...] = field(default=())

	def to_frame(self) -> pd.DataFrame:
		return pd.DataFrame(dict(
			iteration=np.arange(len(self.objective)),
			objective=self.objective,
			step=(np.nan,) + self.step_sizes,
		))


def _softmax(logits: np.ndarray) -> np.ndarray:
	shifted = logits - logits.max()
	e = np.exp(shifted)
	return e / e.sum()


def _dgr_objective(
		net: Network,
		x: np.ndarray,
		class_index: int,
		gates: np.ndarray,
		cfg: DgrConfig,
		target_logits: np.ndarray,
		) -> tuple[float, np.ndarray]:
	"""
	:returns: loss(Phi(x), Phi(x; gates * a)) + gamma * sum(gates), and its gradient wrt the gates
	"""

	record = forward_record(net, x, class_index=class_index, intercept=InterceptSpec.from_gates(net, gates))
	logits = record.logits

	if cfg.loss == 'mse':
		diff = logits[class_index] - target_logits[class_index]
		loss = diff ** 2
		seed = np.zeros_like(logits)
		seed[class_index] = 2.0 * diff
	else:
		p = _softmax(target_logits)
		q = _softmax(logits)
		loss = -np.sum(p * np.log(np.maximum(q, np.finfo(DTYPE).tiny)))
		seed = q - p

	grads = reverse(net, record.trace, seed[None, :])
	dgates = record.flat_activations() * net.concat([g[0] for g in grads.transmitted_grads])

	return float(loss + cfg.gamma * gates.sum()), dgates + cfg.gamma


def dgr_optimize(
		net: Network,
		x: np.ndarray,
		class_index: int,
		cfg: DgrConfig = DgrConfig(),
		sparsity: float | None = None,
		) -> tuple[GateVector, PathwayMask | None]:
	"""
	Projected gradient descent on continuous neuron gates, gates <- max(gates - lr * grad, 0)

	A step that would raise the objective is halved until it does not, so the objective never increases.

	:returns: optimized gates, and the top-(1 - kappa) gate pathway if a sparsity is given
	:raises FloatingPointError: if the objective becomes non-finite
	"""

	n = net.num_neurons
	rng = np.random.default_rng(cfg.seed)
	gates = np.ones(n, dtype=DTYPE) if cfg.init == 'one' else rng.uniform(0.0, 1.0, size=n)

	target_logits = forward_record(net, x, class_index=class_index).logits

	objective, grad = _dgr_objective(net, x, class_index, gates, cfg, target_logits)
	if not np.isfinite(objective):
		raise FloatingPointError('DGR objective is non-finite at iteration 0')

	history = [objective]
	step_sizes = []

	for iteration in range(1, cfg.iterations + 1):
		lr = cfg.lr
		for _ in range(MAX_STEP_HALVINGS):
			candidate = np.maximum(gates - lr * grad, 0.0)
			with np.errstate(over='ignore', invalid='ignore'):
				new_objective, new_grad = _dgr_objective(net, x, class_index, candidate, cfg, target_logits)
			if not np.isfinite(new_objective):
				raise FloatingPointError(f'DGR objective is non-finite at iteration {iteration}')
			if new_objective <= objective:
				break
			lr /= 2
		else:
			# No accepted step; stay put
			candidate, new_objective, new_grad, lr = gates, objective, grad, 0.0

		assert np.all(candidate >= 0.0)
		gates, objective, grad = candidate, new_objective, new_grad
		history.append(objective)
		step_sizes.append(lr)

	logger.debug(f'DGR ({cfg.init} init): objective {history[0]:.6g} -> {history[-1]:.6g} in {cfg.iterations} iterations')

	result = GateVector(
		gates=gates,
		layer_sizes=net.layer_sizes,
		cfg=cfg,
		objective=tuple(history),
		step_sizes=tuple(step_sizes),
	)

	if sparsity is None:
		return result, None
	return result, gate_pathway(net, result, sparsity)


def gate_pathway(net: Network, gates: GateVector, sparsity: float) -> PathwayMask:
	"""
	The top-(1 - kappa) neurons by gate value
	"""
	e, threshold = top_indicator(gates.gates, keep_count(net.num_neurons, sparsity))
	degenerate = threshold <= 0.0
	if degenerate:
		logger.warning(f'DGR pathway at sparsity {sparsity} includes closed gates (threshold 0)')

	return PathwayMask(
		e=e,
		layer_sizes=net.layer_sizes,
		method=PathwayMethod.dgr,
		sparsity=sparsity,
		threshold=threshold,
		digest=net.digest,
		degenerate=degenerate,
	)
