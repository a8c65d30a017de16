#!/usr/bin/env python3

"""
Linear regions of rectified networks

Within a fixed activation pattern the network is affine in its input. The distance from x to the nearest ReLU
hyperplane z = 0 of a live neuron is |z| / ||grad_x z||, and the smallest such distance is a certified radius.
"""

from dataclasses import dataclass
import logging
from typing import Final

import numpy as np

from pathways.network import (
	DTYPE, ActivationRecord, InterceptSpec, Network, NeuronId,
	forward_batch, logit_seed, reverse,
)
from pathways.pathway import FrozenNetwork
from pathways.types import ActivationPattern


logger = logging.getLogger(__name__)


LINEARITY_RTOL: Final = 1e-6

# Sampling radius when no live neuron defines a boundary (globally affine)
UNBOUNDED_SAMPLE_RADIUS: Final = 1.0


def activation_pattern(record: ActivationRecord, live: np.ndarray | None = None) -> ActivationPattern:
	"""
	1 iff z > 0, optionally restricted to the live neurons
	"""
	pattern = record.pattern()
	return ActivationPattern(pattern if live is None else pattern[live])


@dataclass(frozen=True, eq=False)
class LinearRegionReport:
	radius: float
	argmin: NeuronId | None
	# |z| / ||grad_x z|| per neuron; nan where not considered (frozen, or zero gradient)
	distances: np.ndarray
	num_considered: int
	num_excluded: int
	gradient: np.ndarray
	offset: float
	output: float
	class_index: int
	# Unit vector from x toward the nearest hyperplane
	direction: np.ndarray | None
	# x lies exactly on a live hyperplane
	boundary: bool = False

	def linear_output(self, x: np.ndarray) -> float:
		return float(np.sum(self.gradient * x) + self.offset)

	def to_text(self) -> str:
		lines = [
			f'radius: {self.radius!r}',
			f'argmin: {"none" if self.argmin is None else f"{self.argmin.layer} {self.argmin.unit}"}',
			f'boundary: {str(self.boundary).lower()}',
			f'class_index: {self.class_index}',
			f'output: {self.output!r}',
			f'offset: {self.offset!r}',
			f'considered: {self.num_considered}',
			f'excluded_zero_gradient: {self.num_excluded}',
		]
		return '\n'.join(lines) + '\n'


def _unpack(target: FrozenNetwork | Network, class_index: int | None) -> tuple[Network, InterceptSpec | None, np.ndarray, int | None]:
	if isinstance(target, FrozenNetwork):
		ci = target.class_index if class_index is None else class_index
		return target.net, target.intercept, target.live, ci
	return target, None, np.ones(target.num_neurons, dtype=bool), class_index


def linear_region_radius(
		target: FrozenNetwork | Network,
		x: np.ndarray,
		class_index: int | None = None,
		) -> LinearRegionReport:
	"""
	Certified L2 radius around x within which the live neurons' activation pattern cannot change

	Only live neurons define hyperplanes: for a frozen network the pathway neurons, for a plain network all neurons
	(dead or not). Neurons whose pre-activation does not depend on x are excluded.

	:param class_index: output analyzed by the linear form; defaults to the frozen network's class, or the predicted
		class of a plain network
	"""

	net, intercept, live, class_index = _unpack(target, class_index)
	x = np.asarray(x, dtype=DTYPE)
	trace = forward_batch(net, x[None, ...], intercept)
	if class_index is None:
		class_index = int(np.argmax(trace.logits[0]))

	distances = np.full(net.num_neurons, np.nan, dtype=DTYPE)
	grad_norms = np.zeros(net.num_neurons, dtype=DTYPE)
	live_layers = net.split(live)
	z_all = net.concat([z[0] for z in trace.pre_activations])

	for layer, layer_live in enumerate(live_layers):
		units = np.flatnonzero(layer_live)
		if not len(units):
			continue

		seeds = np.zeros((len(units), net.layer_sizes[layer]), dtype=DTYPE)
		seeds[np.arange(len(units)), units] = 1.0
		grads = reverse(net, trace, seeds, start_layer=layer).input_grads
		norms = np.linalg.norm(grads.reshape(len(units), -1), axis=1)

		flat = net.offsets[layer] + units
		grad_norms[flat] = norms
		nonzero = norms > 0
		distances[flat[nonzero]] = np.abs(z_all[flat[nonzero]]) / norms[nonzero]

	considered = ~np.isnan(distances)
	num_considered = int(considered.sum())
	num_excluded = int(live.sum()) - num_considered

	logits = trace.logits[0]
	output = float(logits[class_index])
	gradient = reverse(net, trace, logit_seed(net, class_index)).input_grads[0]
	offset = output - float(np.sum(gradient * x))

	radius = np.inf
	argmin = None
	direction = None
	boundary = False

	if num_considered:
		flat = int(np.nanargmin(distances))
		radius = float(distances[flat])
		argmin = net.neuron_id(flat)
		boundary = radius == 0.0

		layer, unit = argmin
		seed = np.zeros((1, net.layer_sizes[layer]), dtype=DTYPE)
		seed[0, unit] = 1.0
		grad_z = reverse(net, trace, seed, start_layer=layer).input_grads[0]
		# Step against sign(z) to decrease |z|
		sign = -1.0 if z_all[flat] > 0 else 1.0
		direction = sign * grad_z / np.linalg.norm(grad_z)

		if boundary:
			logger.warning(f'Input lies on the hyperplane of neuron {argmin}: linear region radius is 0')

	logger.debug(f'Linear region radius {radius:.6g} ({num_considered} hyperplanes, {num_excluded} excluded)')

	return LinearRegionReport(
		radius=radius,
		argmin=argmin,
		distances=distances,
		num_considered=num_considered,
		num_excluded=num_excluded,
		gradient=gradient,
		offset=offset,
		output=output,
		class_index=class_index,
		direction=direction,
		boundary=boundary,
	)


def point_toward_boundary(x: np.ndarray, report: LinearRegionReport, distance: float) -> np.ndarray:
	"""
	x moved `distance` along the direction to the nearest hyperplane
	"""
	if report.direction is None:
		raise ValueError('No hyperplane: the region is unbounded')
	return np.asarray(x, dtype=DTYPE) + distance * report.direction


def sample_ball(
		center: np.ndarray,
		radius: float,
		count: int,
		rng: np.random.Generator,
		) -> np.ndarray:
	"""
	Uniform samples in the L2 ball: normalized Gaussian directions, radii scaled by u^(1/D)
	"""
	center = np.asarray(center, dtype=DTYPE)
	dim = center.size
	directions = rng.standard_normal((count, dim))
	directions /= np.linalg.norm(directions, axis=1, keepdims=True)
	radii = radius * rng.uniform(0.0, 1.0, size=count) ** (1.0 / dim)
	return center[None, ...] + (directions * radii[:, None]).reshape(count, *center.shape)


@dataclass(frozen=True)
class RegionVerification:
	passed: bool
	max_deviation: float
	sample_radius: float
	num_samples: int
	pattern_mismatches: int
	reason: str = ''


def verify_linear_region(
		target: FrozenNetwork | Network,
		x: np.ndarray,
		report: LinearRegionReport,
		samples: int = 64,
		shrink: float = 0.01,
		*,
		seed: int = 0,
		) -> RegionVerification:
	"""
	Sample the ball of radius (1 - shrink) * radius around x and check that (a) every sample keeps the live
	activation pattern of x, and (b) the output matches the affine form g.x + beta to relative 1e-6
	"""

	if not 0.0 < shrink < 1.0:
		raise ValueError(f'shrink must be in (0, 1), got {shrink}')
	if samples < 1:
		raise ValueError(f'samples must be >= 1, got {samples}')

	if report.radius == 0.0:
		return RegionVerification(
			passed=False, max_deviation=np.nan, sample_radius=0.0, num_samples=0, pattern_mismatches=0,
			reason=f'vacuous: radius is 0, x lies on the hyperplane of neuron {report.argmin}')

	net, intercept, live, _ = _unpack(target, report.class_index)
	x = np.asarray(x, dtype=DTYPE)

	radius = UNBOUNDED_SAMPLE_RADIUS if np.isinf(report.radius) else (1.0 - shrink) * report.radius
	points = sample_ball(x, radius, samples, np.random.default_rng(seed))

	reference = forward_batch(net, x[None, ...], intercept).patterns()[0, live]
	trace = forward_batch(net, points, intercept)

	mismatches = int(np.sum(np.any(trace.patterns()[:, live] != reference, axis=1)))

	outputs = trace.outputs(report.class_index)
	predicted = points.reshape(samples, -1) @ report.gradient.ravel() + report.offset
	deviation = np.abs(outputs - predicted) / np.maximum(1.0, np.abs(outputs))
	max_deviation = float(deviation.max())

	passed = mismatches == 0 and max_deviation <= LINEARITY_RTOL
	reason = ''
	if mismatches:
		reason = f'{mismatches} of {samples} samples changed the activation pattern'
	elif not passed:
		reason = f'max relative deviation {max_deviation:.3g} exceeds {LINEARITY_RTOL}'

	return RegionVerification(
		passed=passed,
		max_deviation=max_deviation,
		sample_radius=radius,
		num_samples=samples,
		pattern_mismatches=mismatches,
		reason=reason,
	)
