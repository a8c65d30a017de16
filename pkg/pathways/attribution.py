#!/usr/bin/env python3

"""
Input attribution maps: pathway gradient and baseline methods, post-processing and export
"""

from dataclasses import dataclass, replace
import logging
from os import PathLike
from pathlib import Path
from typing import Final

import numpy as np
import pandas as pd

from pathways import graphics_utils
from pathways.contrib import DEFAULT_INTGRAD_STEPS, ContributionMap, contributions, intgrad_alphas
from pathways.network import (
	DTYPE, Network, ReluRule,
	backward, forward_batch, forward_record, input_gradient, logit_seed, reverse,
)
from pathways.pathway import PathwayMask, build_frozen, select_pathway
from pathways.types import PixelRanking


logger = logging.getLogger(__name__)


BASELINE_METHODS: Final = ('gradient', 'input_x_grad', 'input_intgrad', 'guided_backprop', 'gradcam')
PATHWAY_METHODS: Final = ('neuron_mct', 'neuron_intgrad')
REDUCTIONS: Final = ('abs', 'signed')

DEFAULT_OPENING_KERNEL: Final = 3


@dataclass(frozen=True, eq=False)
class AttributionMap:
	raw: np.ndarray  # input-shaped, signed
	method: str
	class_index: int
	pathway: PathwayMask | None = None
	normalized: bool = False
	smoothed: bool = False
	# Set when the map's preconditions did not hold (e.g. zero pathway threshold)
	warning: str | None = None

	@property
	def reduced(self) -> np.ndarray:
		"""
		Per pixel site magnitude: sum over channels of |raw|
		"""
		if self.raw.ndim == 3:
			return np.abs(self.raw).sum(axis=0)
		return np.abs(self.raw)

	@property
	def signed_reduced(self) -> np.ndarray:
		if self.raw.ndim == 3:
			return self.raw.sum(axis=0)
		return self.raw.copy()

	def site_scores(self, reduction: str = 'abs') -> np.ndarray:
		if reduction not in REDUCTIONS:
			raise ValueError(f'Unknown reduction {reduction!r}, expected one of {REDUCTIONS}')
		scores = self.reduced if reduction == 'abs' else self.signed_reduced
		return scores.ravel()

	def ranking(self, *, reduction: str = 'abs', descending: bool = False) -> PixelRanking:
		"""
		Pixel sites ordered least relevant first (or most relevant first if descending); ties by site index
		"""
		scores = self.site_scores(reduction)
		return PixelRanking(np.argsort(-scores if descending else scores, kind='stable'))


def _map(raw: np.ndarray, method: str, class_index: int, **kwargs) -> AttributionMap:
	return AttributionMap(raw=np.asarray(raw, dtype=DTYPE), method=method, class_index=class_index, **kwargs)


# Pathway gradient


def pathway_gradient(
		net: Network,
		x: np.ndarray,
		class_index: int,
		method: str = 'neuron_intgrad',
		sparsity: float = 0.9,
		*,
		steps: int = DEFAULT_INTGRAD_STEPS,
		contribution: ContributionMap | None = None,
		) -> AttributionMap:
	"""
	Input gradient of the frozen pathway network: neurons outside the top-(1 - kappa) contribution pathway are held at
	their recorded activations
	"""

	if method not in PATHWAY_METHODS:
		raise ValueError(f'Unknown pathway method {method!r}, expected one of {PATHWAY_METHODS}')

	if contribution is None:
		contribution = contributions(net, x, class_index, method, steps=steps)

	mask = select_pathway(contribution, sparsity)
	record = forward_record(net, x, class_index=class_index)
	grad = build_frozen(net, record, mask).input_gradient(x)

	warning = None
	if mask.degenerate:
		warning = f'pathway threshold is 0 at sparsity {sparsity}; the pathway is not guaranteed locally linear'

	return _map(grad, f'pathway_gradient:{method}', class_index, pathway=mask, warning=warning)


# Baselines


def gradient(net: Network, x: np.ndarray, class_index: int) -> AttributionMap:
	return _map(input_gradient(net, x, class_index=class_index), 'gradient', class_index)


def input_x_grad(net: Network, x: np.ndarray, class_index: int) -> AttributionMap:
	x = np.asarray(x, dtype=DTYPE)
	return _map(x * input_gradient(net, x, class_index=class_index), 'input_x_grad', class_index)


def input_intgrad(net: Network, x: np.ndarray, class_index: int, steps: int = DEFAULT_INTGRAD_STEPS) -> AttributionMap:
	"""
	Integrated gradients on the input, zero baseline, midpoint rule
	"""
	x = np.asarray(x, dtype=DTYPE)
	alphas = intgrad_alphas(steps)
	xs = alphas.reshape(-1, *([1] * x.ndim)) * x[None, ...]
	trace = forward_batch(net, xs)
	grads = reverse(net, trace, logit_seed(net, class_index, steps)).input_grads
	return _map(x * grads.mean(axis=0), 'input_intgrad', class_index)


def guided_backprop(net: Network, x: np.ndarray, class_index: int) -> AttributionMap:
	grad = input_gradient(net, x, class_index=class_index, relu_rule=ReluRule.guided)
	return _map(grad, 'guided_backprop', class_index)


def default_gradcam_layer(net: Network) -> int:
	conv_layers = net.conv_hidden_layers()
	if not conv_layers:
		raise ValueError('GradCAM needs at least one conv layer; network is dense-only')
	return conv_layers[-1]


def gradcam(net: Network, x: np.ndarray, class_index: int, layer: int | None = None) -> AttributionMap:
	"""
	ReLU(sum_k w_k A_k) over the feature maps A_k of a conv hidden layer, w_k the spatial mean of dPhi/dA_k, bilinearly
	upsampled to the input size and repeated over input channels
	"""

	if layer is None:
		layer = default_gradcam_layer(net)
	elif layer not in net.conv_hidden_layers():
		raise ValueError(f'Hidden layer {layer} is not a conv layer (conv layers: {net.conv_hidden_layers()})')

	if len(net.input_shape) != 3:
		raise ValueError(f'GradCAM needs image inputs, got input shape {net.input_shape}')

	record = forward_record(net, x, class_index=class_index)
	grads = backward(net, record)

	shape = net.hidden_shapes[layer]
	feature_maps = record.activations[layer].reshape(shape)
	weights = grads.neuron_grads[layer].reshape(shape).mean(axis=(1, 2))

	cam = np.maximum(np.tensordot(weights, feature_maps, axes=1), 0.0)
	cam = np.maximum(graphics_utils.upsample_bilinear(cam, net.input_shape[1:]), 0.0)

	raw = np.broadcast_to(cam, net.input_shape).copy()
	return _map(raw, 'gradcam', class_index)


def baseline_attribution(
		net: Network,
		x: np.ndarray,
		class_index: int,
		method: str,
		*,
		steps: int = DEFAULT_INTGRAD_STEPS,
		layer: int | None = None,
		) -> AttributionMap:
	match method:
		case 'gradient':
			return gradient(net, x, class_index)
		case 'input_x_grad':
			return input_x_grad(net, x, class_index)
		case 'input_intgrad':
			return input_intgrad(net, x, class_index, steps)
		case 'guided_backprop':
			return guided_backprop(net, x, class_index)
		case 'gradcam':
			return gradcam(net, x, class_index, layer)
		case _:
			raise ValueError(f'Unknown attribution method {method!r}, expected one of {BASELINE_METHODS}')


# Post-processing


def smooth_opening(amap: AttributionMap, kernel: int = DEFAULT_OPENING_KERNEL) -> AttributionMap:
	"""
	Morphological opening of the reduced map; the result is spread evenly over channels so that its reduced map is the
	opened map
	"""
	if kernel < 1:
		raise ValueError(f'kernel must be >= 1, got {kernel}')

	opened = graphics_utils.grey_opening(amap.reduced, kernel)
	raw = opened if amap.raw.ndim != 3 else np.broadcast_to(opened / amap.raw.shape[0], amap.raw.shape).copy()
	return replace(amap, raw=raw, smoothed=True)


def normalize_map(amap: AttributionMap) -> AttributionMap:
	"""
	Divide by max |raw| into [-1, 1]; a zero map stays zero
	"""
	peak = np.max(np.abs(amap.raw)) if amap.raw.size else 0.0
	raw = amap.raw / peak if peak > 0 else amap.raw.copy()
	return replace(amap, raw=raw, normalized=True)


# Export


def map_to_frame(amap: AttributionMap) -> pd.DataFrame:
	raw = amap.raw
	if raw.ndim == 3:
		c, h, w = np.indices(raw.shape)
		return pd.DataFrame(dict(channel=c.ravel(), row=h.ravel(), col=w.ravel(), value=raw.ravel()))
	return pd.DataFrame(dict(index=np.arange(raw.size), value=raw.ravel()))


def save_map_csv(amap: AttributionMap, path: Path | PathLike | str) -> None:
	map_to_frame(amap).to_csv(path, index=False, float_format='%.17g')


def save_map_pgm(amap: AttributionMap, path: Path | PathLike | str, *, scale: int = 8) -> None:
	"""
	Reduced map as an 8-bit grey heatmap, scaled so the largest magnitude is white
	"""
	graphics_utils.save_pgm(graphics_utils.to_grey(amap.reduced), path, scale=scale)
