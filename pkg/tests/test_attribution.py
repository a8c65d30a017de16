#!/usr/bin/env python3

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
import pytest

from pathways.attribution import (
	AttributionMap,
	baseline_attribution, gradcam, gradient, guided_backprop, input_intgrad, input_x_grad, normalize_map,
	pathway_gradient, save_map_csv, save_map_pgm, smooth_opening,
)
from pathways.contrib import ContributionMap, ContributionMethod
from pathways.network import Conv2d, Dense, Flatten, Network, forward_record, input_gradient
from pathways.pathway import build_frozen


def _amap(raw) -> AttributionMap:
	return AttributionMap(raw=np.asarray(raw, dtype=float), method='test', class_index=0)


def test_zero_sparsity_pathway_is_plain_gradient(mlp, rng):
	x = rng.normal(size=5)
	amap = pathway_gradient(mlp, x, 1, 'neuron_intgrad', 0.0, steps=8)
	assert_array_equal(amap.raw, input_gradient(mlp, x, class_index=1))
	assert amap.pathway.e.all()
	assert amap.method == 'pathway_gradient:neuron_intgrad'


@pytest.mark.parametrize('method', ['neuron_mct', 'neuron_intgrad'])
def test_pathway_gradient_is_frozen_gradient(conv_net, rng, method):
	x = rng.normal(size=conv_net.input_shape)
	amap = pathway_gradient(conv_net, x, 0, method, 0.8, steps=8)
	record = forward_record(conv_net, x, class_index=0)
	assert_array_equal(amap.raw, build_frozen(conv_net, record, amap.pathway).input_gradient(x))
	assert amap.pathway.num_kept == max(1, int(np.floor(0.2 * conv_net.num_neurons + 0.5)))


def test_first_layer_excluded_gives_zero_map(mlp, rng):
	x = rng.normal(size=5)
	# Layer 0 (7 neurons) contributes nothing, layer 1 (6 neurons) everything
	values = np.concatenate([np.zeros(7), np.arange(1.0, 7.0)])
	c = ContributionMap(
		values=values, signed=values, method=ContributionMethod.neuron_mct, class_index=0,
		layer_sizes=mlp.layer_sizes, digest=mlp.digest)

	amap = pathway_gradient(mlp, x, 0, 'neuron_mct', 0.55, contribution=c)
	assert amap.pathway.num_kept == 6
	assert_array_equal(amap.raw, 0.0)


def test_degenerate_pathway_sets_warning(hand_net):
	# Only u, v and q contribute at x = 1
	amap = pathway_gradient(hand_net, np.array([1.0]), 0, 'neuron_mct', 0.0)
	assert amap.pathway.degenerate
	assert 'threshold is 0' in amap.warning

	amap = pathway_gradient(hand_net, np.array([1.0]), 0, 'neuron_mct', 0.5)
	assert amap.warning is None


def test_unknown_pathway_method(mlp):
	with pytest.raises(ValueError, match='Unknown pathway method'):
		pathway_gradient(mlp, np.zeros(5), 0, 'marginal')


def _positive_net() -> Network:
	return Network((3,), (
		Dense([[1.0, 0.5, 0.2], [0.3, 1.0, 0.1]], [0.1, 0.0]),
		Dense([[0.5, 2.0]], [0.0]),
		Dense([[1.5], [-1.0]], [0.0, 0.0], relu=False),
	))


def test_guided_equals_gradient_when_all_gradients_positive():
	net = _positive_net()
	x = np.array([0.5, 1.0, 2.0])
	assert_allclose(guided_backprop(net, x, 0).raw, gradient(net, x, 0).raw)
	# Negative head weight: guided backprop zeroes every negative signal
	assert_array_equal(guided_backprop(net, x, 1).raw, 0.0)


def test_input_baselines_on_affine_model():
	w = np.array([2.0, -1.0, 0.5])
	net = Network((3,), (Dense([w], [0.7], relu=False),))
	x = np.array([1.0, 3.0, -2.0])

	assert_allclose(gradient(net, x, 0).raw, w)
	assert_allclose(input_x_grad(net, x, 0).raw, w * x)
	amap = input_intgrad(net, x, 0, steps=5)
	assert_allclose(amap.raw, w * x)
	# Completeness against the zero baseline
	assert amap.raw.sum() == pytest.approx(float(w @ x))


def test_input_intgrad_completeness(conv_net, rng):
	x = rng.normal(size=conv_net.input_shape)
	amap = input_intgrad(conv_net, x, 0, steps=400)
	phi = forward_record(conv_net, x, class_index=0).output
	phi0 = forward_record(conv_net, np.zeros_like(x), class_index=0).output
	assert amap.raw.sum() == pytest.approx(phi - phi0, abs=0.02 * max(1.0, abs(phi - phi0)))


def _gradcam_net(stride: int = 1) -> Network:
	# A_0 = ReLU(x), A_1 = ReLU(-x); Phi = sum(A_0) + 0.5 * sum(A_1)
	size = (4 // stride) ** 2
	return Network((1, 4, 4), (
		Conv2d([[[[1.0]]], [[[-1.0]]]], [0.0, 0.0], stride=stride),
		Flatten(),
		Dense([np.concatenate([np.ones(size), 0.5 * np.ones(size)])], [0.0], relu=False),
	))


def test_gradcam_hand_weights(rng):
	x = rng.normal(size=(1, 4, 4))
	amap = gradcam(_gradcam_net(), x, 0)
	# Channel weights are the mean gradients 1 and 0.5
	expected = np.maximum(x[0], 0.0) + 0.5 * np.maximum(-x[0], 0.0)
	assert amap.raw.shape == (1, 4, 4)
	assert_allclose(amap.raw[0], expected)


def test_gradcam_upsamples_to_input():
	x = np.full((1, 4, 4), 0.75)
	amap = gradcam(_gradcam_net(stride=2), x, 0)
	assert amap.raw.shape == (1, 4, 4)
	assert_allclose(amap.raw, 0.75)


def test_gradcam_checks(mlp, conv_net):
	with pytest.raises(ValueError, match='dense-only'):
		gradcam(mlp, np.zeros(5), 0)
	with pytest.raises(ValueError, match='not a conv layer'):
		gradcam(conv_net, np.zeros(conv_net.input_shape), 0, layer=1)


@pytest.mark.parametrize('method', ['gradient', 'input_x_grad', 'input_intgrad', 'guided_backprop', 'gradcam'])
def test_baselines_are_input_shaped(conv_net, rng, method):
	x = rng.normal(size=conv_net.input_shape)
	amap = baseline_attribution(conv_net, x, 1, method, steps=4)
	assert amap.raw.shape == conv_net.input_shape
	assert amap.method == method
	assert amap.class_index == 1
	assert np.all(np.isfinite(amap.raw))


def test_unknown_baseline(mlp):
	with pytest.raises(ValueError, match='Unknown attribution method'):
		baseline_attribution(mlp, np.zeros(5), 0, 'lime')


def test_smoothing_identity_kernel(rng):
	amap = _amap(rng.uniform(size=(1, 6, 6)))
	assert_allclose(smooth_opening(amap, 1).raw, amap.raw)


def test_smoothing_removes_isolated_peak():
	raw = np.zeros((1, 6, 6))
	raw[0, 2, 3] = 5.0
	smoothed = smooth_opening(_amap(raw), 3)
	assert smoothed.smoothed
	assert_array_equal(smoothed.raw, 0.0)


def test_smoothing_is_idempotent(rng):
	amap = _amap(rng.normal(size=(3, 8, 8)))
	once = smooth_opening(amap, 3)
	twice = smooth_opening(once, 3)
	assert_allclose(twice.reduced, once.reduced)
	assert once.raw.shape == (3, 8, 8)
	assert np.all(once.reduced <= amap.reduced + 1e-12)


def test_smoothing_checks(rng):
	with pytest.raises(ValueError, match='kernel'):
		smooth_opening(_amap(np.zeros((1, 4, 4))), 0)
	with pytest.raises(ValueError, match='larger than map'):
		smooth_opening(_amap(np.zeros((1, 4, 4))), 5)


def test_normalize():
	assert_allclose(normalize_map(_amap([2.0, -4.0, 1.0])).raw, [0.5, -1.0, 0.25])
	zero = normalize_map(_amap([0.0, 0.0]))
	assert zero.normalized
	assert_array_equal(zero.raw, 0.0)


def test_ranking():
	amap = _amap([3.0, -1.0, 2.0, 1.0])
	assert_array_equal(amap.ranking(), [1, 3, 2, 0])
	assert_array_equal(amap.ranking(descending=True), [0, 2, 1, 3])
	assert_array_equal(amap.ranking(reduction='signed'), [1, 3, 2, 0])

	rgb = _amap(np.stack([np.eye(2), -np.eye(2), np.zeros((2, 2))]))
	assert_allclose(rgb.reduced, 2 * np.eye(2))
	assert_allclose(rgb.signed_reduced, 0.0)

	with pytest.raises(ValueError, match='reduction'):
		amap.ranking(reduction='max')


def test_map_files(tmp_path):
	amap = _amap(np.arange(8.0).reshape(2, 2, 2))
	save_map_csv(amap, tmp_path / 'map.csv')
	lines = (tmp_path / 'map.csv').read_text().splitlines()
	assert lines[0] == 'channel,row,col,value'
	assert len(lines) == 9

	save_map_pgm(amap, tmp_path / 'map.pgm', scale=2)
	data = (tmp_path / 'map.pgm').read_bytes()
	assert data.startswith(b'P5')
	assert b'4 4' in data[:20]
