#!/usr/bin/env python3

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
import pytest

from pathways.contrib import ContributionMap, ContributionMethod, neuron_intgrad
from pathways.network import Dense, Network, forward_record
from pathways.pathway import (
	PathwayMask, PathwayMethod,
	active_subnet, build_frozen, dead_fraction, jaccard, keep_count, manual_mask, masked_record, select_pathway,
)

from conftest import random_conv, random_mlp


def _cmap(values, layer_sizes=None) -> ContributionMap:
	values = np.asarray(values, dtype=float)
	return ContributionMap(
		values=np.abs(values),
		signed=values,
		method=ContributionMethod.neuron_mct,
		class_index=0,
		layer_sizes=layer_sizes or (len(values),),
		digest='d' * 64,
	)


def _mask(bits, layer_sizes=None) -> PathwayMask:
	bits = np.asarray(bits, dtype=bool)
	return PathwayMask(e=bits, layer_sizes=layer_sizes or (len(bits),), method=PathwayMethod.manual, sparsity=0.0)


@pytest.mark.parametrize('n, sparsity, expected', [
	(3, 0.5, 2),
	(3, 0.0, 3),
	(10, 0.9, 1),
	(10, 0.95, 1),
	(1000, 0.99, 10),
	(7, 0.99, 1),
])
def test_keep_count(n, sparsity, expected):
	assert keep_count(n, sparsity) == expected


@pytest.mark.parametrize('sparsity', [-0.1, 1.0, 1.5])
def test_keep_count_rejects_sparsity(sparsity):
	with pytest.raises(ValueError, match='Sparsity'):
		keep_count(10, sparsity)


def test_select_top_two():
	mask = select_pathway(_cmap([5.0, 3.0, 1.0]), 0.5)
	assert_array_equal(mask.e, [True, True, False])
	assert mask.threshold == 3.0
	assert not mask.degenerate
	assert mask.method is PathwayMethod.neuron_mct


def test_select_ties_go_to_lower_index():
	mask = select_pathway(_cmap([2.0, 2.0, 1.0]), 0.6)
	assert_array_equal(mask.e, [True, False, False])

	# Tie order follows (layer, unit)
	mask = select_pathway(_cmap([1.0, 4.0, 4.0, 4.0], (2, 2)), 0.5)
	assert_array_equal(mask.e, [False, True, True, False])


def test_select_zero_sparsity_keeps_everything():
	mask = select_pathway(_cmap([0.0, 3.0, 0.0]), 0.0)
	assert mask.e.all()
	assert mask.threshold == 0.0
	assert mask.degenerate


def test_select_degenerate_is_flagged(caplog):
	with caplog.at_level('WARNING'):
		mask = select_pathway(_cmap([0.0, 2.0, 0.0, 0.0]), 0.5)
	assert mask.degenerate
	assert mask.num_kept == 2
	assert 'threshold is 0' in caplog.text


def test_select_uses_magnitude():
	mask = select_pathway(_cmap([-5.0, 1.0, 2.0]), 0.6)
	assert_array_equal(mask.e, [True, False, False])


@pytest.mark.parametrize('seed', range(10))
def test_select_pathways_are_nested(seed):
	rng = np.random.default_rng(seed)
	# Small integer scores to force ties, including zeros
	c = _cmap(rng.integers(-4, 5, size=40).astype(float), (25, 15))
	sparsities = np.sort(np.concatenate([[0.0, 0.5, 0.99], rng.uniform(0.0, 0.99, size=12)]))

	masks = [select_pathway(c, s) for s in sparsities]
	for looser, tighter in zip(masks[:-1], masks[1:]):
		assert tighter.num_kept <= looser.num_kept
		assert not np.any(tighter.e & ~looser.e)


def test_active_subnet(mlp, rng):
	record = forward_record(mlp, rng.normal(size=5), class_index=0)
	mask = active_subnet(record)
	assert_array_equal(mask.e, record.flat_activations() > 0)
	assert mask.layer_sizes == mlp.layer_sizes
	assert mask.sparsity == pytest.approx(1.0 - mask.num_kept / mlp.num_neurons)
	assert mask.threshold is None


def test_frozen_network_reproduces_reference(mlp, rng):
	x = rng.normal(size=5)
	record = forward_record(mlp, x, class_index=1)
	for sparsity in (0.0, 0.5, 0.9):
		mask = select_pathway(neuron_intgrad(mlp, x, 1, 16), sparsity)
		frozen = build_frozen(mlp, record, mask)
		assert frozen.output(x) == record.output
		assert_array_equal(frozen.forward(x).flat_activations(), record.flat_activations())


def test_frozen_network_with_empty_pathway_is_constant(mlp, rng):
	x = rng.normal(size=5)
	record = forward_record(mlp, x, class_index=0)
	frozen = build_frozen(mlp, record, manual_mask(mlp, np.zeros(mlp.num_neurons, dtype=bool)))

	ys = rng.normal(size=(10, 5))
	assert_allclose(frozen.outputs(ys), record.output)
	assert_array_equal(frozen.input_gradient(ys[0]), 0.0)


@pytest.mark.parametrize('seed', range(8))
def test_frozen_gradient_matches_finite_differences(seed):
	rng = np.random.default_rng(seed)
	net = random_conv(rng)
	x = rng.normal(size=net.input_shape)
	record = forward_record(net, x, class_index=0)
	mask = select_pathway(neuron_intgrad(net, x, 0, 8), 0.7)
	frozen = build_frozen(net, record, mask)

	grad = frozen.input_gradient(x)
	eps = 1e-6
	for _ in range(5):
		d = rng.normal(size=x.shape)
		d /= np.linalg.norm(d)
		fd = (frozen.output(x + eps * d) - frozen.output(x - eps * d)) / (2 * eps)
		# Central differences are exact unless a live ReLU boundary lies within eps
		assert fd == pytest.approx(np.sum(grad * d), abs=1e-5)


def test_frozen_network_ignores_excluded_neurons():
	# u = ReLU(x) excluded and frozen at u(1) = 1, v = ReLU(2x) live; Phi = u + v
	net = Network((1,), (
		Dense([[1.0], [2.0]], [0.0, 0.0]),
		Dense([[1.0, 1.0]], [0.0], relu=False),
	))
	record = forward_record(net, np.array([1.0]), class_index=0)
	frozen = build_frozen(net, record, manual_mask(net, [False, True]))

	assert frozen.output(np.array([3.0])) == pytest.approx(1.0 + 6.0)
	assert frozen.input_gradient(np.array([3.0]))[0] == pytest.approx(2.0)
	# v's own ReLU still applies
	assert frozen.output(np.array([-1.0])) == pytest.approx(1.0)


def test_build_frozen_checks(mlp, rng):
	x = rng.normal(size=5)
	record = forward_record(mlp, x, class_index=0)
	other = random_mlp(np.random.default_rng(99), (5, 7, 6))

	with pytest.raises(ValueError, match='different network'):
		build_frozen(other, record, active_subnet(record))

	with pytest.raises(ValueError, match='layer sizes'):
		build_frozen(mlp, record, _mask(np.ones(13, dtype=bool), (6, 7)))

	masked = masked_record(mlp, x, active_subnet(record), 0)
	with pytest.raises(ValueError, match='unmodified'):
		build_frozen(mlp, masked, active_subnet(record))


def test_masked_record_zeroes_excluded(hand_net):
	mask = manual_mask(hand_net, [False, True, True, True])
	record = masked_record(hand_net, np.array([1.0]), mask, 0)
	assert record.transmitted[0][0] == 0.0
	# p revives once u is removed: p = ReLU(1) = 1, q = ReLU(2) = 2
	assert_allclose(record.activations[1], [1.0, 2.0])
	assert record.output == pytest.approx(3.0)


def test_dead_fraction_examples():
	original = forward_record(Network((1,), (
		Dense([[1.0], [-1.0], [1.0], [-1.0]], [0.0, 0.0, 0.0, 0.0]),
		Dense([[1.0, 1.0, 1.0, 1.0]], [0.0], relu=False),
	)), np.array([1.0]), class_index=0)
	# pattern: active, dead, active, dead

	assert dead_fraction(_mask([1, 1, 1, 1]), original).originally_dead == 0.5
	assert dead_fraction(_mask([1, 0, 1, 0]), original).originally_dead == 0.0
	assert dead_fraction(_mask([0, 1, 0, 1]), original).originally_dead == 1.0

	with pytest.raises(ValueError, match='Empty pathway'):
		dead_fraction(_mask([0, 0, 0, 0]), original)


def test_dead_fraction_now_active(hand_net):
	x = np.array([1.0])
	original = forward_record(hand_net, x, class_index=0)
	mask = manual_mask(hand_net, [False, True, True, True])
	stats = dead_fraction(mask, original, masked_record(hand_net, x, mask, 0))

	assert stats.originally_dead == pytest.approx(1 / 3)
	assert stats.now_active == pytest.approx(1 / 3)
	assert stats.num_kept == 3
	assert dead_fraction(mask, original).now_active is None


def test_jaccard_examples():
	a = _mask([1, 1, 0, 0], (2, 2))
	b = _mask([1, 0, 1, 0], (2, 2))
	assert jaccard(a, a) == 1.0
	assert jaccard(a, b) == pytest.approx(1 / 3)
	assert_allclose(jaccard(a, b, mode='layer'), [0.5, 0.0])

	empty = _mask([0, 0, 0, 0], (2, 2))
	assert jaccard(empty, empty) == 1.0
	assert jaccard(a, empty) == 0.0
	assert_allclose(jaccard(empty, empty, mode='layer'), [1.0, 1.0])


def test_jaccard_checks():
	with pytest.raises(ValueError, match='differ'):
		jaccard(_mask([1, 0]), _mask([1, 0, 0]))
	with pytest.raises(ValueError, match='Jaccard mode'):
		jaccard(_mask([1, 0]), _mask([1, 0]), mode='pairwise')


def test_mask_text_file(tmp_path):
	mask = select_pathway(_cmap([0.5, 3.0, 0.0, 1.25, 2.0], (2, 3)), 0.6)
	path = tmp_path / 'mask.txt'
	mask.save(path)
	loaded = PathwayMask.load(path)

	assert_array_equal(loaded.e, mask.e)
	assert loaded.layer_sizes == (2, 3)
	assert loaded.method is PathwayMethod.neuron_mct
	assert loaded.sparsity == 0.6
	assert loaded.threshold == mask.threshold == 2.0
	assert loaded.digest == 'd' * 64
	assert 'indices: 1 4' in path.read_text()


@pytest.mark.parametrize('text, match', [
	('hello\n', 'Not a pathway mask'),
	('pathway-mask 1\nmethod dgr\n', 'Malformed'),
	('pathway-mask 1\nmethod: dgr\n', 'missing field'),
	(
		'pathway-mask 1\nmodel: x\nmethod: dgr\nsparsity: 0.5\nthreshold: none\nlayer_sizes: 2\nindices: 0 2\n',
		'out of range',
	),
])
def test_mask_text_errors(text, match):
	with pytest.raises(ValueError, match=match):
		PathwayMask.from_text(text)


@pytest.mark.parametrize('name, expected', [
	('NeuronIntGrad', PathwayMethod.neuron_intgrad),
	('neuron-mct', PathwayMethod.neuron_mct),
	('greedy_pruning', PathwayMethod.greedy),
	('DGR', PathwayMethod.dgr),
	('active-subnet', PathwayMethod.active_subnet),
])
def test_method_names(name, expected):
	assert PathwayMethod.parse(name) is expected


def test_unknown_method_name():
	with pytest.raises(ValueError, match='Unknown pathway method'):
		PathwayMethod.parse('saliency')
