#!/usr/bin/env python3

import numpy as np
import pytest

from pathways.metrics import auc, spearman, ssim


@pytest.mark.parametrize('shape', [(8, 8), (16, 16), (2, 16, 16), (30,)])
def test_ssim_identical_maps(rng, shape):
	a = rng.uniform(-1, 1, size=shape)
	assert ssim(a, a) == 1.0


@pytest.mark.parametrize('size', [8, 16])
def test_ssim_constant_offset(size):
	# Both maps flat: only the luminance term remains, C1 / (mu_b^2 + C1)
	a = np.zeros((size, size))
	b = np.full((size, size), 0.1)
	c1 = (0.01 * 2.0) ** 2
	assert ssim(a, b) == pytest.approx(c1 / (0.01 + c1), rel=1e-6)


@pytest.mark.parametrize('size', [8, 16])
def test_ssim_orders_similarity(rng, size):
	a = rng.uniform(-1, 1, size=(size, size))
	near = a + rng.normal(0, 0.05, size=a.shape)
	far = rng.uniform(-1, 1, size=a.shape)
	assert ssim(a, near) > ssim(a, far)
	assert ssim(a, near) == pytest.approx(ssim(near, a))


def test_ssim_shape_mismatch():
	with pytest.raises(ValueError, match='shapes differ'):
		ssim(np.zeros((4, 4)), np.zeros((4, 5)))


def test_spearman():
	a = np.array([0.1, 0.5, 0.2, 0.9])
	assert spearman(a, a) == 1.0
	assert spearman(a, -a) == pytest.approx(-1.0)
	assert spearman(a, a ** 3 + 4) == pytest.approx(1.0)
	# Average ranks for ties
	assert spearman(np.array([1.0, 1.0, 2.0]), np.array([1.0, 2.0, 3.0])) == pytest.approx(np.sqrt(3) / 2)


def test_spearman_constant_map_is_undefined():
	assert np.isnan(spearman(np.ones(5), np.arange(5.0)))
	assert np.isnan(spearman(np.zeros((2, 2)), np.zeros((2, 2))))


@pytest.mark.parametrize('metric', [spearman, ssim])
def test_empty_maps_rejected(metric):
	with pytest.raises(ValueError, match='Empty maps'):
		metric(np.zeros(0), np.zeros(0))


def test_auc():
	assert auc([0.0, 0.5, 1.0], [1.0, 1.0, 1.0]) == pytest.approx(1.0)
	assert auc([0.0, 1.0], [0.0, 1.0]) == pytest.approx(0.5)
	# Fraction axis rescaled to [0, 1]
	assert auc([0.0, 10.0, 20.0], [0.0, 2.0, 0.0]) == pytest.approx(1.0)


@pytest.mark.parametrize('fractions, values, match', [
	([0.0], [1.0], '>= 2 points'),
	([0.0, 1.0], [1.0], '>= 2 points'),
	([1.0, 1.0], [0.0, 1.0], 'increasing'),
])
def test_auc_checks(fractions, values, match):
	with pytest.raises(ValueError, match=match):
		auc(fractions, values)
