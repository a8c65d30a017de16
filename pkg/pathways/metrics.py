#!/usr/bin/env python3

"""
Map similarity and curve metrics
"""

import logging
from typing import Final
import warnings

import numpy as np
from scipy import ndimage, stats
from skimage.metrics import structural_similarity


logger = logging.getLogger(__name__)


SSIM_SIGMA: Final = 1.5
SSIM_TRUNCATE: Final = 3.5
SSIM_WINDOW: Final = 11
SSIM_K1: Final = 0.01
SSIM_K2: Final = 0.03
# Maps normalized to [-1, 1]
SSIM_DATA_RANGE: Final = 2.0


def _as_image(arr: np.ndarray) -> np.ndarray:
	arr = np.asarray(arr, dtype=np.float64)
	if arr.ndim == 1:
		return arr[None, :]
	if arr.ndim == 3:
		return arr.mean(axis=0)
	return arr


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
	if np.shape(a) != np.shape(b):
		raise ValueError(f'Map shapes differ: {np.shape(a)} vs {np.shape(b)}')
	if np.size(a) == 0:
		raise ValueError(f'Empty maps of shape {np.shape(a)}')


def _ssim_whole_map(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
	"""
	Same Gaussian-weighted SSIM formula, for maps smaller than the window; averaged over the whole map with no border crop
	"""
	def blur(arr):
		return ndimage.gaussian_filter(arr, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode='reflect')

	c1 = (SSIM_K1 * data_range) ** 2
	c2 = (SSIM_K2 * data_range) ** 2

	ua, ub = blur(a), blur(b)
	va = blur(a * a) - ua * ua
	vb = blur(b * b) - ub * ub
	cov = blur(a * b) - ua * ub

	s = ((2 * ua * ub + c1) * (2 * cov + c2)) / ((ua ** 2 + ub ** 2 + c1) * (va + vb + c2))
	return float(s.mean())


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = SSIM_DATA_RANGE) -> float:
	"""
	Gaussian-window SSIM (sigma 1.5, 11x11, K1=0.01, K2=0.03)

	Multi-channel maps are averaged over channels; vectors are compared as 1 x D images
	"""
	_check_pair(a, b)
	a, b = _as_image(a), _as_image(b)

	if np.array_equal(a, b):
		return 1.0

	if min(a.shape) >= SSIM_WINDOW:
		return float(structural_similarity(
			a, b,
			data_range=data_range,
			gaussian_weights=True,
			sigma=SSIM_SIGMA,
			use_sample_covariance=False,
			K1=SSIM_K1,
			K2=SSIM_K2,
		))

	return _ssim_whole_map(a, b, data_range)


def spearman(a: np.ndarray, b: np.ndarray) -> float:
	"""
	Rank correlation with average ranks for ties; nan if either map is constant
	"""
	_check_pair(a, b)
	a = np.asarray(a, dtype=np.float64).ravel()
	b = np.asarray(b, dtype=np.float64).ravel()

	if np.all(a == a[0]) or np.all(b == b[0]):
		logger.debug('Spearman correlation undefined for a constant map')
		return np.nan

	if np.array_equal(a, b):
		return 1.0

	with warnings.catch_warnings():
		warnings.simplefilter('ignore', stats.ConstantInputWarning)
		return float(stats.spearmanr(a, b).statistic)


def auc(fractions: np.ndarray, values: np.ndarray) -> float:
	"""
	Trapezoid area with the fraction axis rescaled to [0, 1]
	"""
	fractions = np.asarray(fractions, dtype=np.float64)
	values = np.asarray(values, dtype=np.float64)
	if fractions.shape != values.shape or len(fractions) < 2:
		raise ValueError(f'Need matching curves of >= 2 points, got {fractions.shape} and {values.shape}')

	span = fractions[-1] - fractions[0]
	if span <= 0:
		raise ValueError('Fractions must be increasing')
	return float(np.trapezoid(values, x=(fractions - fractions[0]) / span))
