#!/usr/bin/env python3

"""
Image helpers for attribution maps
"""

import logging
from os import PathLike
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.transform import resize


logger = logging.getLogger(__name__)


def upscale(arr: np.ndarray, scale: int | tuple[int, int]) -> np.ndarray:
	"""
	Nearest-neighbour upscaling
	"""
	if isinstance(scale, int):
		scale = (scale, scale)
	return arr.repeat(scale[0], 0).repeat(scale[1], 1)


def upsample_bilinear(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
	assert arr.ndim == 2, f'{arr.shape=}'
	if arr.shape == tuple(shape):
		return arr.astype(np.float64, copy=True)
	return resize(arr, shape, order=1, mode='edge', anti_aliasing=False, preserve_range=True)


def grey_opening(arr: np.ndarray, size: int) -> np.ndarray:
	"""
	Erosion then dilation with a flat square structuring element
	"""
	if any(size > n for n in arr.shape):
		raise ValueError(f'Structuring element {size} larger than map of shape {arr.shape}')
	return ndimage.grey_opening(arr, size=(size,) * arr.ndim, mode='reflect')


def edge_magnitude(arr: np.ndarray) -> np.ndarray:
	"""
	Sobel gradient magnitude of a 2-D array
	"""
	assert arr.ndim == 2, f'{arr.shape=}'
	return np.hypot(ndimage.sobel(arr, axis=0, mode='reflect'), ndimage.sobel(arr, axis=1, mode='reflect'))


def to_grey(arr: np.ndarray) -> np.ndarray:
	"""
	Linear grey ramp: 0 -> black, max -> white
	"""
	peak = np.max(arr) if arr.size else 0.0
	if peak <= 0:
		return np.zeros(arr.shape, dtype=np.uint8)
	return np.clip(np.rint(255.0 * arr / peak), 0, 255).astype(np.uint8)


def save_pgm(arr: np.ndarray, path: Path | PathLike | str, scale: int = 1) -> None:
	"""
	Save an 8-bit single-channel array as binary PGM
	"""
	if arr.ndim == 1:
		arr = arr[None, :]
	assert arr.ndim == 2 and arr.dtype == np.uint8, f'{arr.shape=}, {arr.dtype=}'
	if scale > 1:
		arr = upscale(arr, scale)
	Image.fromarray(np.ascontiguousarray(arr)).save(path, format='PPM')
	logger.debug(f'Saved {arr.shape[1]}x{arr.shape[0]} heatmap to {path}')
