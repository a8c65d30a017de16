#!/usr/bin/env python3

"""
Datasets: IDX ingestion, synthetic generators, train/test splits and pixel replacement
"""

from dataclasses import dataclass, replace
from enum import Enum, unique
import logging
from os import PathLike
from pathlib import Path
import struct
from typing import Final

import numpy as np

from pathways.types import PixelRanking


logger = logging.getLogger(__name__)


IDX_MAGIC_LABELS: Final = 0x00000801
IDX_MAGIC_IMAGES: Final = 0x00000803
IDX_MAGIC_MULTICHANNEL: Final = 0x00000804

IDX_NDIM: Final = {
	IDX_MAGIC_LABELS: 1,
	IDX_MAGIC_IMAGES: 3,
	IDX_MAGIC_MULTICHANNEL: 4,
}

SYNTHETIC_KINDS: Final = ('moons', 'xor', 'informative')

DEFAULT_INFORMATIVE_SHAPE: Final = (1, 4, 4)
DEFAULT_INFORMATIVE_PIXELS: Final = 2


class IdxFormatError(ValueError):
	pass


@unique
class FillRule(Enum):
	mean = 'mean'
	zero = 'zero'


@dataclass(frozen=True, eq=False)
class Dataset:
	inputs: np.ndarray  # (n, C, H, W) or (n, D)
	labels: np.ndarray  # (n,) int
	channel_means: np.ndarray  # (C,); (1,) for flat inputs
	name: str
	split: str = 'all'
	num_classes: int = 2
	# Ground-truth informative pixel sites (flat h*W + w), if known
	informative_pixels: np.ndarray | None = None

	def __post_init__(self):
		if len(self.inputs) != len(self.labels):
			raise ValueError(f'{len(self.inputs)} inputs but {len(self.labels)} labels')
		if self.inputs.ndim not in (2, 4):
			raise ValueError(f'Inputs must be (n, D) or (n, C, H, W), got shape {self.inputs.shape}')
		if len(self.labels) and not (0 <= self.labels.min() and self.labels.max() < self.num_classes):
			raise ValueError(f'Labels out of range for {self.num_classes} classes')

	def __len__(self) -> int:
		return len(self.labels)

	@property
	def input_shape(self) -> tuple[int, ...]:
		return tuple(self.inputs.shape[1:])

	@property
	def is_image(self) -> bool:
		return self.inputs.ndim == 4

	@property
	def num_pixels(self) -> int:
		return num_pixel_sites(self.input_shape)

	def subset(self, indices: np.ndarray, split: str | None = None) -> 'Dataset':
		return replace(
			self,
			inputs=self.inputs[indices],
			labels=self.labels[indices],
			split=self.split if split is None else split)

	def with_inputs(self, inputs: np.ndarray) -> 'Dataset':
		"""
		Same labels and channel means, replaced inputs (e.g. after pixel removal)
		"""
		return replace(self, inputs=np.asarray(inputs, dtype=np.float64))

	def fill_value(self, rule: FillRule) -> np.ndarray:
		if rule is FillRule.mean:
			return self.channel_means
		return np.zeros_like(self.channel_means)


def channel_means(inputs: np.ndarray) -> np.ndarray:
	if inputs.ndim == 4:
		return inputs.mean(axis=(0, 2, 3))
	return np.array([inputs.mean()])


def num_pixel_sites(input_shape: tuple[int, ...]) -> int:
	"""
	A pixel site is one (h, w) location across all channels; every element of a flat input is its own site
	"""
	if len(input_shape) == 3:
		return input_shape[1] * input_shape[2]
	return int(np.prod(input_shape))


def _sites_view(x: np.ndarray) -> np.ndarray:
	"""
	:returns: (C, sites) view
	"""
	if x.ndim == 3:
		return x.reshape(x.shape[0], -1)
	return x.reshape(1, -1)


# IDX


def read_idx(path: Path | PathLike | str) -> np.ndarray:
	"""
	Raw unsigned-byte IDX payload with its header dims
	"""
	path = Path(path)
	data = path.read_bytes()

	if len(data) < 4:
		raise IdxFormatError(f'{path}: file too short for an IDX header ({len(data)} bytes)')

	magic, = struct.unpack('>I', data[:4])
	if magic not in IDX_NDIM:
		raise IdxFormatError(f'{path}: invalid IDX magic 0x{magic:08x}')

	ndim = IDX_NDIM[magic]
	header_len = 4 + 4 * ndim
	if len(data) < header_len:
		raise IdxFormatError(f'{path}: truncated header, expected {header_len} bytes, got {len(data)}')

	dims = struct.unpack(f'>{ndim}I', data[4:header_len])
	expected = int(np.prod(dims))
	payload = data[header_len:]

	if len(payload) < expected:
		raise IdxFormatError(f'{path}: truncated payload, dims {dims} need {expected} bytes, got {len(payload)}')
	if len(payload) > expected:
		raise IdxFormatError(f'{path}: {len(payload) - expected} unexpected trailing bytes after payload of dims {dims}')

	logger.debug(f'{path}: magic 0x{magic:08x}, dims {dims}')
	return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(
		images_path: Path | PathLike | str,
		labels_path: Path | PathLike | str | None = None,
		*,
		name: str | None = None,
		num_classes: int | None = None,
		) -> Dataset:
	"""
	Load an IDX image file (and optional label file) with values scaled to [0, 1]

	Single-channel image files (0x803) gain a channel axis: (n, 1, H, W). Without a label file all labels are 0.
	"""

	raw = read_idx(images_path)
	if raw.ndim == 1:
		raise IdxFormatError(f'{images_path}: expected an image file, got a label file')

	inputs = raw.astype(np.float64) / 255.0
	if inputs.ndim == 3:
		inputs = inputs[:, None, :, :]

	if labels_path is None:
		labels = np.zeros(len(inputs), dtype=np.int64)
	else:
		label_raw = read_idx(labels_path)
		if label_raw.ndim != 1:
			raise IdxFormatError(f'{labels_path}: expected a label file (magic 0x{IDX_MAGIC_LABELS:08x})')
		if len(label_raw) != len(inputs):
			raise IdxFormatError(f'Label/image count mismatch: {len(label_raw)} labels, {len(inputs)} images')
		labels = label_raw.astype(np.int64)

	if num_classes is None:
		num_classes = max(2, int(labels.max()) + 1) if len(labels) else 2

	dataset = Dataset(
		inputs=inputs,
		labels=labels,
		channel_means=channel_means(inputs),
		name=name or Path(images_path).stem,
		num_classes=num_classes,
	)
	logger.info(f'Loaded {dataset.name}: {len(dataset)} images of shape {dataset.input_shape}, {num_classes} classes')
	return dataset


def write_idx(
		dataset: Dataset,
		images_path: Path | PathLike | str,
		labels_path: Path | PathLike | str | None = None,
		) -> None:
	"""
	Quantize to bytes (round(255 x), clipped) and write in the IDX container

	Single-channel images are written as 0x803, multi-channel as 0x804
	"""

	if not dataset.is_image:
		raise ValueError(f'Only image datasets can be written as IDX, got input shape {dataset.input_shape}')

	pixels = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
	if pixels.shape[1] == 1:
		magic, pixels = IDX_MAGIC_IMAGES, pixels[:, 0]
	else:
		magic = IDX_MAGIC_MULTICHANNEL

	header = struct.pack(f'>I{pixels.ndim}I', magic, *pixels.shape)
	Path(images_path).write_bytes(header + pixels.tobytes())

	if labels_path is not None:
		if dataset.num_classes > 256:
			raise ValueError(f'Cannot store {dataset.num_classes} classes in unsigned-byte labels')
		labels = dataset.labels.astype(np.uint8)
		Path(labels_path).write_bytes(struct.pack('>II', IDX_MAGIC_LABELS, len(labels)) + labels.tobytes())

	logger.info(f'Wrote {len(dataset)} images to {images_path}')


# Synthetic


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
	labels = np.zeros(n, dtype=np.int64)
	labels[n // 2:] = 1
	return rng.permutation(labels)


def _moons(labels: np.ndarray, rng: np.random.Generator, noise: float = 0.1) -> np.ndarray:
	angle = rng.uniform(0.0, np.pi, size=len(labels))
	upper = np.stack([np.cos(angle), np.sin(angle)], axis=1)
	lower = np.stack([1.0 - np.cos(angle), 0.5 - np.sin(angle)], axis=1)
	points = np.where(labels[:, None] == 0, upper, lower)
	return points + rng.normal(0.0, noise, size=points.shape)


def _xor(labels: np.ndarray, rng: np.random.Generator, noise: float = 0.15) -> np.ndarray:
	# Class 0 clusters at (1, 1) and (-1, -1), class 1 at (1, -1) and (-1, 1)
	first = rng.choice([-1.0, 1.0], size=len(labels))
	second = np.where(labels == 0, first, -first)
	points = np.stack([first, second], axis=1)
	return points + rng.normal(0.0, noise, size=points.shape)


def _informative(
		labels: np.ndarray,
		rng: np.random.Generator,
		shape: tuple[int, int, int],
		num_informative: int,
		) -> tuple[np.ndarray, np.ndarray]:

	c, h, w = shape
	if not 1 <= num_informative <= h * w:
		raise ValueError(f'num_informative={num_informative} must be in [1, {h * w}]')

	sites = np.sort(rng.choice(h * w, size=num_informative, replace=False))

	inputs = rng.uniform(0.0, 1.0, size=(len(labels), c, h * w))
	high = rng.uniform(0.6, 1.0, size=(len(labels), c, num_informative))
	low = rng.uniform(0.0, 0.4, size=(len(labels), c, num_informative))
	inputs[:, :, sites] = np.where(labels[:, None, None] == 1, high, low)

	return inputs.reshape(len(labels), c, h, w), sites


def gen_synthetic(
		kind: str,
		n: int,
		seed: int,
		*,
		shape: tuple[int, int, int] = DEFAULT_INFORMATIVE_SHAPE,
		num_informative: int = DEFAULT_INFORMATIVE_PIXELS,
		) -> Dataset:
	"""
	Deterministic 2-class synthetic datasets, balanced to within one sample

	- moons: two interleaved half-circles in 2-D
	- xor: four noisy clusters in 2-D, label = XOR of the coordinate signs
	- informative: images where only `num_informative` pixel sites depend on the label; all other pixels are
	  independent uniform noise
	"""

	if n <= 0:
		raise ValueError(f'n must be positive, got {n=}')

	rng = np.random.default_rng(seed)
	labels = _balanced_labels(n, rng)
	informative_pixels = None

	match kind:
		case 'moons':
			inputs = _moons(labels, rng)
		case 'xor':
			inputs = _xor(labels, rng)
		case 'informative':
			inputs, informative_pixels = _informative(labels, rng, tuple(shape), num_informative)
		case _:
			raise ValueError(f'Unknown synthetic dataset kind {kind!r}, expected one of {SYNTHETIC_KINDS}')

	logger.debug(f'Generated {kind} dataset: {n} samples, input shape {inputs.shape[1:]}, {seed=}')

	return Dataset(
		inputs=inputs,
		labels=labels,
		channel_means=channel_means(inputs),
		name=kind,
		informative_pixels=informative_pixels,
	)


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
	"""
	Random train/test split; both halves carry the channel means of the train half only
	"""

	if not 0.0 < test_fraction < 1.0:
		raise ValueError(f'test_fraction must be in (0, 1), got {test_fraction}')

	n_test = int(round(len(dataset) * test_fraction))
	if n_test < 1 or n_test >= len(dataset):
		raise ValueError(f'Cannot split {len(dataset)} samples with {test_fraction=}')

	order = np.random.default_rng(seed).permutation(len(dataset))
	train = dataset.subset(np.sort(order[n_test:]), split='train')
	test = dataset.subset(np.sort(order[:n_test]), split='test')

	means = channel_means(train.inputs)
	return replace(train, channel_means=means), replace(test, channel_means=means)


# Perturbation


def check_ranking(ranking: np.ndarray, num_sites: int) -> PixelRanking:
	ranking = np.asarray(ranking)
	if ranking.shape != (num_sites,):
		raise ValueError(f'Ranking has length {ranking.size}, input has {num_sites} pixel sites')
	if not np.array_equal(np.sort(ranking), np.arange(num_sites)):
		raise ValueError('Ranking is not a permutation of the pixel sites')
	return PixelRanking(ranking)


def num_removed(fraction: float, num_sites: int) -> int:
	if not 0.0 <= fraction <= 1.0:
		raise ValueError(f'Fraction must be in [0, 1], got {fraction}')
	# The epsilon keeps decimal fractions such as 0.3 * 10 from rounding down
	return int(np.floor(fraction * num_sites + 1e-9))


def perturb_pixels(
		x: np.ndarray,
		ranking: np.ndarray,
		fraction: float,
		fill: float | np.ndarray,
		) -> np.ndarray:
	"""
	Replace the first floor(fraction * sites) pixel sites of `ranking`, across all channels, with `fill`

	:param x: (C, H, W) image or flat (D,) input
	:param fill: scalar, per-channel (C,), or an array shaped like x
	"""

	x = np.asarray(x, dtype=np.float64)
	sites = num_pixel_sites(x.shape)
	ranking = check_ranking(ranking, sites)
	count = num_removed(fraction, sites)

	out = x.copy()
	if count == 0:
		return out

	removed = ranking[:count]
	out_sites = _sites_view(out)
	fill = np.asarray(fill, dtype=np.float64)

	if fill.shape == x.shape and fill.ndim > 0 and fill.size > 1:
		out_sites[:, removed] = _sites_view(fill)[:, removed]
	elif fill.ndim == 0:
		out_sites[:, removed] = fill
	elif fill.shape == (out_sites.shape[0],):
		out_sites[:, removed] = fill[:, None]
	else:
		raise ValueError(f'Fill of shape {fill.shape} does not match input of shape {x.shape}')

	return out
