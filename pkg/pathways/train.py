#!/usr/bin/env python3

"""
Desk-scale training: network construction from a layer spec, minibatch SGD, evaluation
"""

from dataclasses import dataclass
import logging
from os import PathLike
from pathlib import Path
from typing import Final, Sequence

import numpy as np
import pandas as pd

from pathways.data import Dataset
from pathways.network import DTYPE, AvgPool2d, Conv2d, Dense, Flatten, Layer, Network, forward_batch, reverse


logger = logging.getLogger(__name__)


OPTIMIZERS: Final = ('sgd', 'momentum')
LOSSES: Final = ('cross_entropy', 'mse')

EVAL_CHUNK: Final = 1024


# Network specs


@dataclass(frozen=True)
class DenseSpec:
	units: int


@dataclass(frozen=True)
class ConvSpec:
	channels: int
	kernel: int = 3
	stride: int = 1
	padding: int = 1


@dataclass(frozen=True)
class PoolSpec:
	size: int = 2


@dataclass(frozen=True)
class FlattenSpec:
	pass


LayerSpec = DenseSpec | ConvSpec | PoolSpec | FlattenSpec


@dataclass(frozen=True)
class NetSpec:
	"""
	Hidden layer stack; the affine head with `num_classes` outputs is appended automatically
	"""
	input_shape: tuple[int, ...]
	hidden: tuple[LayerSpec, ...]
	num_classes: int


def mlp_spec(input_dim: int, hidden_sizes: Sequence[int], num_classes: int = 2) -> NetSpec:
	return NetSpec((input_dim,), tuple(DenseSpec(n) for n in hidden_sizes), num_classes)


def small_conv_spec(
		input_shape: tuple[int, int, int],
		channels: Sequence[int] = (4,),
		dense: Sequence[int] = (8,),
		num_classes: int = 2,
		*,
		pool: int | None = None,
		) -> NetSpec:
	"""
	3x3 same-padded conv layers, optional average pool, flatten, dense layers
	"""
	hidden: list[LayerSpec] = [ConvSpec(c) for c in channels]
	if pool:
		hidden.append(PoolSpec(pool))
	hidden.append(FlattenSpec())
	hidden.extend(DenseSpec(n) for n in dense)
	return NetSpec(tuple(input_shape), tuple(hidden), num_classes)


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
	bound = np.sqrt(6.0 / fan_in)
	return rng.uniform(-bound, bound, size=shape)


def init_network(spec: NetSpec, rng: np.random.Generator) -> Network:
	"""
	Uniform Kaiming fan-in initialization, zero biases
	"""

	layers: list[Layer] = []
	shape = tuple(spec.input_shape)

	def dense(units: int, relu: bool) -> Dense:
		if len(shape) != 1:
			raise ValueError(f'Dense layer needs a flat input, got shape {shape} (add a FlattenSpec)')
		fan_in = shape[0]
		return Dense(_kaiming_uniform(rng, (units, fan_in), fan_in), np.zeros(units), relu=relu)

	for layer_spec in spec.hidden:
		match layer_spec:
			case DenseSpec(units=units):
				layer = dense(units, relu=True)
			case ConvSpec(channels=channels, kernel=k, stride=stride, padding=padding):
				if len(shape) != 3:
					raise ValueError(f'Conv layer needs a (C, H, W) input, got shape {shape}')
				fan_in = shape[0] * k * k
				kernel = _kaiming_uniform(rng, (channels, shape[0], k, k), fan_in)
				layer = Conv2d(kernel, np.zeros(channels), stride=stride, padding=padding)
			case PoolSpec(size=size):
				layer = AvgPool2d(size)
			case FlattenSpec():
				layer = Flatten()
			case _:
				raise ValueError(f'Unknown layer spec {layer_spec!r}')

		shape = layer.output_shape(shape)
		layers.append(layer)

	if len(shape) != 1:
		layers.append(Flatten())
		shape = (int(np.prod(shape)),)

	layers.append(dense(spec.num_classes, relu=False))
	return Network(spec.input_shape, tuple(layers))


# Training


@dataclass(frozen=True)
class TrainConfig:
	optimizer: str = 'momentum'
	lr: float = 0.05
	momentum: float = 0.9
	epochs: int = 20
	batch_size: int = 32
	seed: int = 0
	loss: str = 'cross_entropy'

	def __post_init__(self):
		if self.optimizer not in OPTIMIZERS:
			raise ValueError(f'Unknown optimizer {self.optimizer!r}, expected one of {OPTIMIZERS}')
		if self.loss not in LOSSES:
			raise ValueError(f'Unknown loss {self.loss!r}, expected one of {LOSSES}')
		# lr = 0 is a frozen run
		if self.lr < 0:
			raise ValueError(f'Learning rate must be non-negative, got {self.lr}')
		if not 0.0 <= self.momentum < 1.0:
			raise ValueError(f'Momentum must be in [0, 1), got {self.momentum}')
		if self.epochs < 0 or self.batch_size < 1:
			raise ValueError(f'Invalid schedule: epochs={self.epochs}, batch_size={self.batch_size}')


@dataclass(frozen=True)
class EpochMetrics:
	epoch: int
	loss: float
	accuracy: float


@dataclass(frozen=True)
class TrainResult:
	net: Network
	history: tuple[EpochMetrics, ...]


def loss_and_grad(logits: np.ndarray, labels: np.ndarray, loss: str) -> tuple[np.ndarray, np.ndarray]:
	"""
	:returns: per-sample losses (B,), and gradient of the *mean* loss wrt logits (B, K)
	"""
	batch, num_classes = logits.shape
	onehot = np.zeros_like(logits)
	onehot[np.arange(batch), labels] = 1.0

	if loss == 'cross_entropy':
		shifted = logits - logits.max(axis=1, keepdims=True)
		log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
		losses = -log_probs[np.arange(batch), labels]
		grad = (np.exp(log_probs) - onehot) / batch

	elif loss == 'mse':
		diff = logits - onehot
		losses = (diff ** 2).sum(axis=1)
		grad = 2.0 * diff / batch

	else:
		raise ValueError(f'Unknown loss {loss!r}')

	return losses, grad


def _check_labels(net: Network, dataset: Dataset) -> None:
	if dataset.input_shape != net.input_shape:
		raise ValueError(f'Dataset input shape {dataset.input_shape} does not match network {net.input_shape}')
	if len(dataset) and dataset.labels.max() >= net.num_classes:
		raise ValueError(f'Label {dataset.labels.max()} out of range for {net.num_classes} classes')


def train(model: NetSpec | Network, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
	"""
	Minibatch training; the seed fully determines initialization and data order

	:param model: a NetSpec to train from scratch, or a Network to continue training
	:raises FloatingPointError: if the loss or the parameters become non-finite
	"""

	rng = np.random.default_rng(cfg.seed)
	net = init_network(model, rng) if isinstance(model, NetSpec) else model
	_check_labels(net, dataset)

	if not len(dataset):
		raise ValueError('Cannot train on an empty dataset')

	params = [(w.copy(), b.copy()) for w, b in net.params]
	velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
	history = []

	logger.debug(f'Training {dataset.name} ({len(dataset)} samples), layer sizes {net.layer_sizes}, {cfg}')

	for epoch in range(cfg.epochs):
		order = rng.permutation(len(dataset))

		for batch_idx, start in enumerate(range(0, len(dataset), cfg.batch_size)):
			idx = order[start : start + cfg.batch_size]

			with np.errstate(over='ignore', invalid='ignore'):
				trace = forward_batch(net, dataset.inputs[idx])
				losses, dlogits = loss_and_grad(trace.logits, dataset.labels[idx], cfg.loss)

				if not np.all(np.isfinite(losses)):
					raise FloatingPointError(f'Training diverged at epoch {epoch}, batch {batch_idx}: non-finite loss')

				grads = reverse(net, trace, dlogits, param_grads=True).param_grads

				for (w, b), (vw, vb), (gw, gb) in zip(params, velocity, grads):
					if cfg.optimizer == 'momentum':
						vw *= cfg.momentum
						vw += gw
						vb *= cfg.momentum
						vb += gb
						gw, gb = vw, vb
					w -= cfg.lr * gw
					b -= cfg.lr * gb

			if not all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in params):
				raise FloatingPointError(f'Training diverged at epoch {epoch}, batch {batch_idx}: non-finite parameters')

			net = net.with_params(params)

		result = evaluate(net, dataset, loss=cfg.loss)
		if not np.isfinite(result.loss):
			raise FloatingPointError(f'Training diverged at epoch {epoch}: non-finite epoch loss')

		history.append(EpochMetrics(epoch=epoch, loss=result.loss, accuracy=result.accuracy))
		logger.debug(f'Epoch {epoch}: loss {result.loss:.5f}, accuracy {result.accuracy:.3f}')

	if history:
		logger.info(f'Trained {cfg.epochs} epochs: loss {history[-1].loss:.5f}, accuracy {history[-1].accuracy:.3f}')

	return TrainResult(net=net, history=tuple(history))


# Evaluation


@dataclass(frozen=True)
class Evaluation:
	accuracy: float
	loss: float


def evaluate(net: Network, dataset: Dataset, *, loss: str = 'cross_entropy') -> Evaluation:
	"""
	Accuracy (argmax, ties to the lowest class) and mean loss; independent of sample order
	"""

	if not len(dataset):
		raise ValueError('Cannot evaluate on an empty dataset')
	_check_labels(net, dataset)

	correct = 0
	losses = []
	for start in range(0, len(dataset), EVAL_CHUNK):
		xs = dataset.inputs[start : start + EVAL_CHUNK]
		ys = dataset.labels[start : start + EVAL_CHUNK]
		with np.errstate(over='ignore', invalid='ignore'):
			logits = forward_batch(net, xs).logits
			batch_losses, _ = loss_and_grad(logits, ys, loss)
		correct += int(np.sum(np.argmax(logits, axis=1) == ys))
		losses.append(batch_losses)

	# Sorted so the sum does not depend on sample order
	all_losses = np.sort(np.concatenate(losses))
	return Evaluation(
		accuracy=correct / len(dataset),
		loss=float(np.sum(all_losses, dtype=DTYPE) / len(dataset)),
	)


def metrics_frame(history: Sequence[EpochMetrics]) -> pd.DataFrame:
	return pd.DataFrame(
		[(m.epoch, m.loss, m.accuracy) for m in history],
		columns=['epoch', 'loss', 'accuracy'],
	)


def write_metrics_csv(history: Sequence[EpochMetrics], path: Path | PathLike | str) -> None:
	metrics_frame(history).to_csv(path, index=False, float_format='%.10g')
