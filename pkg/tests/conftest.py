#!/usr/bin/env python3

import numpy as np
import pytest

from pathways.data import gen_synthetic, split
from pathways.network import AvgPool2d, Conv2d, Dense, Flatten, Network
from pathways.train import TrainConfig, mlp_spec, small_conv_spec, train


def random_mlp(rng: np.random.Generator, sizes, num_classes: int = 2, bias_scale: float = 0.5) -> Network:
	"""
	sizes = (input_dim, hidden widths...)
	"""
	layers = []
	for n_in, n_out in zip(sizes[:-1], sizes[1:]):
		layers.append(Dense(rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_out, n_in)), rng.normal(0.0, bias_scale, n_out)))
	layers.append(Dense(rng.normal(0.0, 1.0 / np.sqrt(sizes[-1]), (num_classes, sizes[-1])), rng.normal(0.0, 0.1, num_classes), relu=False))
	return Network((sizes[0],), tuple(layers))


def random_conv(rng: np.random.Generator, input_shape=(1, 6, 6), channels: int = 3, dense: int = 6, num_classes: int = 2) -> Network:
	c, h, w = input_shape
	flat = channels * (h // 2) * (w // 2)
	return Network(input_shape, (
		Conv2d(rng.normal(0.0, 0.4, (channels, c, 3, 3)), rng.normal(0.0, 0.2, channels), padding=1),
		AvgPool2d(2),
		Flatten(),
		Dense(rng.normal(0.0, 1.0 / np.sqrt(flat), (dense, flat)), rng.normal(0.0, 0.2, dense)),
		Dense(rng.normal(0.0, 1.0 / np.sqrt(dense), (num_classes, dense)), np.zeros(num_classes), relu=False),
	))


def hand_pruning_net() -> Network:
	"""
	u = ReLU(x), v = ReLU(2x); p = ReLU(-2u + 1), q = ReLU(v + 0.5u); Phi = p + q

	At x = 1: u = 1, v = 2, p = 0 (dead), q = 2.5. Pruning u revives p.
	"""
	return Network((1,), (
		Dense([[1.0], [2.0]], [0.0, 0.0]),
		Dense([[-2.0, 0.0], [0.5, 1.0]], [1.0, 0.0]),
		Dense([[1.0, 1.0]], [0.0], relu=False),
	))


@pytest.fixture
def rng():
	return np.random.default_rng(1234)


@pytest.fixture
def mlp(rng):
	return random_mlp(rng, (5, 7, 6))


@pytest.fixture
def conv_net(rng):
	return random_conv(rng)


@pytest.fixture
def hand_net():
	return hand_pruning_net()


@pytest.fixture(scope='session')
def informative_data():
	return gen_synthetic('informative', 240, seed=3, shape=(1, 6, 6), num_informative=2)


@pytest.fixture(scope='session')
def trained_conv(informative_data):
	train_set, _ = split(informative_data, 0.25, seed=0)
	spec = small_conv_spec(informative_data.input_shape, (3,), (8,), pool=2)
	return train(spec, train_set, TrainConfig(epochs=15, seed=0)).net


@pytest.fixture(scope='session')
def trained_xor():
	data = gen_synthetic('xor', 200, seed=0)
	return train(mlp_spec(2, (12, 12)), data, TrainConfig(epochs=40, seed=0)).net, data
