#!/usr/bin/env python3

"""
Rectified network representation with recorded forward passes and reverse-mode gradients

Layers operate on a leading batch dimension. Hidden neurons are the outputs of affine layers marked `relu=True`;
avg-pool and flatten are affine glue between them. The final layer is an affine head with one logit per class.

Conv neurons are flattened channel-major, then row-major, into the layer's unit index.
"""

from dataclasses import dataclass, field
from enum import Enum, unique
from functools import cached_property
import hashlib
import logging
from typing import ClassVar, Final, Mapping, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pathways.types import ActivationPattern, ClassIndex, FlatIndex


logger = logging.getLogger(__name__)


DTYPE: Final = np.float64


class NeuronId(NamedTuple):
	"""
	0-based (hidden layer, unit) index; tuple ordering is the network-wide neuron order
	"""
	layer: int
	unit: int


@unique
class ReluRule(Enum):
	standard = 'standard'
	# Guided backpropagation: negative gradients are also clamped at every ReLU
	guided = 'guided'


def _as_param(arr) -> np.ndarray:
	arr = np.array(arr, dtype=DTYPE)
	arr.setflags(write=False)
	return arr


# Layers


@dataclass(frozen=True, eq=False)
class Dense:
	weight: np.ndarray  # (out, in)
	bias: np.ndarray  # (out,)
	relu: bool = True

	kind: ClassVar[str] = 'dense'
	has_params: ClassVar[bool] = True

	def __post_init__(self):
		object.__setattr__(self, 'weight', _as_param(self.weight))
		object.__setattr__(self, 'bias', _as_param(self.bias))

		if self.weight.ndim != 2:
			raise ValueError(f'Dense weight must be 2-D, got shape {self.weight.shape}')
		if self.bias.shape != (self.weight.shape[0],):
			raise ValueError(f'Dense bias shape {self.bias.shape} does not match weight shape {self.weight.shape}')

	@property
	def params(self) -> tuple[np.ndarray, np.ndarray]:
		return self.weight, self.bias

	def with_params(self, weight: np.ndarray, bias: np.ndarray) -> 'Dense':
		return Dense(weight, bias, relu=self.relu)

	def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
		if input_shape != (self.weight.shape[1],):
			raise ValueError(f'expected input shape ({self.weight.shape[1]},), got {input_shape}')
		return (self.weight.shape[0],)

	def forward(self, x: np.ndarray) -> np.ndarray:
		return x @ self.weight.T + self.bias

	def backward(self, g: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
		return g @ self.weight

	def param_grads(self, x: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
		return g.T @ x, g.sum(axis=0)


@dataclass(frozen=True, eq=False)
class Conv2d:
	kernel: np.ndarray  # (out_channels, in_channels, kh, kw)
	bias: np.ndarray  # (out_channels,)
	stride: int = 1
	padding: int = 0
	relu: bool = True

	kind: ClassVar[str] = 'conv'
	has_params: ClassVar[bool] = True

	def __post_init__(self):
		object.__setattr__(self, 'kernel', _as_param(self.kernel))
		object.__setattr__(self, 'bias', _as_param(self.bias))

		if self.kernel.ndim != 4:
			raise ValueError(f'Conv kernel must be 4-D, got shape {self.kernel.shape}')
		if self.bias.shape != (self.kernel.shape[0],):
			raise ValueError(f'Conv bias shape {self.bias.shape} does not match kernel shape {self.kernel.shape}')
		if self.stride < 1 or self.padding < 0:
			raise ValueError(f'Invalid conv geometry: stride={self.stride}, padding={self.padding}')

	@property
	def params(self) -> tuple[np.ndarray, np.ndarray]:
		return self.kernel, self.bias

	def with_params(self, kernel: np.ndarray, bias: np.ndarray) -> 'Conv2d':
		return Conv2d(kernel, bias, stride=self.stride, padding=self.padding, relu=self.relu)

	def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
		out_c, in_c, kh, kw = self.kernel.shape
		if len(input_shape) != 3 or input_shape[0] != in_c:
			raise ValueError(f'expected input shape ({in_c}, H, W), got {input_shape}')
		_, h, w = input_shape
		out_h = (h + 2 * self.padding - kh) // self.stride + 1
		out_w = (w + 2 * self.padding - kw) // self.stride + 1
		if out_h < 1 or out_w < 1:
			raise ValueError(f'kernel {kh}x{kw} does not fit input {h}x{w} with padding {self.padding}')
		return (out_c, out_h, out_w)

	def _windows(self, x: np.ndarray) -> np.ndarray:
		"""
		:returns: view of shape (B, C, out_h, out_w, kh, kw)
		"""
		p = self.padding
		if p:
			x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
		windows = sliding_window_view(x, self.kernel.shape[2:], axis=(2, 3))
		return windows[:, :, ::self.stride, ::self.stride]

	def forward(self, x: np.ndarray) -> np.ndarray:
		out = np.einsum('bchwij,ocij->bohw', self._windows(x), self.kernel, optimize=True)
		return out + self.bias[None, :, None, None]

	def backward(self, g: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
		c, h, w = input_shape
		kh, kw = self.kernel.shape[2:]
		s, p = self.stride, self.padding
		out_h, out_w = g.shape[2:]

		dcols = np.einsum('bohw,ocij->bchwij', g, self.kernel, optimize=True)

		# col2im: scatter each kernel tap back onto the padded input
		dx = np.zeros((g.shape[0], c, h + 2 * p, w + 2 * p), dtype=DTYPE)
		for i in range(kh):
			for j in range(kw):
				dx[:, :, i : i + s * (out_h - 1) + 1 : s, j : j + s * (out_w - 1) + 1 : s] += dcols[..., i, j]

		return dx[:, :, p : p + h, p : p + w]

	def param_grads(self, x: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
		dk = np.einsum('bchwij,bohw->ocij', self._windows(x), g, optimize=True)
		return dk, g.sum(axis=(0, 2, 3))


@dataclass(frozen=True, eq=False)
class AvgPool2d:
	size: int

	relu: ClassVar[bool] = False
	kind: ClassVar[str] = 'avgpool'
	has_params: ClassVar[bool] = False

	def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
		if len(input_shape) != 3:
			raise ValueError(f'expected input shape (C, H, W), got {input_shape}')
		c, h, w = input_shape
		if self.size < 1 or h % self.size or w % self.size:
			raise ValueError(f'pool size {self.size} does not tile input {h}x{w}')
		return (c, h // self.size, w // self.size)

	def forward(self, x: np.ndarray) -> np.ndarray:
		b, c, h, w = x.shape
		k = self.size
		return x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

	def backward(self, g: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
		k = self.size
		return np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)


@dataclass(frozen=True, eq=False)
class Flatten:
	relu: ClassVar[bool] = False
	kind: ClassVar[str] = 'flatten'
	has_params: ClassVar[bool] = False

	def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
		return (int(np.prod(input_shape)),)

	def forward(self, x: np.ndarray) -> np.ndarray:
		return x.reshape(x.shape[0], -1)

	def backward(self, g: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
		return g.reshape(g.shape[0], *input_shape)


Layer = Dense | Conv2d | AvgPool2d | Flatten


# Network


@dataclass(frozen=True, eq=False)
class Network:
	"""
	Immutable after construction: parameter arrays are read-only, and updates go through with_params()
	"""

	input_shape: tuple[int, ...]
	layers: tuple[Layer, ...]

	def __post_init__(self):
		object.__setattr__(self, 'input_shape', tuple(int(d) for d in self.input_shape))
		object.__setattr__(self, 'layers', tuple(self.layers))

		if not self.layers:
			raise ValueError('Network must have at least a head layer')

		shapes = [self.input_shape]
		for idx, layer in enumerate(self.layers):
			try:
				shapes.append(layer.output_shape(shapes[-1]))
			except ValueError as ex:
				raise ValueError(f'Layer {idx} ({layer.kind}): {ex}') from ex

			if layer.has_params:
				for p in layer.params:
					if not np.all(np.isfinite(p)):
						raise ValueError(f'Layer {idx} ({layer.kind}) has non-finite parameters')

		head = self.layers[-1]
		if not (isinstance(head, Dense) and not head.relu):
			raise ValueError(f'Last layer must be an affine dense head without ReLU, got {head.kind} (relu={head.relu})')

		for idx, layer in enumerate(self.layers[:-1]):
			if layer.has_params and not layer.relu:
				raise ValueError(f'Layer {idx} ({layer.kind}): only the head may omit the ReLU')

		object.__setattr__(self, '_shapes', tuple(shapes))

	# Topology

	@property
	def layer_input_shapes(self) -> tuple[tuple[int, ...], ...]:
		return self._shapes[:-1]

	@property
	def layer_output_shapes(self) -> tuple[tuple[int, ...], ...]:
		return self._shapes[1:]

	@property
	def num_classes(self) -> int:
		return self._shapes[-1][0]

	@cached_property
	def hidden_positions(self) -> tuple[int, ...]:
		"""
		Positions in `layers` of the ReLU layers, i.e. hidden layer i lives at layers[hidden_positions[i]]
		"""
		return tuple(pos for pos, layer in enumerate(self.layers) if layer.relu)

	@cached_property
	def hidden_shapes(self) -> tuple[tuple[int, ...], ...]:
		return tuple(self._shapes[pos + 1] for pos in self.hidden_positions)

	@cached_property
	def layer_sizes(self) -> tuple[int, ...]:
		return tuple(int(np.prod(s)) for s in self.hidden_shapes)

	@property
	def num_hidden_layers(self) -> int:
		return len(self.hidden_positions)

	@property
	def num_neurons(self) -> int:
		return sum(self.layer_sizes)

	@cached_property
	def offsets(self) -> tuple[int, ...]:
		return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.layer_sizes, dtype=int)]))

	@cached_property
	def param_positions(self) -> tuple[int, ...]:
		return tuple(pos for pos, layer in enumerate(self.layers) if layer.has_params)

	def conv_hidden_layers(self) -> tuple[int, ...]:
		return tuple(i for i, pos in enumerate(self.hidden_positions) if isinstance(self.layers[pos], Conv2d))

	# Neuron indexing

	def flat_index(self, neuron: NeuronId) -> FlatIndex:
		layer, unit = neuron
		if not (0 <= layer < self.num_hidden_layers and 0 <= unit < self.layer_sizes[layer]):
			raise ValueError(f'{neuron} out of bounds for layer sizes {self.layer_sizes}')
		return FlatIndex(self.offsets[layer] + unit)

	def neuron_id(self, flat: FlatIndex | int) -> NeuronId:
		if not 0 <= flat < self.num_neurons:
			raise ValueError(f'Flat neuron index {flat} out of range [0, {self.num_neurons})')
		layer = int(np.searchsorted(self.offsets, flat, side='right')) - 1
		return NeuronId(layer, int(flat - self.offsets[layer]))

	def split(self, flat: np.ndarray) -> tuple[np.ndarray, ...]:
		"""
		Split a network-wide vector (..., N) into per-layer vectors (..., N_i)
		"""
		flat = np.asarray(flat)
		if flat.shape[-1] != self.num_neurons:
			raise ValueError(f'Expected {self.num_neurons} neuron values, got {flat.shape[-1]}')
		return tuple(flat[..., a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:]))

	def concat(self, per_layer: Sequence[np.ndarray]) -> np.ndarray:
		if not per_layer:
			return np.zeros(0, dtype=DTYPE)
		return np.concatenate(per_layer, axis=-1)

	# Parameters

	@property
	def params(self) -> list[tuple[np.ndarray, np.ndarray]]:
		return [self.layers[pos].params for pos in self.param_positions]

	def with_params(self, params: Sequence[tuple[np.ndarray, np.ndarray]]) -> 'Network':
		if len(params) != len(self.param_positions):
			raise ValueError(f'Expected {len(self.param_positions)} parameter pairs, got {len(params)}')
		layers = list(self.layers)
		for pos, (w, b) in zip(self.param_positions, params):
			layers[pos] = layers[pos].with_params(w, b)
		return Network(self.input_shape, tuple(layers))

	def topology(self) -> list[dict]:
		desc = []
		for layer in self.layers:
			match layer:
				case Dense():
					desc.append(dict(type='dense', inputs=layer.weight.shape[1], outputs=layer.weight.shape[0], relu=layer.relu))
				case Conv2d():
					out_c, in_c, kh, kw = layer.kernel.shape
					desc.append(dict(
						type='conv', in_channels=in_c, out_channels=out_c, kernel=[kh, kw],
						stride=layer.stride, padding=layer.padding, relu=layer.relu))
				case AvgPool2d():
					desc.append(dict(type='avgpool', size=layer.size))
				case Flatten():
					desc.append(dict(type='flatten'))
		return desc

	@cached_property
	def digest(self) -> str:
		"""
		sha256 over topology and float64 little-endian parameter bytes
		"""
		h = hashlib.sha256()
		h.update(repr((self.input_shape, self.topology())).encode())
		for w, b in self.params:
			h.update(np.ascontiguousarray(w, dtype='<f8').tobytes())
			h.update(np.ascontiguousarray(b, dtype='<f8').tobytes())
		return h.hexdigest()


# Intercepts


@dataclass(frozen=True, eq=False)
class InterceptSpec:
	"""
	Per-neuron directives applied between a hidden neuron's activation a and the value t passed downstream

	- gates: t = gate * a (gates may be (N_i,) or batched (B, N_i); must be >= 0)
	- frozen: t = constant; the constant does not propagate gradient

	Neurons in neither map pass through unchanged. Keys are hidden layer indices.
	"""

	gates: Mapping[int, np.ndarray] = field(default_factory=dict)
	frozen: Mapping[int, np.ndarray] = field(default_factory=dict)
	frozen_values: Mapping[int, np.ndarray] = field(default_factory=dict)

	@classmethod
	def from_gates(cls, net: Network, gates: np.ndarray) -> 'InterceptSpec':
		"""
		:param gates: network-wide gates, shape (N,) or (B, N)
		"""
		return cls(gates={i: g for i, g in enumerate(net.split(np.asarray(gates, dtype=DTYPE)))})

	@classmethod
	def from_mask(cls, net: Network, mask: np.ndarray) -> 'InterceptSpec':
		"""
		Pruning semantics m * a for a network-wide binary mask
		"""
		return cls.from_gates(net, np.asarray(mask, dtype=bool).astype(DTYPE))

	@classmethod
	def freeze(cls, net: Network, frozen: np.ndarray, values: np.ndarray) -> 'InterceptSpec':
		"""
		:param frozen: network-wide boolean mask of neurons to freeze
		:param values: network-wide constants (only entries where frozen is set are used)
		"""
		frozen = np.asarray(frozen, dtype=bool)
		values = np.asarray(values, dtype=DTYPE)
		masks = net.split(frozen)
		vals = net.split(values)
		return cls(
			frozen={i: m for i, m in enumerate(masks) if m.any()},
			frozen_values={i: v for i, (m, v) in enumerate(zip(masks, vals)) if m.any()},
		)

	@classmethod
	def scale_layer(cls, net: Network, layer: int, alphas: np.ndarray) -> 'InterceptSpec':
		"""
		Batched gates scaling every neuron of one hidden layer by alphas[b]
		"""
		alphas = np.asarray(alphas, dtype=DTYPE)
		return cls(gates={layer: np.repeat(alphas[:, None], net.layer_sizes[layer], axis=1)})

	def validate(self, net: Network) -> None:
		for layer, gate in self.gates.items():
			self._check_layer(net, layer, gate, 'gate')
			if not np.all(np.isfinite(gate)):
				raise ValueError(f'Hidden layer {layer}: gates must be finite')
			if np.any(gate < 0):
				raise ValueError(f'Hidden layer {layer}: gates must be non-negative')

		if set(self.frozen) != set(self.frozen_values):
			raise ValueError('Frozen masks and frozen values must cover the same layers')

		for layer, mask in self.frozen.items():
			self._check_layer(net, layer, mask, 'frozen mask')
			values = self.frozen_values[layer]
			if values.shape != mask.shape:
				raise ValueError(f'Hidden layer {layer}: frozen values shape {values.shape} != mask shape {mask.shape}')

	@staticmethod
	def _check_layer(net: Network, layer: int, arr: np.ndarray, what: str) -> None:
		if not 0 <= layer < net.num_hidden_layers:
			raise ValueError(f'{what} references hidden layer {layer}, network has {net.num_hidden_layers}')
		if arr.shape[-1] != net.layer_sizes[layer]:
			raise ValueError(f'Hidden layer {layer}: {what} has {arr.shape[-1]} units, layer has {net.layer_sizes[layer]}')

	def apply(self, layer: int, a: np.ndarray) -> np.ndarray:
		t = a
		gate = self.gates.get(layer)
		if gate is not None:
			t = t * gate
		mask = self.frozen.get(layer)
		if mask is not None:
			t = np.where(mask, self.frozen_values[layer], t)
		return t

	def backward(self, layer: int, g_t: np.ndarray) -> np.ndarray:
		"""
		Gradient wrt transmitted value -> gradient wrt the neuron's own activation
		"""
		g_a = g_t
		gate = self.gates.get(layer)
		if gate is not None:
			g_a = g_a * gate
		mask = self.frozen.get(layer)
		if mask is not None:
			g_a = np.where(mask, 0.0, g_a)
		return g_a


# Forward


@dataclass(frozen=True, eq=False)
class Trace:
	"""
	Batched forward pass. Hidden-layer arrays are flattened to (B, N_i).
	"""
	inputs: np.ndarray
	layer_inputs: tuple[np.ndarray, ...]
	pre_activations: tuple[np.ndarray, ...]
	activations: tuple[np.ndarray, ...]
	transmitted: tuple[np.ndarray, ...]
	logits: np.ndarray
	digest: str
	intercept: InterceptSpec | None

	@property
	def batch_size(self) -> int:
		return self.inputs.shape[0]

	def outputs(self, class_index: int) -> np.ndarray:
		return self.logits[:, class_index]

	def patterns(self) -> np.ndarray:
		"""
		:returns: (B, N) activation patterns
		"""
		return np.concatenate([z > 0 for z in self.pre_activations], axis=1) if self.pre_activations \
			else np.zeros((self.batch_size, 0), dtype=bool)

	def record(self, index: int, class_index: int) -> 'ActivationRecord':
		return ActivationRecord(trace=self, index=index, class_index=ClassIndex(class_index))


@dataclass(frozen=True, eq=False)
class ActivationRecord:
	"""
	One input's view into a Trace
	"""
	trace: Trace
	index: int
	class_index: ClassIndex

	@property
	def input(self) -> np.ndarray:
		return self.trace.inputs[self.index]

	@property
	def pre_activations(self) -> tuple[np.ndarray, ...]:
		return tuple(z[self.index] for z in self.trace.pre_activations)

	@property
	def activations(self) -> tuple[np.ndarray, ...]:
		return tuple(a[self.index] for a in self.trace.activations)

	@property
	def transmitted(self) -> tuple[np.ndarray, ...]:
		return tuple(t[self.index] for t in self.trace.transmitted)

	@property
	def logits(self) -> np.ndarray:
		return self.trace.logits[self.index]

	@property
	def output(self) -> float:
		return float(self.trace.logits[self.index, self.class_index])

	@property
	def digest(self) -> str:
		return self.trace.digest

	@property
	def intercept(self) -> InterceptSpec | None:
		return self.trace.intercept

	def flat_pre_activations(self) -> np.ndarray:
		return _concat_row(self.trace.pre_activations, self.index)

	def flat_activations(self) -> np.ndarray:
		return _concat_row(self.trace.activations, self.index)

	def flat_transmitted(self) -> np.ndarray:
		return _concat_row(self.trace.transmitted, self.index)

	def pattern(self) -> ActivationPattern:
		return ActivationPattern(self.flat_pre_activations() > 0)


def _concat_row(arrays: Sequence[np.ndarray], index: int) -> np.ndarray:
	if not arrays:
		return np.zeros(0, dtype=DTYPE)
	return np.concatenate([a[index] for a in arrays])


def _check_class_index(net: Network, class_index: int) -> None:
	if not 0 <= class_index < net.num_classes:
		raise ValueError(f'class_index={class_index} out of range for {net.num_classes} classes')


def forward_batch(net: Network, xs: np.ndarray, intercept: InterceptSpec | None = None) -> Trace:

	xs = np.asarray(xs, dtype=DTYPE)

	if xs.shape[1:] != net.input_shape:
		raise ValueError(f'Layer 0: input shape {xs.shape[1:]} does not match network input shape {net.input_shape}')
	if not np.all(np.isfinite(xs)):
		raise ValueError('Input contains non-finite values')

	if intercept is not None:
		intercept.validate(net)

	batch = xs.shape[0]
	h = xs
	layer_inputs = []
	zs = []
	acts = []
	trans = []

	for layer in net.layers:
		layer_inputs.append(h)
		out = layer.forward(h)

		if layer.relu:
			hidden = len(zs)
			z = out.reshape(batch, -1)
			a = np.maximum(z, 0.0)
			t = a if intercept is None else intercept.apply(hidden, a)
			zs.append(z)
			acts.append(a)
			trans.append(t)
			h = t.reshape(out.shape)
		else:
			h = out

	return Trace(
		inputs=xs,
		layer_inputs=tuple(layer_inputs),
		pre_activations=tuple(zs),
		activations=tuple(acts),
		transmitted=tuple(trans),
		logits=h,
		digest=net.digest,
		intercept=intercept,
	)


def forward_record(
		net: Network,
		x: np.ndarray,
		*,
		class_index: int,
		intercept: InterceptSpec | None = None,
		) -> ActivationRecord:

	_check_class_index(net, class_index)
	x = np.asarray(x, dtype=DTYPE)
	return forward_batch(net, x[None, ...], intercept).record(0, class_index)


def predict(net: Network, xs: np.ndarray) -> np.ndarray:
	"""
	:returns: argmax class per input
	"""
	return np.argmax(forward_batch(net, xs).logits, axis=1)


# Backward


@dataclass(frozen=True, eq=False)
class BatchGradients:
	"""
	Result of a reverse pass. Per hidden layer entries are None above the seeded layer.

	transmitted_grads: d/dt of the value passed downstream
	neuron_grads: d/da of the neuron's own activation (zero through frozen neurons)
	"""
	input_grads: np.ndarray
	transmitted_grads: tuple[np.ndarray | None, ...]
	neuron_grads: tuple[np.ndarray | None, ...]
	param_grads: tuple[tuple[np.ndarray, np.ndarray], ...] | None


def reverse(
		net: Network,
		trace: Trace,
		seed: np.ndarray,
		*,
		start_layer: int | None = None,
		relu_rule: ReluRule = ReluRule.standard,
		param_grads: bool = False,
		) -> BatchGradients:
	"""
	Reverse-mode pass over a recorded trace

	:param seed: cotangent on the logits (B', K), or on z of hidden layer start_layer (B', N_start).
		If the trace has batch size 1, B' may be larger (seeds broadcast against the single recorded point).
	"""

	if trace.digest != net.digest:
		raise ValueError('Stale activation record: network parameters changed since the forward pass')

	intercept = trace.intercept
	seed = np.asarray(seed, dtype=DTYPE)
	seed_batch = seed.shape[0]

	if trace.batch_size not in (1, seed_batch):
		raise ValueError(f'Seed batch {seed_batch} incompatible with trace batch {trace.batch_size}')

	if start_layer is None:
		start_pos = len(net.layers) - 1
		if seed.shape[1:] != (net.num_classes,):
			raise ValueError(f'Logit seed must have shape (B, {net.num_classes}), got {seed.shape}')
	else:
		if not 0 <= start_layer < net.num_hidden_layers:
			raise ValueError(f'start_layer={start_layer} out of range')
		start_pos = net.hidden_positions[start_layer]
		if seed.shape[1:] != (net.layer_sizes[start_layer],):
			raise ValueError(f'Hidden seed must have shape (B, {net.layer_sizes[start_layer]}), got {seed.shape}')

	hidden_of = {pos: i for i, pos in enumerate(net.hidden_positions)}
	n_hidden = net.num_hidden_layers
	t_grads: list[np.ndarray | None] = [None] * n_hidden
	a_grads: list[np.ndarray | None] = [None] * n_hidden
	p_grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}

	g = seed
	for pos in range(start_pos, -1, -1):
		layer = net.layers[pos]
		in_shape = net.layer_input_shapes[pos]
		out_shape = net.layer_output_shapes[pos]

		if pos == start_pos and start_layer is not None:
			dz = seed.reshape(seed_batch, *out_shape)

		elif layer.relu:
			i = hidden_of[pos]
			g_t = g.reshape(seed_batch, -1)
			g_a = g_t if intercept is None else intercept.backward(i, g_t)
			t_grads[i] = g_t
			a_grads[i] = g_a

			active = trace.pre_activations[i] > 0
			if relu_rule is ReluRule.guided:
				active = active & (g_a > 0)
			dz = np.where(active, g_a, 0.0).reshape(seed_batch, *out_shape)

		else:
			dz = g

		if param_grads and layer.has_params:
			p_grads[pos] = layer.param_grads(trace.layer_inputs[pos], dz)

		g = layer.backward(dz, in_shape)

	return BatchGradients(
		input_grads=g,
		transmitted_grads=tuple(t_grads),
		neuron_grads=tuple(a_grads),
		param_grads=tuple(p_grads[pos] for pos in net.param_positions) if param_grads else None,
	)


def logit_seed(net: Network, class_index: int, batch: int = 1) -> np.ndarray:
	_check_class_index(net, class_index)
	seed = np.zeros((batch, net.num_classes), dtype=DTYPE)
	seed[:, class_index] = 1.0
	return seed


@dataclass(frozen=True, eq=False)
class GradientRecord:
	input_grad: np.ndarray
	neuron_grads: tuple[np.ndarray, ...]
	transmitted_grads: tuple[np.ndarray, ...]

	def flat_neuron_grads(self) -> np.ndarray:
		return np.concatenate(self.neuron_grads) if self.neuron_grads else np.zeros(0, dtype=DTYPE)

	def flat_transmitted_grads(self) -> np.ndarray:
		return np.concatenate(self.transmitted_grads) if self.transmitted_grads else np.zeros(0, dtype=DTYPE)


def backward(
		net: Network,
		record: ActivationRecord,
		*,
		intercept: InterceptSpec | None = None,
		relu_rule: ReluRule = ReluRule.standard,
		) -> GradientRecord:
	"""
	Gradients of the record's class logit at the recorded point, under the intercept the record was produced with
	"""

	if intercept is not None and intercept is not record.intercept:
		raise ValueError('Record was produced under a different intercept')

	trace = record.trace
	if trace.batch_size != 1:
		# Reverse over a single row of a larger trace
		trace = _slice_trace(trace, record.index)

	grads = reverse(net, trace, logit_seed(net, record.class_index), relu_rule=relu_rule)

	return GradientRecord(
		input_grad=grads.input_grads[0],
		neuron_grads=tuple(g[0] for g in grads.neuron_grads),
		transmitted_grads=tuple(g[0] for g in grads.transmitted_grads),
	)


def _slice_trace(trace: Trace, index: int) -> Trace:
	sl = slice(index, index + 1)

	intercept = trace.intercept
	if intercept is not None and any(g.ndim == 2 for g in intercept.gates.values()):
		intercept = InterceptSpec(
			gates={k: (g[sl] if g.ndim == 2 else g) for k, g in intercept.gates.items()},
			frozen=intercept.frozen,
			frozen_values=intercept.frozen_values,
		)

	return Trace(
		inputs=trace.inputs[sl],
		layer_inputs=tuple(x[sl] for x in trace.layer_inputs),
		pre_activations=tuple(z[sl] for z in trace.pre_activations),
		activations=tuple(a[sl] for a in trace.activations),
		transmitted=tuple(t[sl] for t in trace.transmitted),
		logits=trace.logits[sl],
		digest=trace.digest,
		intercept=intercept,
	)


def input_gradient(
		net: Network,
		x: np.ndarray,
		*,
		class_index: int,
		intercept: InterceptSpec | None = None,
		relu_rule: ReluRule = ReluRule.standard,
		) -> np.ndarray:
	record = forward_record(net, x, class_index=class_index, intercept=intercept)
	return backward(net, record, relu_rule=relu_rule).input_grad
