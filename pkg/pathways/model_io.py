#!/usr/bin/env python3

"""
Model manifest: a single JSON document with a topology section and base64 weight blobs

Blobs are little-endian IEEE-754, row-major. Each blob records its dtype: float32 is written whenever the weights are
exactly representable in float32, otherwise float64, so save -> load is always bit-exact. float32 blobs are widened
exactly to float64 on load.
"""

import base64
import hashlib
import json
import logging
from os import PathLike
from pathlib import Path
from typing import Any, Final

import numpy as np

from pathways.network import AvgPool2d, Conv2d, Dense, Flatten, Layer, Network


logger = logging.getLogger(__name__)


FORMAT_NAME: Final = 'pathways-model'
FORMAT_VERSION: Final = 1

BLOB_DTYPES: Final = {
	'float32': np.dtype('<f4'),
	'float64': np.dtype('<f8'),
}


class ManifestError(ValueError):
	def __init__(self, field: str, message: str):
		super().__init__(f'{field}: {message}')
		self.field = field


def _encode_blob(arr: np.ndarray) -> dict[str, Any]:
	arr = np.asarray(arr, dtype=np.float64)
	narrow = arr.astype('<f4')
	if np.array_equal(narrow.astype(np.float64), arr):
		dtype, data = 'float32', narrow
	else:
		dtype, data = 'float64', arr.astype('<f8')
	return dict(
		dtype=dtype,
		shape=list(arr.shape),
		data=base64.b64encode(np.ascontiguousarray(data).tobytes()).decode('ascii'),
	)


def _decode_blob(blob: Any, field: str, expected_shape: tuple[int, ...]) -> np.ndarray:

	if not isinstance(blob, dict):
		raise ManifestError(field, 'expected a weight blob object')

	dtype_name = blob.get('dtype', 'float32')
	if dtype_name not in BLOB_DTYPES:
		raise ManifestError(f'{field}.dtype', f'unsupported dtype {dtype_name!r}')
	dtype = BLOB_DTYPES[dtype_name]

	shape = tuple(blob.get('shape', expected_shape))
	if shape != expected_shape:
		raise ManifestError(f'{field}.shape', f'expected {list(expected_shape)}, got {list(shape)}')

	try:
		raw = base64.b64decode(blob['data'], validate=True)
	except (KeyError, TypeError, ValueError) as ex:
		raise ManifestError(f'{field}.data', f'corrupt weight block ({ex})') from ex

	count = int(np.prod(expected_shape))
	if len(raw) != count * dtype.itemsize:
		raise ManifestError(
			f'{field}.data',
			f'expected {count} {dtype_name} values ({count * dtype.itemsize} bytes), got {len(raw)} bytes')

	arr = np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(expected_shape)
	if not np.all(np.isfinite(arr)):
		raise ManifestError(field, 'non-finite weights')
	return arr


def _require(obj: dict, key: str, field: str, kind: type | tuple[type, ...]):
	if key not in obj:
		raise ManifestError(f'{field}.{key}', 'missing')
	value = obj[key]
	if not isinstance(value, kind) or isinstance(value, bool) and kind is int:
		raise ManifestError(f'{field}.{key}', f'expected {kind}, got {type(value).__name__}')
	return value


def _layer_to_dict(layer: Layer, desc: dict) -> dict:
	d = dict(desc)
	if layer.has_params:
		weights, bias = layer.params
		d['weights'] = _encode_blob(weights)
		d['bias'] = _encode_blob(bias)
	return d


def _layer_from_dict(d: Any, field: str) -> Layer:

	if not isinstance(d, dict):
		raise ManifestError(field, 'expected a layer object')

	kind = _require(d, 'type', field, str)

	match kind:
		case 'dense':
			n_in = _require(d, 'inputs', field, int)
			n_out = _require(d, 'outputs', field, int)
			relu = _require(d, 'relu', field, bool)
			weight = _decode_blob(d.get('weights'), f'{field}.weights', (n_out, n_in))
			bias = _decode_blob(d.get('bias'), f'{field}.bias', (n_out,))
			return Dense(weight, bias, relu=relu)

		case 'conv':
			in_c = _require(d, 'in_channels', field, int)
			out_c = _require(d, 'out_channels', field, int)
			kernel_hw = _require(d, 'kernel', field, list)
			if len(kernel_hw) != 2:
				raise ManifestError(f'{field}.kernel', f'expected [kh, kw], got {kernel_hw}')
			kernel = _decode_blob(d.get('weights'), f'{field}.weights', (out_c, in_c, *kernel_hw))
			bias = _decode_blob(d.get('bias'), f'{field}.bias', (out_c,))
			try:
				return Conv2d(
					kernel, bias,
					stride=_require(d, 'stride', field, int),
					padding=_require(d, 'padding', field, int),
					relu=_require(d, 'relu', field, bool),
				)
			except ValueError as ex:
				raise ManifestError(field, str(ex)) from ex

		case 'avgpool':
			return AvgPool2d(_require(d, 'size', field, int))

		case 'flatten':
			return Flatten()

		case _:
			raise ManifestError(f'{field}.type', f'unknown layer type {kind!r}')


def network_to_manifest(net: Network) -> dict:
	layers = [_layer_to_dict(layer, desc) for layer, desc in zip(net.layers, net.topology())]

	return dict(
		format=FORMAT_NAME,
		format_version=FORMAT_VERSION,
		input_shape=list(net.input_shape),
		num_classes=net.num_classes,
		layers=layers,
	)


def network_from_manifest(manifest: Any) -> Network:

	if not isinstance(manifest, dict):
		raise ManifestError('<root>', 'expected a JSON object')

	if manifest.get('format') != FORMAT_NAME:
		raise ManifestError('format', f'expected {FORMAT_NAME!r}, got {manifest.get("format")!r}')

	if 'format_version' not in manifest:
		raise ManifestError('format_version', 'missing')
	version = manifest['format_version']
	if version != FORMAT_VERSION:
		raise ManifestError('format_version', f'unsupported version {version!r} (expected {FORMAT_VERSION})')

	input_shape = _require(manifest, 'input_shape', '<root>', list)
	if not input_shape or not all(isinstance(d, int) and d > 0 for d in input_shape):
		raise ManifestError('input_shape', f'invalid shape {input_shape}')

	layer_dicts = _require(manifest, 'layers', '<root>', list)
	layers = tuple(_layer_from_dict(d, f'layers[{idx}]') for idx, d in enumerate(layer_dicts))

	try:
		net = Network(tuple(input_shape), layers)
	except ValueError as ex:
		# Network reports 'Layer {idx} ...'; keep the field path style
		msg = str(ex)
		field = '<root>'
		if msg.startswith('Layer '):
			idx = msg.split()[1]
			field = f'layers[{idx}]'
		raise ManifestError(field, msg) from ex

	num_classes = manifest.get('num_classes')
	if num_classes is not None and num_classes != net.num_classes:
		raise ManifestError('num_classes', f'manifest says {num_classes}, head produces {net.num_classes}')

	return net


def dumps(net: Network) -> str:
	"""
	Deterministic text serialization
	"""
	return json.dumps(network_to_manifest(net), indent=1) + '\n'


def loads(text: str) -> Network:
	try:
		manifest = json.loads(text)
	except json.JSONDecodeError as ex:
		raise ManifestError('<root>', f'not valid JSON ({ex})') from ex
	return network_from_manifest(manifest)


def save_network(net: Network, path: Path | PathLike | str) -> str:
	"""
	:returns: sha256 of the manifest bytes
	"""
	data = dumps(net).encode('utf-8')
	Path(path).write_bytes(data)
	digest = hashlib.sha256(data).hexdigest()
	logger.info(f'Saved model manifest {path} ({len(data)} bytes, sha256 {digest[:12]})')
	return digest


def load_network(path: Path | PathLike | str) -> Network:
	path = Path(path)
	net = loads(path.read_text(encoding='utf-8'))
	logger.info(f'Loaded {path}: input {net.input_shape}, hidden layer sizes {net.layer_sizes}, {net.num_classes} classes')
	return net

