#!/usr/bin/env python3

import base64
import json

import numpy as np
from numpy.testing import assert_array_equal
import pytest

from pathways import model_io
from pathways.model_io import ManifestError
from pathways.network import forward_record


def _manifest(net) -> dict:
	return json.loads(model_io.dumps(net))


def test_save_load_is_bit_exact(conv_net, tmp_path, rng):
	path = tmp_path / 'model.json'
	sha = model_io.save_network(conv_net, path)
	assert len(sha) == 64

	loaded = model_io.load_network(path)
	assert loaded.digest == conv_net.digest
	for (w0, b0), (w1, b1) in zip(conv_net.params, loaded.params):
		assert_array_equal(w0, w1)
		assert_array_equal(b0, b1)

	x = rng.uniform(size=conv_net.input_shape)
	assert forward_record(loaded, x, class_index=1).output == forward_record(conv_net, x, class_index=1).output


def test_serialization_is_deterministic(mlp):
	assert model_io.dumps(mlp) == model_io.dumps(model_io.loads(model_io.dumps(mlp)))


def test_float32_blobs_used_when_lossless(mlp):
	exact = mlp.with_params([(w.astype(np.float32), b.astype(np.float32)) for w, b in mlp.params])
	manifest = _manifest(exact)
	assert manifest['layers'][0]['weights']['dtype'] == 'float32'
	assert _manifest(mlp)['layers'][0]['weights']['dtype'] == 'float64'
	assert model_io.loads(model_io.dumps(exact)).digest == exact.digest


def test_wrong_bias_length_names_field(mlp):
	manifest = _manifest(mlp)
	bias = manifest['layers'][1]['bias']
	bias['shape'] = [bias['shape'][0] - 1]
	with pytest.raises(ManifestError) as info:
		model_io.network_from_manifest(manifest)
	assert info.value.field == 'layers[1].bias.shape'


def test_truncated_blob_is_corrupt(mlp):
	manifest = _manifest(mlp)
	blob = manifest['layers'][0]['weights']
	raw = base64.b64decode(blob['data'])
	blob['data'] = base64.b64encode(raw[:-8]).decode('ascii')
	with pytest.raises(ManifestError) as info:
		model_io.network_from_manifest(manifest)
	assert info.value.field == 'layers[0].weights.data'


def test_unknown_version_rejected(mlp):
	manifest = _manifest(mlp)
	manifest['format_version'] = 99
	with pytest.raises(ManifestError, match='unsupported version'):
		model_io.network_from_manifest(manifest)


def test_unknown_layer_type(mlp):
	manifest = _manifest(mlp)
	manifest['layers'][0]['type'] = 'maxpool'
	with pytest.raises(ManifestError) as info:
		model_io.network_from_manifest(manifest)
	assert info.value.field == 'layers[0].type'


def test_inconsistent_topology_names_layer(mlp):
	manifest = _manifest(mlp)
	# Second dense layer now expects the wrong input width
	layer = manifest['layers'][1]
	layer['inputs'] += 1
	w = np.zeros((layer['outputs'], layer['inputs']))
	layer['weights'] = dict(dtype='float64', shape=list(w.shape), data=base64.b64encode(w.tobytes()).decode('ascii'))
	with pytest.raises(ManifestError) as info:
		model_io.network_from_manifest(manifest)
	assert info.value.field == 'layers[1]'


def test_not_json():
	with pytest.raises(ManifestError, match='not valid JSON'):
		model_io.loads('{')
