#!/usr/bin/env python3

import json

import numpy as np
import pandas as pd
import pytest

from main import main
from pathways.commands import RunConfig, StageTimer, attributors, net_spec, parse_dataset_spec
from pathways.data import gen_synthetic, write_idx
from pathways.train import ConvSpec, DenseSpec, FlattenSpec


def test_config_json_roundtrip():
	cfg = RunConfig('attribute', methods=('gradient', 'neuron_mct'), sparsity=(0.8, 0.9), smooth=True, limit=5)
	assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg


@pytest.mark.parametrize('kwargs, match', [
	(dict(command='explain'), 'Unknown command'),
	(dict(command='train', sparsity=(1.0,)), 'Sparsity'),
	(dict(command='train', mode='global'), 'IntGrad mode'),
	(dict(command='train', jobs=0), 'jobs'),
	(dict(command='train', index=-1), 'index'),
])
def test_config_checks(kwargs, match):
	with pytest.raises(ValueError, match=match):
		RunConfig(**kwargs)


def test_config_rejects_unknown_keys():
	with pytest.raises(ValueError, match='Unknown config keys'):
		RunConfig.from_dict(dict(command='train', learning_rate=0.1))


def test_synthetic_dataset_spec():
	data = parse_dataset_spec('synthetic:informative:n=20,shape=1x4x4,pixels=3', seed=1)
	assert len(data) == 20
	assert data.input_shape == (1, 4, 4)
	assert len(data.informative_pixels) == 3

	assert len(parse_dataset_spec('synthetic:xor', seed=0)) == 400


def test_idx_dataset_spec(tmp_path):
	data = gen_synthetic('informative', 10, seed=0, shape=(1, 3, 3))
	write_idx(data, tmp_path / 'images.idx', tmp_path / 'labels.idx')
	loaded = parse_dataset_spec(f'idx:{tmp_path / "images.idx"},{tmp_path / "labels.idx"}', seed=0)
	assert loaded.input_shape == (1, 3, 3)
	np.testing.assert_array_equal(loaded.labels, data.labels)


@pytest.mark.parametrize('spec, match', [
	('csv:data.csv', 'Unknown dataset source'),
	('synthetic:xor:n', 'key=value'),
	('synthetic:xor:size=3', 'Unknown synthetic dataset option'),
	('synthetic:spiral', 'Unknown synthetic dataset kind'),
	('idx:', 'IMAGES'),
])
def test_bad_dataset_specs(spec, match):
	with pytest.raises(ValueError, match=match):
		parse_dataset_spec(spec, seed=0)


def test_net_spec():
	images = gen_synthetic('informative', 8, seed=0, shape=(1, 4, 4))
	spec = net_spec(RunConfig('train', hidden=(5,)), images)
	assert spec.hidden == (FlattenSpec(), DenseSpec(5))

	spec = net_spec(RunConfig('train', hidden=(5,), conv=(2,), pool=2), images)
	assert spec.hidden[0] == ConvSpec(2)

	with pytest.raises(ValueError, match='image inputs'):
		net_spec(RunConfig('train', conv=(2,)), gen_synthetic('xor', 8, seed=0))


def test_attributor_aliases():
	data = gen_synthetic('xor', 8, seed=0)
	cfg = RunConfig('attribute', methods=('pathway-gradient', 'InputMCT', 'gradient'), sparsity=(0.5, 0.9))
	assert [a.name for a in attributors(cfg, data)] == [
		'neuron_intgrad@0.5', 'neuron_intgrad@0.9', 'input_x_grad', 'gradient']

	with pytest.raises(ValueError, match='--method'):
		attributors(RunConfig('attribute'), data)


def test_stage_timer():
	timer = StageTimer()
	timer.checkin('a')
	timer.checkin('b')
	timer.checkin('a')
	assert set(timer.sums) == {'a', 'b'}
	assert all(v >= 0 for v in timer.sums.values())


DATASET = 'synthetic:xor:n=80'


@pytest.fixture(scope='module')
def trained_model(tmp_path_factory):
	out = tmp_path_factory.mktemp('train')
	assert main(['train', '--dataset', DATASET, '--hidden', '8,8', '--epochs', '5', '--out', str(out)]) == 0
	return out


def test_train_command_outputs(trained_model):
	for name in ('model.json', 'metrics.csv', 'config.json', 'summary.json', 'run.log'):
		assert (trained_model / name).is_file()

	summary = json.loads((trained_model / 'summary.json').read_text())
	assert summary['train_samples'] == 60 and summary['test_samples'] == 20
	assert len(pd.read_csv(trained_model / 'metrics.csv')) == 5


def test_attribute_command(trained_model, tmp_path):
	model = str(trained_model / 'model.json')
	argv = [
		'attribute', '--model', model, '--dataset', DATASET, '--index', '3',
		'--methods', 'gradient,neuron_intgrad', '--sparsity', '0.5', '--steps', '8', '--out', str(tmp_path / 'a'),
	]
	assert main(argv) == 0
	assert (tmp_path / 'a' / 'map_gradient.csv').is_file()
	assert (tmp_path / 'a' / 'map_neuron_intgrad_0.5.pgm').is_file()

	# Re-running from the written config reproduces the maps
	again = ['attribute', '--config', str(tmp_path / 'a' / 'config.json'), '--out', str(tmp_path / 'b')]
	assert main(again) == 0
	for name in ('map_gradient.csv', 'map_neuron_intgrad_0.5.csv'):
		assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()


def test_pathway_commands(trained_model, tmp_path):
	model = str(trained_model / 'model.json')
	common = ['--model', model, '--dataset', DATASET, '--sparsity', '0.5']

	assert main(['select-path', *common, '--method', 'neuron_mct', '--out', str(tmp_path / 's')]) == 0
	assert (tmp_path / 's' / 'mask_0.5.txt').read_text().startswith('pathway-mask 1')

	assert main(['greedy-prune', *common, '--out', str(tmp_path / 'g')]) == 0
	assert (tmp_path / 'g' / 'prune_trace_0.5.csv').is_file()

	assert main(['dgr', *common, '--iterations', '5', '--out', str(tmp_path / 'd')]) == 0
	assert len(pd.read_csv(tmp_path / 'd' / 'dgr_objective.csv')) == 6

	argv = ['pathway-stats', *common, '--limit', '3', '--methods', 'neuron_mct,greedy', '--steps', '8', '--out', str(tmp_path / 'p')]
	assert main(argv) == 0
	assert len(pd.read_csv(tmp_path / 'p' / 'pathway_stats.csv')) == 6


def test_evaluation_commands(trained_model, tmp_path):
	model = str(trained_model / 'model.json')

	argv = ['eval-lerf', '--model', model, '--dataset', DATASET, '--limit', '10', '--methods', 'random,gradient', '--out', str(tmp_path / 'l')]
	assert main(argv) == 0
	frame = pd.read_csv(tmp_path / 'l' / 'lerf.csv')
	assert set(frame['method']) == {'random', 'gradient'}
	assert len(json.loads((tmp_path / 'l' / 'summary.json').read_text())['auc']) == 2

	argv = ['linearity', '--model', model, '--dataset', DATASET, '--limit', '3', '--steps', '8', '--sparsity', '0.5', '--out', str(tmp_path / 'r')]
	assert main(argv) == 0
	assert pd.read_csv(tmp_path / 'r' / 'linearity.csv')['passed'].all()


def test_errors_exit_with_usage(tmp_path, capsys):
	assert main(['select-path', '--dataset', DATASET, '--out', str(tmp_path)]) == 2
	assert 'usage' in capsys.readouterr().err

	assert main(['train', '--dataset', 'csv:nope', '--out', str(tmp_path)]) == 2
	assert main(['contrib', '--model', str(tmp_path / 'missing.json'), '--dataset', DATASET, '--out', str(tmp_path)]) == 2
