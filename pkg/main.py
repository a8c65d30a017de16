#!/usr/bin/env python3

from argparse import SUPPRESS, ArgumentParser
import json
import logging
from pathlib import Path
import sys

from pathways.commands import COMMANDS, LOG_FILENAME, RunConfig, run
from utils import logging_utils


logger = logging.getLogger(__name__)


def _floats(text: str) -> tuple[float, ...]:
	return tuple(float(v) for v in text.split(',') if v)


def _ints(text: str) -> tuple[int, ...]:
	return tuple(int(v) for v in text.split(',') if v)


def _strs(text: str) -> tuple[str, ...]:
	return tuple(v.strip() for v in text.split(',') if v.strip())


def _common_args() -> ArgumentParser:
	"""
	Flags shared by every subcommand; unset flags are left out of the namespace so a --config file can supply them
	"""
	p = ArgumentParser(add_help=False, argument_default=SUPPRESS)

	g = p.add_argument_group('run')
	g.add_argument('--config', type=Path, help='Re-run from a config.json written by an earlier run; other flags override it')
	g.add_argument('--out', help='Output directory (default: out)')
	g.add_argument('--seed', type=int, help='Seed for all randomness (default: 0)')
	g.add_argument('--jobs', type=int, help='Worker processes for dataset- and grid-parallel commands (default: 1)')

	g = p.add_argument_group('inputs')
	g.add_argument('--model', help='Model manifest path')
	g.add_argument('--dataset', help="'synthetic:KIND[:n=400,shape=1x8x8,pixels=2]' or 'idx:IMAGES[,LABELS]'")
	g.add_argument('--index', type=int, help='Sample index for single-input commands (default: 0)')
	g.add_argument('--limit', type=int, help='Use only the first N samples')
	g.add_argument('--class-index', dest='class_index', type=int, help='Class to explain (default: predicted class)')

	g = p.add_argument_group('methods')
	g.add_argument('--method')
	g.add_argument('--methods', type=_strs, help='Comma-separated methods')
	g.add_argument('--sparsity', type=_floats, help='Comma-separated sparsities (default: 0.9)')
	g.add_argument('--steps', type=int, help='IntGrad steps (default: 50)')
	g.add_argument('--mode', choices=('layer', 'neuron'), help='IntGrad scaling granularity (default: layer)')

	g = p.add_argument_group('training')
	g.add_argument('--hidden', type=_ints, help='Dense hidden layer widths (default: 16,16)')
	g.add_argument('--conv', type=_ints, help='Conv layer channel counts (default: none)')
	g.add_argument('--pool', type=int, help='Average pool size after the conv layers')
	g.add_argument('--epochs', type=int)
	g.add_argument('--lr', type=float)
	g.add_argument('--momentum', type=float)
	g.add_argument('--batch-size', dest='batch_size', type=int)
	g.add_argument('--optimizer', choices=('sgd', 'momentum'))
	g.add_argument('--loss', choices=('cross_entropy', 'mse'))
	g.add_argument('--test-fraction', dest='test_fraction', type=float)

	g = p.add_argument_group('pruning')
	g.add_argument('--chunk', type=int, help='Greedy pruning chunk size (default: max(1, N // 100))')
	g.add_argument('--gamma', type=float, help='DGR sparsity weight')
	g.add_argument('--dgr-lr', dest='dgr_lr', type=float)
	g.add_argument('--iterations', type=int, help='DGR iterations')
	g.add_argument('--init', choices=('one', 'random'), help='DGR gate init')
	g.add_argument('--dgr-loss', dest='dgr_loss', choices=('mse', 'cross_entropy'))

	g = p.add_argument_group('evaluation')
	g.add_argument('--smooth', action='store_true', help='Morphological opening of every map')
	g.add_argument('--kernel', type=int, help='Opening kernel size (default: 3)')
	g.add_argument('--reduction', choices=('abs', 'signed'))
	g.add_argument('--fill', choices=('mean', 'zero'), help='LeRF fill value (default: mean)')
	g.add_argument('--samples', type=int, help='Linear region verification samples (default: 64)')
	g.add_argument('--shrink', type=float, help='Linear region verification shrink (default: 0.01)')
	g.add_argument('--percentiles', type=_ints, help='ROAR percentiles (default: 10,30,50,70,90)')
	g.add_argument('--seeds-per-cell', dest='seeds_per_cell', type=int)

	return p


def parse_args(argv=None):
	p = ArgumentParser(description='Critical neuron pathways: selection, linearity, attribution and evaluation')

	p.set_defaults(verbosity=0)
	mx = p.add_mutually_exclusive_group()
	mx.add_argument('-v', action='store_const', dest='verbosity', const=1, help='Verbose')
	mx.add_argument('--vv', action='store_const', dest='verbosity', const=2, help='Extra verbose')

	common = _common_args()
	sub = p.add_subparsers(dest='command', required=True)
	for name in COMMANDS:
		sub.add_parser(name, parents=[common], argument_default=SUPPRESS)

	args = p.parse_args(argv)

	return p, args


def build_config(args) -> RunConfig:
	values = dict()
	if getattr(args, 'config', None) is not None:
		values.update(json.loads(Path(args.config).read_text()))

	for key, value in vars(args).items():
		if key not in ('config', 'verbosity'):
			values[key] = value

	return RunConfig.from_dict(values)


def main(argv=None) -> int:
	p, args = parse_args(argv)

	logging_utils.init_logging(
		stream_level=logging.DEBUG if (args.verbosity >= 2) else logging.INFO,
	)

	try:
		cfg = build_config(args)
		out = Path(cfg.out)
		out.mkdir(parents=True, exist_ok=True)

		logging_utils.init_logging(
			stream_level=logging.DEBUG if (args.verbosity >= 2) else logging.INFO,
			file_path=out / LOG_FILENAME,
		)
		logger.info(f'Resolved config:\n{cfg.to_json().rstrip()}')

		run(cfg)

	except (ValueError, OSError, FloatingPointError) as ex:
		logger.error(f'{type(ex).__name__}: {ex}')
		p.print_usage(sys.stderr)
		return 2

	except Exception:
		logger.exception('Unexpected error')
		return 1

	return 0


if __name__ == "__main__":
	sys.exit(main())
