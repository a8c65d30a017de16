#!/usr/bin/env python3

from os import PathLike
from pathlib import Path
from typing import Final
import logging

from colorama import Fore, Style


FORMAT = '%(levelname)s %(filename)s:%(lineno)d %(message)s'

LEVEL_FORMATS: Final = {
	logging.DEBUG: Style.DIM + FORMAT + Style.RESET_ALL,
	logging.INFO: FORMAT + Style.RESET_ALL,
	logging.WARNING: Fore.YELLOW + FORMAT + Style.RESET_ALL,
	logging.ERROR: Fore.RED + FORMAT + Style.RESET_ALL,
	logging.CRITICAL: Style.BRIGHT + Fore.RED + FORMAT + Style.RESET_ALL,
}

FORMATTERS: Final = {
	level: logging.Formatter(fmt) for level, fmt in LEVEL_FORMATS.items()
}


class CustomFormatter(logging.Formatter):
	def format(self, record):
		return FORMATTERS.get(record.levelno, FORMATTERS[logging.INFO]).format(record)


def init_logging(
		*,
		stream_level=logging.INFO,
		file_path: Path | PathLike | str | None = None,
		file_level=logging.DEBUG,
		):
	"""
	Colored stream logging, plus an uncolored log file if file_path is given

	Safe to call more than once; earlier handlers are replaced
	"""

	stream_handler = logging.StreamHandler()
	stream_handler.setLevel(stream_level)
	stream_handler.setFormatter(CustomFormatter())
	handlers = [stream_handler]

	root_level = stream_level

	if file_path is not None:
		file_handler = logging.FileHandler(file_path, mode='w', encoding='utf-8')
		file_handler.setLevel(file_level)
		file_handler.setFormatter(logging.Formatter(FORMAT))
		handlers.append(file_handler)
		root_level = min(root_level, file_level)

	logging.basicConfig(
		level=root_level,
		format=FORMAT,
		handlers=handlers,
		force=True,
	)
