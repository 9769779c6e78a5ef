"""Logging setup for pglab commands.

Besides the package logger, ``py.warnings`` gets the same handlers so numpy
floating-point warnings (overflow in a softmax update, a singular solve) land
in the run log next to the iteration that caused them.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

from pglab.config import LoggingSettings

PACKAGE_LOGGER = "pglab"
WARNINGS_LOGGER = "py.warnings"


def _build_handlers(settings: LoggingSettings, level: int) -> list[logging.Handler]:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if settings.file:
        log_path = Path(settings.file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_path, encoding="utf-8"))

    formatter = logging.Formatter(settings.format)
    for handler in handlers:
        handler.setLevel(level)
        handler.setFormatter(formatter)
    return handlers


def setup_logging(settings: LoggingSettings, verbose: bool = False) -> logging.Logger:
    """Configure the package logger and captured warnings.

    Args:
        settings: The ``logging`` section of the experiment config.
        verbose: If True, log at DEBUG whatever the configured level.

    Returns:
        The package logger.

    Raises:
        ValueError: If the configured level is not a logging level name.
    """
    level_name = "DEBUG" if verbose else settings.level.upper()
    level = logging.getLevelNamesMapping().get(level_name)
    if level is None:
        raise ValueError(f"Unknown log level {settings.level!r}")

    handlers = _build_handlers(settings, level)
    logging.captureWarnings(True)
    for name in (PACKAGE_LOGGER, WARNINGS_LOGGER):
        logger = logging.getLogger(name)
        for old in list(logger.handlers):
            old.close()
            logger.removeHandler(old)
        logger.setLevel(level)
        for handler in handlers:
            logger.addHandler(handler)

    package_logger = logging.getLogger(PACKAGE_LOGGER)
    package_logger.debug(f"Logging at {logging.getLevelName(level)}")
    return package_logger
