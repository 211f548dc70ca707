import logging
import sys

from rdmd_lab.errors import ConfigError

LOGGER_NAME = "rdmd_lab"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"


def _resolve_level(level: int | str) -> int:
    if isinstance(level, int):
        return level
    resolved = logging.getLevelName(level.strip().upper())
    if not isinstance(resolved, int):
        raise ConfigError(f"unknown log level {level!r}")
    return resolved


def setup_logger(level: int | str = logging.INFO) -> logging.Logger:
    """Package logger writing to the current stdout.

    Repeat calls update the level and point the one handler at whatever
    ``sys.stdout`` is now, so each CLI invocation logs to its own stream.
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(_resolve_level(level))
    if logger.handlers:
        for handler in logger.handlers:
            if isinstance(handler, logging.StreamHandler):
                handler.setStream(sys.stdout)
        return logger
    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)
    return logger
