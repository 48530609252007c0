"""
Logging utilities for the L2D toolkit.

Console output goes through coloredlogs; runs can additionally log to a file,
optionally as one JSON object per line so training curves can be grepped.
"""

import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, MutableMapping, Optional, Tuple, Union

try:
    import coloredlogs
    HAS_COLOREDLOGS = True
except ImportError:
    HAS_COLOREDLOGS = False


ROOT_LOGGER_NAME = "l2d"

# Extra record attributes promoted into JSON output
_EXTRA_FIELDS = ("step", "loss", "lr", "arm", "seed", "task", "budget")


class JSONFormatter(logging.Formatter):
    """Formatter that outputs JSON structured logs."""

    def format(self, record: logging.LogRecord) -> str:
        log_data = {
            'timestamp': datetime.fromtimestamp(record.created).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno,
        }

        if record.exc_info:
            log_data['exception'] = self.formatException(record.exc_info)

        for field in _EXTRA_FIELDS:
            if hasattr(record, field):
                log_data[field] = getattr(record, field)

        return json.dumps(log_data, ensure_ascii=False)


def setup_logger(
    name: str = ROOT_LOGGER_NAME,
    level: str = "INFO",
    log_to_file: bool = False,
    log_dir: Optional[Union[str, Path]] = None,
    json_format: bool = False
) -> logging.Logger:
    """
    Set up a logger with console and optional file output.

    Args:
        name: Logger name
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_to_file: Whether to log to file
        log_dir: Directory for log files (default: ./artifacts/logs)
        json_format: Whether to use JSON formatting for file logs

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.handlers.clear()

    log_level = getattr(logging, level.upper(), logging.INFO)
    logger.setLevel(log_level)

    if HAS_COLOREDLOGS:
        coloredlogs.install(
            level=log_level,
            logger=logger,
            fmt='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
            datefmt='%H:%M:%S'
        )
    else:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(logging.Formatter(
            '%(asctime)s [%(levelname)s] %(name)s: %(message)s',
            datefmt='%H:%M:%S'
        ))
        logger.addHandler(console_handler)

    if log_to_file:
        log_dir = Path(log_dir) if log_dir is not None else Path("artifacts") / "logs"
        log_dir.mkdir(parents=True, exist_ok=True)

        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        suffix = "jsonl" if json_format else "log"
        log_file = log_dir / f"l2d_{timestamp}.{suffix}"

        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(log_level)

        if json_format:
            file_formatter: logging.Formatter = JSONFormatter()
        else:
            file_formatter = logging.Formatter(
                '%(asctime)s [%(levelname)s] %(name)s:%(funcName)s:%(lineno)d - %(message)s',
                datefmt='%Y-%m-%d %H:%M:%S'
            )

        file_handler.setFormatter(file_formatter)
        logger.addHandler(file_handler)

        logger.info(f"Logging to file: {log_file}")

    logger.propagate = False

    return logger


def get_logger(name: str) -> logging.Logger:
    """Get a child logger ``l2d.<name>``."""
    return logging.getLogger(f"{ROOT_LOGGER_NAME}.{name}")


class RunLoggerAdapter(logging.LoggerAdapter):
    """
    Logger adapter that stamps run context onto every record.

    Usage:
        adapter = RunLoggerAdapter(logger, {'arm': 'l2d', 'seed': 3})
        adapter.info("step done", extra={'step': 10, 'loss': 2.1})
    """

    def process(self, msg: Any,
                kwargs: MutableMapping[str, Any]) -> Tuple[Any, MutableMapping[str, Any]]:
        extra = dict(kwargs.get('extra') or {})
        extra.update(self.extra or {})
        kwargs['extra'] = extra
        return msg, kwargs
