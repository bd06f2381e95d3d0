"""Logging and expected errors for ssrl-desk.

structlog over the stdlib: a compact console line on stderr and a rotating
JSON-lines file under the platform log directory. stdout is reserved for
the JSON result each command prints. Configure once, at the CLI entry point.

Per-epoch training results are data files written by the pipeline, not
log records.
"""

from __future__ import annotations

import logging
import sys
from collections.abc import MutableMapping
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any

import structlog
from platformdirs import user_log_dir

APP_NAME = "ssrl-desk"
MAX_LOG_SIZE = 10 * 1024 * 1024
BACKUP_COUNT = 3

# Chatty while plot renders a PNG; kept in the file log only.
CONSOLE_MUTED_PREFIXES = ("matplotlib", "PIL.")


def default_log_file() -> Path:
    """``ssrl-desk.log`` in the platform log directory (created if missing)."""
    return Path(user_log_dir(APP_NAME, ensure_exists=True)) / f"{APP_NAME}.log"


def configure_logging(verbose: bool = False, json_log: str | None = "auto") -> None:
    """Install the console handler and, unless ``json_log`` is None, the file log.

    The console shows WARNING and above, or everything with ``verbose``;
    the file log always records DEBUG. ``json_log`` is a path or "auto"
    for `default_log_file`.
    """
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.DEBUG if verbose else logging.WARNING)
    console.setFormatter(
        structlog.stdlib.ProcessorFormatter(
            processor=_CompactConsoleRenderer(),
            foreign_pre_chain=[structlog.stdlib.add_log_level],
        )
    )
    console.addFilter(_mute_third_party)
    handlers: list[logging.Handler] = [console]

    if json_log:
        path = default_log_file() if json_log == "auto" else Path(json_log)
        file_handler = _json_file_handler(path)
        if file_handler is not None:
            handlers.append(file_handler)

    logging.basicConfig(level=logging.DEBUG, handlers=handlers, force=True)
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.format_exc_info,
            structlog.stdlib.ProcessorFormatter.wrap_for_formatter,
        ],
        wrapper_class=structlog.stdlib.BoundLogger,
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )


def _json_file_handler(path: Path) -> logging.Handler | None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        handler = RotatingFileHandler(
            path, maxBytes=MAX_LOG_SIZE, backupCount=BACKUP_COUNT, encoding="utf-8"
        )
    except OSError as e:
        print(f"Warning: Could not create log file at {path}: {e}", file=sys.stderr)
        return None
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(
        structlog.stdlib.ProcessorFormatter(
            processor=structlog.processors.JSONRenderer(),
            foreign_pre_chain=[
                structlog.stdlib.add_logger_name,
                structlog.stdlib.add_log_level,
                structlog.processors.TimeStamper(fmt="iso"),
            ],
        )
    )
    return handler


class _CompactConsoleRenderer:
    """``[level] event key=value ...``; the file log carries timestamps and logger names."""

    _OMIT_KEYS = {"timestamp", "logger"}

    def __call__(
        self, logger: Any, method_name: str, event_dict: MutableMapping[str, Any]
    ) -> str:
        level = event_dict.pop("level", method_name)
        event = event_dict.pop("event", "")
        extras = " ".join(
            f"{k}={_format_value(v)}" for k, v in event_dict.items() if k not in self._OMIT_KEYS
        )
        return f"[{level}] {event} {extras}" if extras else f"[{level}] {event}"


def _format_value(value: Any) -> str:
    # Metrics are floats; six significant digits keep console lines short.
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _mute_third_party(record: logging.LogRecord) -> bool:
    return not record.name.startswith(CONSOLE_MUTED_PREFIXES)


def get_logger(name: str) -> structlog.stdlib.BoundLogger:
    return structlog.get_logger(name)


class SSRLError(Exception):
    """Expected failure, shown as a clean one-line message without a traceback.

    The CLI group catches these, logs them and exits with ``exit_code``.
    """

    exit_code = 1


class ConfigError(SSRLError):
    """Invalid configuration, unknown keys, or mismatched shapes."""

    exit_code = 2


class NumericalError(SSRLError):
    """Non-finite values or degenerate vectors where a finite result is required."""

    exit_code = 3
