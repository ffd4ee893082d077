"""
Structured logging for the toolchain.

One handler, attached to the `nidslabel` package logger, writes to stderr;
module loggers propagate to it. Two output styles:

- LOG_FORMAT=json or APP_ENV=production: one JSON object per line
- otherwise: "time - logger - LEVEL - [run_id] - message"

Artifacts never go through logging, so log output cannot disturb them.

Usage in any module:
    from nidslabel.core.logging import get_logger
    logger = get_logger(__name__)

Per-rule context goes in `extra`: logger.warning("...", extra={"sid": 2019284}).
"""

import json
import logging
import os
import re
import sys
from datetime import UTC, datetime
from typing import Any

from nidslabel.core.run_context import get_run_id

PACKAGE_LOGGER = "nidslabel"

# Record attributes copied into JSON entries when a call site passes them in `extra`
CONTEXT_FIELDS = ("sid", "ordinal", "command", "label")

_SECRETS = (
    (
        re.compile(r"(password|secret|token|api_key|apikey)=\S+", re.IGNORECASE),
        r"\1=***REDACTED***",
    ),
    (re.compile(r"(llm_api_key|x-api-key)\s*[:=]\s*\S+", re.IGNORECASE), r"\1=***REDACTED***"),
    (re.compile(r"(Bearer\s+)\S+", re.IGNORECASE), r"\1***REDACTED***"),
    (re.compile(r"(://[^:/\s]+:)[^@\s]+(@)"), r"\1***\2"),
)


def _redact(message: str) -> str:
    """Mask API keys, bearer tokens and URL passwords."""
    for pattern, replacement in _SECRETS:
        message = pattern.sub(replacement, message)
    return message


def _wants_json() -> bool:
    if os.getenv("LOG_FORMAT", "").lower() == "json":
        return True
    return os.getenv("APP_ENV", "development").lower() == "production"


class JSONFormatter(logging.Formatter):
    """timestamp, level, logger, message, run_id, context fields and exception info."""

    def format(self, record: logging.LogRecord) -> str:
        entry: dict[str, Any] = {
            "timestamp": datetime.fromtimestamp(record.created, tz=UTC).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": _redact(record.getMessage()),
        }
        run_id = get_run_id()
        if run_id:
            entry["run_id"] = run_id
        for name in CONTEXT_FIELDS:
            if hasattr(record, name):
                entry[name] = getattr(record, name)

        if record.exc_info and record.exc_info[1]:
            exc_type, exc, _ = record.exc_info
            entry["exception"] = {
                "type": exc_type.__name__ if exc_type else "Unknown",
                "message": _redact(str(exc)),
            }
        return json.dumps(entry, default=str)


class RedactingFormatter(logging.Formatter):
    """Human-readable lines with the run id filled in and secrets masked."""

    def format(self, record: logging.LogRecord) -> str:
        record.run_id = get_run_id() or "-"  # type: ignore[attr-defined]
        return _redact(super().format(record))


class _StderrHandler(logging.StreamHandler):  # type: ignore[type-arg]
    """Writes to whatever sys.stderr is at emit time."""

    def __init__(self) -> None:
        super().__init__(sys.stderr)

    @property  # type: ignore[override]
    def stream(self) -> Any:
        return sys.stderr

    @stream.setter
    def stream(self, _value: Any) -> None:
        pass


def _level(name: str | None) -> int:
    value = (name or os.getenv("LOG_LEVEL") or "INFO").upper()
    return getattr(logging, value, logging.INFO)


def _package_logger() -> logging.Logger:
    root = logging.getLogger(PACKAGE_LOGGER)
    if not root.handlers:
        handler = _StderrHandler()
        if _wants_json():
            handler.setFormatter(JSONFormatter())
        else:
            handler.setFormatter(
                RedactingFormatter(
                    fmt="%(asctime)s - %(name)s - %(levelname)s - [%(run_id)s] - %(message)s",
                    datefmt="%Y-%m-%d %H:%M:%S",
                )
            )
        root.addHandler(handler)
        root.setLevel(_level(None))
    return root


def configure_logging(level: str | None = None) -> None:
    """
    Set the toolchain log level.

    Args:
        level: Level name such as "DEBUG"; None falls back to LOG_LEVEL, then INFO
    """
    _package_logger().setLevel(_level(level))


def get_logger(name: str) -> logging.Logger:
    """
    Logger for a module; output goes through the package handler.

    Args:
        name: Module name, typically __name__
    """
    _package_logger()
    return logging.getLogger(name)
