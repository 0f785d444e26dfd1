"""
Plain-text key=value logging to stderr.
Lines look like: INFO event=train_step step=10 loss=1.23457
"""

import logging
import sys
from typing import Any

LOG_FORMAT = "%(levelname)s %(message)s"

_configured = False


def setup_logging(level: int = logging.INFO) -> None:
    """Install the stderr handler on the package root logger (idempotent)"""
    global _configured
    root = logging.getLogger("src")
    root.setLevel(level)
    if not _configured:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
        root.propagate = False
        _configured = True


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    text = str(value)
    if " " in text or text == "":
        return '"' + text.replace('"', '\\"') + '"'
    return text


def format_fields(**fields: Any) -> str:
    return " ".join(f"{key}={_format_value(value)}" for key, value in fields.items())


def log_event(logger: logging.Logger, event: str, level: int = logging.INFO, **fields: Any) -> None:
    if logger.isEnabledFor(level):
        logger.log(level, format_fields(event=event, **fields))
