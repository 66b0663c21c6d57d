"""Helper utilities for the syntax-augmented attention toolkit."""

import json
import logging
import math
import sys
from pathlib import Path
from typing import IO, Any, Dict, Optional, Union

# Loggers configured by setup_logging; modules log through getLogger(__name__).
PACKAGE_LOGGERS = ("syntax_attention", "core", "config", "utils", "ui")
METRIC_KEY_ORDER = ("step", "l_task", "l_dist", "l_depth", "accuracy")


def setup_logging(log_level: str = "INFO", stream: Optional[IO[str]] = None) -> logging.Logger:
    """Set up application logging."""
    level = getattr(logging, log_level.upper())
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    for name in PACKAGE_LOGGERS:
        logger = logging.getLogger(name)
        logger.setLevel(level)
        if not logger.handlers:
            handler = logging.StreamHandler(stream)
            handler.setFormatter(formatter)
            logger.addHandler(handler)
        else:
            for handler in logger.handlers:
                if isinstance(handler, logging.StreamHandler):
                    handler.setStream(stream or sys.stderr)
        logger.propagate = False
    return logging.getLogger("syntax_attention")


def format_duration(seconds: float) -> str:
    """Format duration in seconds to human-readable string."""
    seconds = int(seconds)
    if seconds < 60:
        return f"{seconds}s"
    elif seconds < 3600:
        return f"{seconds // 60}m {seconds % 60}s"
    hours = seconds // 3600
    minutes = (seconds % 3600) // 60
    return f"{hours}h {minutes}m"


def format_metric(value: Optional[float], places: int = 4) -> str:
    """Fixed-point rendering; None and NaN print as ``nan``."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "nan"
    return f"{value:.{places}f}"


def order_metric_record(record: Dict[str, Any]) -> Dict[str, Any]:
    """Fixed metric keys first, remaining tags after them in sorted order."""
    ordered = {key: record.get(key) for key in METRIC_KEY_ORDER}
    for key in sorted(k for k in record if k not in METRIC_KEY_ORDER):
        ordered[key] = record[key]
    return ordered


class MetricsWriter:
    """JSON-lines metric log; one object per line, no timestamps."""

    def __init__(self, target: Union[str, Path, IO[str]]):
        if isinstance(target, (str, Path)):
            path = Path(target)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._stream = path.open("w", encoding="utf-8")
            self._owned = True
            self.path: Optional[Path] = path
        else:
            self._stream = target
            self._owned = False
            self.path = None
        self.records = 0

    def write(self, record: Dict[str, Any]) -> None:
        self._stream.write(json.dumps(order_metric_record(record)) + "\n")
        self._stream.flush()
        self.records += 1

    def close(self) -> None:
        if self._owned and not self._stream.closed:
            self._stream.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> bool:
        self.close()
        return False
