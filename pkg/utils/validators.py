"""Input validation utilities for command-line values."""

import re
from pathlib import Path
from typing import List, Optional, Sequence, Union

from core.errors import UsageError

_INDEX_LIST = re.compile(r"^\s*\d+\s*(,\s*\d+\s*)*$")


class ValidationError(UsageError):
    """A command-line value failed validation."""
    pass


def parse_index_list(value: str) -> List[int]:
    """Parse ``"0,3"`` into ``[0, 3]``; the empty string is the empty list."""
    if value is None or value.strip() == "":
        return []
    if not _INDEX_LIST.match(value):
        raise ValidationError(f"expected comma-separated non-negative integers, got {value!r}")
    return sorted({int(part) for part in value.split(",")})


def _number(name: str, value: Union[str, int, float]) -> float:
    if isinstance(value, bool):
        raise ValidationError(f"{name} must be a number, got {value!r}")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a number, got {value!r}") from None


def validate_delta(delta: Union[str, int, float]) -> int:
    """Mask radius: an integer >= 1."""
    value = _number("delta", delta)
    if not value.is_integer() or value < 1:
        raise ValidationError(f"delta must be an integer >= 1, got {delta}")
    return int(value)


def validate_eps(eps: Union[str, float]) -> float:
    """Finite-difference step within [1e-6, 1e-4]."""
    value = _number("eps", eps)
    if not 1e-6 <= value <= 1e-4:
        raise ValidationError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    return value


def validate_positive(name: str, value: Optional[int]) -> Optional[int]:
    if value is not None and value < 1:
        raise ValidationError(f"{name} must be >= 1, got {value}")
    return value


def validate_input_path(path: Union[str, Path], what: str = "input") -> Path:
    """An existing, readable file."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{what} file not found: {path}")
    return path


def validate_choice(name: str, value: str, choices: Sequence[str]) -> str:
    if value not in choices:
        raise ValidationError(f"{name} must be one of {', '.join(choices)}; got {value!r}")
    return value
