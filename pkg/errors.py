"""
Exception hierarchy shared by every module.

The CLI maps these to exit codes (see main.py): usage problems exit 1, data
problems exit 2, numeric failures exit 3.
"""
from __future__ import annotations

from typing import Any, Dict, Optional


class PriseError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(PriseError):
    """Invalid flags, config values or subcommand."""


class DataError(PriseError):
    """A record, file or artifact could not be parsed or failed validation."""

    def __init__(
        self,
        message: str,
        *,
        record_id: Optional[str] = None,
        field: Optional[str] = None,
        line: Optional[int] = None,
    ):
        self.detail = message
        self.record_id = record_id
        self.field = field
        self.line = line
        parts = []
        if line is not None:
            parts.append(f"line {line}")
        if record_id is not None:
            parts.append(f"record {record_id!r}")
        if field is not None:
            parts.append(f"field {field}")
        prefix = f"[{', '.join(parts)}] " if parts else ""
        super().__init__(f"{prefix}{message}")


class DimensionError(DataError):
    """Operand shapes do not agree."""


class EmptyImageError(DataError):
    """An image has no persons, so no graph can be built."""


class NumericError(PriseError):
    """Non-finite loss/gradient or a failed numeric identity check."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        if self.diagnostics:
            detail = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} ({detail})"
        super().__init__(message)
