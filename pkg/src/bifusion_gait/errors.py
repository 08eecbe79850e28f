"""Normalized error types shared by every module."""

from __future__ import annotations

from typing import Literal

ErrorCategory = Literal[
    "dimension",
    "configuration",
    "batch_size",
    "index",
    "contract",
    "tape_consumed",
    "sampling",
    "load",
    "input_length",
    "render",
    "normalization",
    "protocol",
    "format",
    "io",
]


class GaitError(Exception):
    """Error carrying a user-readable message and a machine-readable category."""

    category: ErrorCategory = "contract"

    def __init__(self, message: str, category: ErrorCategory | None = None) -> None:
        super().__init__(message)
        self.message = message
        if category is not None:
            self.category = category

    def one_line(self) -> str:
        """Render the error as the single line the CLI prints on failure."""
        compact = " ".join(self.message.split()).replace('"', "'")
        return f'error category={self.category} message="{compact}"'


class DimensionError(GaitError):
    category = "dimension"


class ConfigurationError(GaitError):
    category = "configuration"


class BatchSizeError(GaitError):
    category = "batch_size"


class LabelIndexError(GaitError):
    category = "index"


class ContractError(GaitError):
    category = "contract"


class TapeConsumedError(GaitError):
    category = "tape_consumed"


class SamplingError(GaitError):
    category = "sampling"


class LoadError(GaitError):
    category = "load"


class InputLengthError(GaitError):
    category = "input_length"


class RenderError(GaitError):
    category = "render"


class NormalizationError(GaitError):
    category = "normalization"


class ProtocolError(GaitError):
    category = "protocol"


class FormatError(GaitError):
    category = "format"
