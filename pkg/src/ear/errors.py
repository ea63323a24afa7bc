"""Exception types shared across the package."""
from __future__ import annotations


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. backward on a non-scalar)."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class FormatError(ValueError):
    """A binary tensor file or manifest failed validation."""


class IngestionError(ValueError):
    """Input data violated an ingestion invariant (dims, zero rows, missing files)."""


class AlignmentError(ValueError):
    """Prediction and ground-truth corpora do not cover the same video ids."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss; carries per-term diagnostics."""

    def __init__(self, message: str, step: int, terms: dict[str, float]):
        super().__init__(message)
        self.step = step
        self.terms = terms
