"""Shared exception types.

All failures that carry structure (step indices, field paths, probe
locations) raise one of these instead of bare ValueError so callers and
the CLI can map them to exit codes.
"""

from __future__ import annotations


class RoughFilterError(Exception):
    """Base class for package errors."""


class ConfigurationError(RoughFilterError):
    """Invalid configuration value, unknown field, or bad combination."""


class DimensionError(RoughFilterError):
    """Array shape inconsistent with declared dimensions."""


class BlowUpError(RoughFilterError):
    """State or weight left the numerically trusted range mid-solve."""

    def __init__(self, message: str, step: int, what: str):
        super().__init__(message)
        self.step = step
        self.what = what


class DegenerateMassError(RoughFilterError):
    """Unnormalized mass too small to divide by."""


class InvalidRunError(RoughFilterError):
    """A run whose output cannot be trusted (e.g. box exits in duality)."""


class CapabilityError(RoughFilterError):
    """Requested a feature outside the implemented scope."""
