"""Exception types shared across the package."""

from __future__ import annotations


class CroboError(Exception):
    """Base class for all package errors."""


class ConfigError(CroboError):
    """A configuration value is out of range or inconsistent."""


class InputError(CroboError):
    """An operation received inputs violating its preconditions."""


class DatasetWriteError(CroboError):
    """Dataset serialization failed; message carries the offending path."""


class NumericError(CroboError):
    """A numeric invariant broke (non-finite loss/gradients, singular solve)."""
