"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes: usage problems exit 2,
data/format problems exit 3, numeric/training problems exit 4.
"""

from __future__ import annotations


class AttncastError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(AttncastError):
    """A configuration value is missing, unknown, or inconsistent."""


class ParameterError(AttncastError):
    """An operation received an out-of-range or malformed argument."""


class ValidationError(AttncastError):
    """A data structure violates one of its invariants."""


class FormatError(AttncastError):
    """A byte stream does not start with a recognized header."""


class CorruptionError(AttncastError):
    """A byte stream is structurally valid but truncated or inconsistent."""


class UnsupportedError(AttncastError):
    """The operation needs data the input does not carry (e.g. q/k tensors)."""


class MetricError(AttncastError):
    """A metric is undefined for the given input (e.g. zero-mass row)."""


class StateError(AttncastError):
    """Mutable pipeline state is incompatible with the requested step."""


class NumericError(AttncastError):
    """Non-finite values encountered where finite math is required."""


class TrainingError(NumericError):
    """Training diverged; carries the epoch where the loss went non-finite."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
