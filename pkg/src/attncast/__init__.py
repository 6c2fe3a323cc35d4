"""Attention forecasting toolkit for KV-cache critical-token selection.

Subpackages cover the full pipeline: binary attention traces (`trace`),
a theory-driven synthetic trace generator (`synth`), block-wise score
compression (`compress`), a small trainable convolutional forecaster
(`predictor`), budgeted token selection (`selector`), reference scoring
baselines (`baselines`), the recovery/accuracy harness (`evaluation`),
and a prefetch latency simulator (`prefetchsim`).
"""

__version__ = "0.1.0"

from attncast.errors import (
    AttncastError,
    ConfigError,
    CorruptionError,
    FormatError,
    MetricError,
    NumericError,
    ParameterError,
    StateError,
    TrainingError,
    UnsupportedError,
    ValidationError,
)

__all__ = [
    "AttncastError",
    "ConfigError",
    "CorruptionError",
    "FormatError",
    "MetricError",
    "NumericError",
    "ParameterError",
    "StateError",
    "TrainingError",
    "UnsupportedError",
    "ValidationError",
    "__version__",
]
