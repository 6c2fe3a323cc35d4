"""Budgeted critical-token selection driven by the forecaster.

Each decode step compresses the observed attention row, slides it into the
history window, forecasts the next compressed row, and picks the top
blocks for the middle of the budget. The earliest ``sink_tokens`` positions
and the newest ``local_tokens`` positions are always retained; their block
ranges are masked before the top-K so the middle budget is never spent on
ranges already kept. Every ``calibration_period`` steps the dense row
replaces the sparsely observed one, stopping feedback drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from attncast.compress import expand_indices, max_pool
from attncast.errors import ConfigError, ParameterError, StateError
from attncast.predictor import PredictorWeights, forward, stack_history


@dataclass
class SelectorConfig:
    budget: int
    block_size: int = 16
    history: int = 64
    calibration_period: int = 5
    sink_tokens: int = 64
    local_tokens: int = 64
    update_interval: int = 1

    def validate(self) -> None:
        if self.budget < self.sink_tokens + self.local_tokens:
            raise ConfigError("budget must cover the sink and local allocations")
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if self.calibration_period < 1:
            raise ConfigError("calibration_period must be >= 1")
        if self.history < 1:
            raise ConfigError("history must be >= 1")
        if self.update_interval < 1:
            raise ConfigError("update_interval must be >= 1")
        if self.sink_tokens < 0 or self.local_tokens < 0:
            raise ConfigError("sink/local allocations must be non-negative")

    @property
    def middle_blocks(self) -> int:
        """How many whole blocks the middle budget affords (rounded down)."""
        return (self.budget - self.sink_tokens - self.local_tokens) // self.block_size


@dataclass
class SelectorState:
    compressed_history: list[np.ndarray] = field(default_factory=list)
    step_counter: int = 0
    middle_tokens: set[int] = field(default_factory=set)
    selection: set[int] = field(default_factory=set)


def init_state(config: SelectorConfig, prefill_rows=()) -> SelectorState:
    """Seed the history with (up to) the newest ``history - 1`` prompt rows;
    the first step() call pushes the final prompt row itself."""
    config.validate()
    state = SelectorState()
    for row in prefill_rows:
        state.compressed_history.append(max_pool(row, config.block_size).values)
    keep = config.history - 1
    state.compressed_history = state.compressed_history[-keep:] if keep > 0 else []
    return state


def topk(values, k: int) -> set[int]:
    """Indices of the k largest values; ties break toward the lower index."""
    values = np.asarray(values, dtype=np.float64)
    if k > values.size:
        raise ParameterError(f"k={k} exceeds vector length {values.size}")
    if k <= 0:
        return set()
    order = np.lexsort((np.arange(values.size), -values))
    return {int(i) for i in order[:k]}


def _covering_blocks(start: int, stop: int, block_size: int) -> range:
    """Block indices overlapping token range [start, stop)."""
    if stop <= start:
        return range(0)
    return range(start // block_size, -(-stop // block_size))


def step(
    state: SelectorState,
    config: SelectorConfig,
    weights: PredictorWeights | None,
    observed_row,
    full_row=None,
) -> tuple[SelectorState, set[int]]:
    """Advance one decode step and return the selection for the next step.

    ``observed_row`` is the attention row as computed under the current
    sparse selection (zeros at unselected positions); ``full_row``, when
    supplied on a calibration step (step counter divisible by the
    calibration period), replaces it in the stored history. The returned
    set covers positions [0, t+1) where t is the observed row length.
    """
    config.validate()
    observed_row = np.asarray(observed_row, dtype=np.float64)
    t = observed_row.size
    if t < 1:
        raise StateError("observed row must be non-empty")

    calibrate = state.step_counter % config.calibration_period == 0
    source = full_row if (calibrate and full_row is not None) else observed_row
    source = np.asarray(source, dtype=np.float64)
    if source.size != t:
        raise StateError("dense row length must match the observed row")
    compressed = max_pool(source, config.block_size)
    state.compressed_history.append(compressed.values)
    if len(state.compressed_history) > config.history:
        del state.compressed_history[: len(state.compressed_history) - config.history]

    next_len = t + 1
    sink = set(range(min(config.sink_tokens, next_len)))
    local = set(range(max(0, next_len - config.local_tokens), next_len))

    if state.step_counter % config.update_interval == 0:
        k_blocks = config.middle_blocks
        if k_blocks > 0:
            if weights is None:
                raise StateError("middle budget requires forecaster weights")
            width = len(compressed.values)
            history = stack_history(state.compressed_history, config.history, width)
            predicted = forward(weights, history)
            masked = predicted.astype(np.float64, copy=True)
            for b in _covering_blocks(0, min(config.sink_tokens, next_len), config.block_size):
                if b < width:
                    masked[b] = -np.inf
            for b in _covering_blocks(
                max(0, next_len - config.local_tokens), next_len, config.block_size
            ):
                if b < width:
                    masked[b] = -np.inf
            available = int(np.sum(masked > -np.inf))
            chosen = topk(masked, min(k_blocks, available))
            state.middle_tokens = expand_indices(chosen, config.block_size, t)
        else:
            state.middle_tokens = set()

    selection = sink | local | state.middle_tokens
    if len(selection) > config.budget:
        raise StateError("selection exceeded the budget")  # guarded by construction
    state.selection = selection
    state.step_counter += 1
    return state, selection
