"""Reference critical-token scorers sharing one budget contract.

Every selector returns a set of token indices no larger than the budget,
with ties broken toward the lower index so identical inputs always produce
identical sets. The harness in ``evaluation`` drives them step by step and
scores them against the true next row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from attncast.compress import expand_indices
from attncast.errors import ConfigError, ParameterError, UnsupportedError
from attncast.selector import topk

KINDS = (
    "streaming_llm",
    "h2o_plus",
    "snap_kv",
    "quest",
    "prev_token",
    "prev_layer",
    "oracle",
)


@dataclass
class BaselineConfig:
    kind: str
    budget: int
    window: int = 64  # accumulation window for h2o_plus / snap_kv
    block_size: int = 16  # quest only

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown baseline kind {self.kind!r}")
        if self.budget < 0:
            raise ConfigError("budget must be non-negative")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.block_size < 1:
            raise ConfigError("block size must be >= 1")


def select_streaming(t: int, budget: int) -> set[int]:
    """First half of the budget at the front, second half at the back."""
    if budget >= t:
        return set(range(t))
    head = budget // 2
    tail = budget - head
    return set(range(head)) | set(range(t - tail, t))


def _column_sums(history_rows) -> np.ndarray:
    """Columnwise sum of ragged rows aligned at position 0."""
    rows = [np.asarray(r, dtype=np.float64) for r in history_rows]
    if not rows:
        raise ParameterError("need at least one history row")
    width = max(len(r) for r in rows)
    sums = np.zeros(width, dtype=np.float64)
    for r in rows:
        sums[: len(r)] += r
    return sums


def select_h2o(history_rows, budget: int) -> set[int]:
    """Half the budget on the most recent tokens, half on the heaviest
    accumulated scorers outside that recent range."""
    sums = _column_sums(history_rows)
    t = len(history_rows[-1])
    if budget >= t:
        return set(range(t))
    recent_count = budget - budget // 2
    heavy_count = budget // 2
    recent = set(range(t - recent_count, t))
    candidates = sums[: t - recent_count]
    heavy = topk(candidates, min(heavy_count, candidates.size))
    return recent | heavy


class SnapKVSelector:
    """One-time prompt-window filtering; the kept set is frozen and the
    selection grows with every decoded token afterwards."""

    def __init__(self, prefill_window_rows, budget: int, prefill_len: int, window: int = 64):
        if budget < 0:
            raise ParameterError("budget must be non-negative")
        self.prefill_len = prefill_len
        window_len = min(window, len(prefill_window_rows))
        sums = _column_sums(list(prefill_window_rows)[-window_len:])
        sums = sums[:prefill_len]
        recent = set(range(max(0, prefill_len - window_len), prefill_len))
        heavy_budget = max(0, budget - len(recent))
        if budget >= prefill_len:
            self.frozen = set(range(prefill_len))
        else:
            candidates = sums[: max(0, prefill_len - window_len)]
            heavy = topk(candidates, min(heavy_budget, candidates.size))
            self.frozen = recent | heavy
        self.frozen = {i for i in self.frozen if i < prefill_len}

    def selection(self, t: int) -> set[int]:
        """Selection at context length t >= prefill_len."""
        grown = set(range(self.prefill_len, t))
        return {i for i in self.frozen if i < t} | grown


def select_quest(query, key_blocks, budget: int, block_size: int, t: int) -> set[int]:
    """Top blocks by the per-block min/max upper bound on the raw score."""
    query = np.asarray(query, dtype=np.float64)
    mins, maxs = key_blocks
    if mins.shape != maxs.shape or mins.ndim != 2:
        raise ParameterError("key summaries must be (blocks, dim) min/max arrays")
    upper = np.sum(np.maximum(query * mins, query * maxs), axis=1)
    k = min(budget // block_size, upper.size)
    if k == 0:
        return set()
    blocks = topk(upper, k)
    return expand_indices(blocks, block_size, t)


def quest_key_summaries(keys: np.ndarray, block_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-block channelwise min and max of the (rotated) key vectors."""
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise UnsupportedError("quest needs key tensors")
    t, d = keys.shape
    n_blocks = -(-t // block_size)
    mins = np.empty((n_blocks, d))
    maxs = np.empty((n_blocks, d))
    for b in range(n_blocks):
        chunk = keys[b * block_size : min((b + 1) * block_size, t)]
        mins[b] = chunk.min(axis=0)
        maxs[b] = chunk.max(axis=0)
    return mins, maxs


def select_prev(kind: str, reference_row, budget: int, t: int) -> set[int]:
    """Top-budget positions of a reference row (previous step or previous
    layer); falls back to the streaming split when no reference exists."""
    if kind not in ("prev_token", "prev_layer"):
        raise ParameterError(f"kind must be prev_token or prev_layer, got {kind!r}")
    if reference_row is None:
        return select_streaming(t, budget)
    reference_row = np.asarray(reference_row, dtype=np.float64)
    usable = reference_row[: min(t, reference_row.size)]
    k = min(budget, usable.size)
    return topk(usable, k)


def select_oracle(next_row, budget: int) -> set[int]:
    """Top-budget positions of the true next row."""
    next_row = np.asarray(next_row, dtype=np.float64)
    return topk(next_row, min(budget, next_row.size))
