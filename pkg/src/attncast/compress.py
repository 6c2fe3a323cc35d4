"""Block-wise attention compression and block-index expansion.

Rows are zero-padded at the end to a multiple of the block size and reduced
to one representative per block (the block maximum). Selected block indices
expand back to token ranges, clipped to the real row length so padding never
becomes a selected token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from attncast.errors import ParameterError


@dataclass(frozen=True)
class CompressedRow:
    values: np.ndarray  # float64, length ceil(original_len / block_size)
    block_size: int
    original_len: int

    def __len__(self) -> int:
        return len(self.values)


def max_pool(row, block_size: int) -> CompressedRow:
    """Zero-pad ``row`` to a block multiple and take per-block maxima."""
    if block_size < 1:
        raise ParameterError("block size must be >= 1")
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise ParameterError("row must be a non-empty 1-D vector")
    t = row.size
    n_blocks = -(-t // block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float64)
    padded[:t] = row
    values = padded.reshape(n_blocks, block_size).max(axis=1)
    return CompressedRow(values=values, block_size=block_size, original_len=t)


def expand_indices(block_indices, block_size: int, original_len: int) -> set[int]:
    """Union of token ranges covered by the given blocks, clipped to the row."""
    if block_size < 1:
        raise ParameterError("block size must be >= 1")
    if original_len < 1:
        raise ParameterError("original length must be >= 1")
    n_blocks = -(-original_len // block_size)
    tokens: set[int] = set()
    for b in block_indices:
        b = int(b)
        if b < 0 or b >= n_blocks:
            raise ParameterError(f"block index {b} out of range [0, {n_blocks})")
        start = b * block_size
        tokens.update(range(start, min(start + block_size, original_len)))
    return tokens
