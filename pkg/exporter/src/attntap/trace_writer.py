"""Standalone writer for the `.att1` attention-trace container.

Implements the published byte layout directly (all integers little-endian):
magic "ATT1", u16 version 1, u32 num_layers / num_heads / prefill_len /
num_decode_steps, u8 has_qk, u32 head_dim, i32 first_step_offset; then one
u32-length-prefixed float32 row per (layer, head, step) in layer-major
order, steps ascending from first_step_offset; then, when has_qk is set,
per (layer, head): a (rows, head_dim) float32 query block followed by a
(prefill_len + num_decode_steps, head_dim) float32 key block.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ATT1"
VERSION = 1
HEADER = struct.Struct("<4sHIIIIBIi")


def write_att1(
    path,
    rows: list[list[list[np.ndarray]]],
    prefill_len: int,
    num_decode_steps: int,
    first_step_offset: int,
    queries: list[list[np.ndarray]] | None = None,
    keys: list[list[np.ndarray]] | None = None,
) -> int:
    """Write rows[layer][head][idx] (idx 0 = step first_step_offset)."""
    num_layers = len(rows)
    num_heads = len(rows[0])
    has_qk = queries is not None and keys is not None
    head_dim = int(queries[0][0].shape[1]) if has_qk else 0
    expected_rows = num_decode_steps - first_step_offset + 1

    written = 0
    with open(path, "wb") as fh:
        written += fh.write(
            HEADER.pack(
                MAGIC,
                VERSION,
                num_layers,
                num_heads,
                prefill_len,
                num_decode_steps,
                1 if has_qk else 0,
                head_dim,
                first_step_offset,
            )
        )
        length = struct.Struct("<I")
        for per_layer in rows:
            for per_head in per_layer:
                if len(per_head) != expected_rows:
                    raise ValueError(
                        f"expected {expected_rows} rows per head, got {len(per_head)}"
                    )
                for idx, row in enumerate(per_head):
                    want = prefill_len + first_step_offset + idx
                    row = np.asarray(row, dtype="<f4")
                    if row.shape != (want,):
                        raise ValueError(f"row {idx} must have length {want}")
                    written += fh.write(length.pack(want))
                    written += fh.write(row.tobytes())
        if has_qk:
            total_len = prefill_len + num_decode_steps
            for layer in range(num_layers):
                for head in range(num_heads):
                    q = np.asarray(queries[layer][head], dtype="<f4")
                    k = np.asarray(keys[layer][head], dtype="<f4")
                    if q.shape != (expected_rows, head_dim):
                        raise ValueError(f"query block shape {q.shape}")
                    if k.shape != (total_len, head_dim):
                        raise ValueError(f"key block shape {k.shape}")
                    written += fh.write(q.tobytes())
                    written += fh.write(k.tobytes())
    return written
