"""Attention trace data model and the `.att1` binary container.

A trace stores, for every (layer, head), one post-softmax attention row per
step. Step index 0 is the final prompt-processing row; negative indices are
earlier prompt rows retained so forecasters can warm up their history window;
positive indices are decode steps. The row at step ``s`` has
``prefill_len + s`` entries.

Byte layout (all integers little-endian):

    magic             4 bytes, b"ATT1"
    version           u16, currently 1
    num_layers        u32
    num_heads         u32
    prefill_len       u32
    num_decode_steps  u32
    has_qk            u8 flag (1 when query/key tensors are appended)
    head_dim          u32 (0 when has_qk = 0)
    first_step_offset i32 (earliest stored step index, <= 0)

followed by the rows in layer-major, head-second, step-third order, each
prefixed by its u32 length, followed (when has_qk = 1) by one query vector
per stored row and one key vector per context position, per (layer, head),
again layer-major: queries as a (num_rows, head_dim) float32 block, then
keys as a (prefill_len + num_decode_steps, head_dim) float32 block.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from attncast.errors import CorruptionError, FormatError, ValidationError

MAGIC = b"ATT1"
VERSION = 1
HEADER_STRUCT = struct.Struct("<4sHIIIIBIi")
HEADER_SIZE = HEADER_STRUCT.size  # 31 bytes
ROW_SUM_TOL = 1e-4
FILE_EXTENSION = ".att1"


@dataclass
class TraceHeader:
    num_layers: int
    num_heads: int
    prefill_len: int
    num_decode_steps: int
    has_qk: bool = False
    head_dim: int = 0
    first_step_offset: int = 0

    def validate(self) -> None:
        if self.num_layers < 1 or self.num_heads < 1:
            raise ValidationError("trace needs at least one layer and head")
        if self.prefill_len < 1:
            raise ValidationError("prefill_len must be >= 1")
        if self.num_decode_steps < 0:
            raise ValidationError("num_decode_steps must be >= 0")
        if self.first_step_offset > 0:
            raise ValidationError("first_step_offset must be <= 0")
        if self.prefill_len + self.first_step_offset < 1:
            raise ValidationError("first_step_offset reaches before the first prompt token")
        if self.has_qk and self.head_dim < 1:
            raise ValidationError("has_qk traces must declare head_dim >= 1")
        if not self.has_qk and self.head_dim != 0:
            raise ValidationError("head_dim must be 0 when q/k tensors are absent")

    @property
    def steps(self) -> range:
        """Stored step indices, oldest first."""
        return range(self.first_step_offset, self.num_decode_steps + 1)

    @property
    def rows_per_head(self) -> int:
        return self.num_decode_steps - self.first_step_offset + 1

    @property
    def total_len(self) -> int:
        """Context length after the last decode step."""
        return self.prefill_len + self.num_decode_steps

    def row_len(self, step: int) -> int:
        return self.prefill_len + step


@dataclass
class AttentionTrace:
    header: TraceHeader
    # rows[layer][head][k] is the float32 row for step header.steps[k]
    rows: list[list[list[np.ndarray]]]
    # queries[layer][head] is (rows_per_head, head_dim); keys[layer][head] is
    # (total_len, head_dim); both empty lists when has_qk is false
    queries: list[list[np.ndarray]] = field(default_factory=list)
    keys: list[list[np.ndarray]] = field(default_factory=list)

    def row(self, layer: int, head: int, step: int) -> np.ndarray:
        return self.rows[layer][head][step - self.header.first_step_offset]

    def query(self, layer: int, head: int, step: int) -> np.ndarray:
        return self.queries[layer][head][step - self.header.first_step_offset]

    def head_keys(self, layer: int, head: int) -> np.ndarray:
        return self.keys[layer][head]

    def validate(self) -> None:
        h = self.header
        h.validate()
        if len(self.rows) != h.num_layers:
            raise ValidationError("row block count does not match num_layers")
        for layer, per_layer in enumerate(self.rows):
            if len(per_layer) != h.num_heads:
                raise ValidationError(f"layer {layer}: head count mismatch")
            for head, per_head in enumerate(per_layer):
                if len(per_head) != h.rows_per_head:
                    raise ValidationError(
                        f"(layer {layer}, head {head}): expected "
                        f"{h.rows_per_head} rows, found {len(per_head)}"
                    )
                for k, row in enumerate(per_head):
                    step = h.first_step_offset + k
                    if row.dtype != np.float32 or row.ndim != 1:
                        raise ValidationError(
                            f"(layer {layer}, head {head}, step {step}): rows must be 1-D float32"
                        )
                    if len(row) != h.row_len(step):
                        raise ValidationError(
                            f"(layer {layer}, head {head}, step {step}): length "
                            f"{len(row)} != {h.row_len(step)}"
                        )
                    if not np.all(np.isfinite(row)) or np.any(row < 0):
                        raise ValidationError(
                            f"(layer {layer}, head {head}, step {step}): scores must be finite and non-negative"
                        )
                    total = float(np.sum(row, dtype=np.float64))
                    if abs(total - 1.0) > ROW_SUM_TOL:
                        raise ValidationError(
                            f"(layer {layer}, head {head}, step {step}): row sums to {total:.6f}, not 1"
                        )
        if h.has_qk:
            if len(self.queries) != h.num_layers or len(self.keys) != h.num_layers:
                raise ValidationError("q/k blocks must cover every layer")
            for layer in range(h.num_layers):
                if len(self.queries[layer]) != h.num_heads or len(self.keys[layer]) != h.num_heads:
                    raise ValidationError(f"layer {layer}: q/k blocks must cover every head")
                for head in range(h.num_heads):
                    q = self.queries[layer][head]
                    k = self.keys[layer][head]
                    if q.shape != (h.rows_per_head, h.head_dim):
                        raise ValidationError(
                            f"(layer {layer}, head {head}): query block shape {q.shape}"
                        )
                    if k.shape != (h.total_len, h.head_dim):
                        raise ValidationError(
                            f"(layer {layer}, head {head}): key block shape {k.shape}"
                        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttentionTrace):
            return NotImplemented
        if self.header != other.header:
            return False
        for mine, theirs in zip(self.rows, other.rows):
            for rows_a, rows_b in zip(mine, theirs):
                if len(rows_a) != len(rows_b):
                    return False
                for a, b in zip(rows_a, rows_b):
                    if not np.array_equal(a, b):
                        return False
        if self.header.has_qk:
            for blk_a, blk_b in ((self.queries, other.queries), (self.keys, other.keys)):
                for mine, theirs in zip(blk_a, blk_b):
                    for a, b in zip(mine, theirs):
                        if not np.array_equal(a, b):
                            return False
        return True


def write_trace(trace: AttentionTrace, destination) -> int:
    """Serialize a validated trace into a binary sink; returns bytes written."""
    trace.validate()
    h = trace.header
    written = 0
    written += destination.write(
        HEADER_STRUCT.pack(
            MAGIC,
            VERSION,
            h.num_layers,
            h.num_heads,
            h.prefill_len,
            h.num_decode_steps,
            1 if h.has_qk else 0,
            h.head_dim,
            h.first_step_offset,
        )
    )
    len_struct = struct.Struct("<I")
    for per_layer in trace.rows:
        for per_head in per_layer:
            for row in per_head:
                written += destination.write(len_struct.pack(len(row)))
                written += destination.write(row.astype("<f4", copy=False).tobytes())
    if h.has_qk:
        for layer in range(h.num_layers):
            for head in range(h.num_heads):
                written += destination.write(
                    trace.queries[layer][head].astype("<f4", copy=False).tobytes()
                )
                written += destination.write(
                    trace.keys[layer][head].astype("<f4", copy=False).tobytes()
                )
    return written


def read_trace(source) -> AttentionTrace:
    """Inverse of write_trace; validates invariants on load."""
    raw = source.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise FormatError("stream shorter than a trace header")
    magic, version, n_layers, n_heads, prefill, decode, qk_flag, head_dim, offset = (
        HEADER_STRUCT.unpack(raw)
    )
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    header = TraceHeader(
        num_layers=n_layers,
        num_heads=n_heads,
        prefill_len=prefill,
        num_decode_steps=decode,
        has_qk=bool(qk_flag),
        head_dim=head_dim,
        first_step_offset=offset,
    )
    header.validate()
    len_struct = struct.Struct("<I")
    rows: list[list[list[np.ndarray]]] = []
    for layer in range(n_layers):
        per_layer: list[list[np.ndarray]] = []
        for head in range(n_heads):
            per_head: list[np.ndarray] = []
            for step in header.steps:
                where = f"(layer {layer}, head {head}, step {step})"
                raw_len = source.read(4)
                if len(raw_len) < 4:
                    raise CorruptionError(f"truncated before row length at {where}")
                (row_len,) = len_struct.unpack(raw_len)
                if row_len != header.row_len(step):
                    raise CorruptionError(
                        f"row length {row_len} != {header.row_len(step)} at {where}"
                    )
                payload = source.read(4 * row_len)
                if len(payload) < 4 * row_len:
                    raise CorruptionError(f"truncated mid-row at {where}")
                per_head.append(np.frombuffer(payload, dtype="<f4").copy())
            per_layer.append(per_head)
        rows.append(per_layer)
    queries: list[list[np.ndarray]] = []
    keys: list[list[np.ndarray]] = []
    if header.has_qk:
        q_count = header.rows_per_head * head_dim
        k_count = header.total_len * head_dim
        for layer in range(n_layers):
            q_layer: list[np.ndarray] = []
            k_layer: list[np.ndarray] = []
            for head in range(n_heads):
                where = f"(layer {layer}, head {head})"
                q_raw = source.read(4 * q_count)
                if len(q_raw) < 4 * q_count:
                    raise CorruptionError(f"truncated query block at {where}")
                k_raw = source.read(4 * k_count)
                if len(k_raw) < 4 * k_count:
                    raise CorruptionError(f"truncated key block at {where}")
                q_layer.append(
                    np.frombuffer(q_raw, dtype="<f4").reshape(header.rows_per_head, head_dim).copy()
                )
                k_layer.append(
                    np.frombuffer(k_raw, dtype="<f4").reshape(header.total_len, head_dim).copy()
                )
            queries.append(q_layer)
            keys.append(k_layer)
    trailing = source.read(1)
    if trailing:
        raise CorruptionError("trailing bytes after the declared trace content")
    trace = AttentionTrace(header=header, rows=rows, queries=queries, keys=keys)
    trace.validate()
    return trace


def write_trace_file(trace: AttentionTrace, path) -> int:
    with open(path, "wb") as fh:
        return write_trace(trace, fh)


def read_trace_file(path) -> AttentionTrace:
    with open(path, "rb") as fh:
        return read_trace(fh)


def trace_to_bytes(trace: AttentionTrace) -> bytes:
    buf = io.BytesIO()
    write_trace(trace, buf)
    return buf.getvalue()


def trace_from_bytes(data: bytes) -> AttentionTrace:
    return read_trace(io.BytesIO(data))
