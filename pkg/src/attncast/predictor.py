"""Spatiotemporal forecaster for compressed attention histories.

A small convolutional network maps an H x W history of block-compressed
attention rows to the predicted next compressed row of length W:

    3x3 conv (1 -> 16 channels, zero pad 1), ReLU
    3x3 conv (16 -> 32 channels, zero pad 1), ReLU
    mean over the history axis (collapses H to 1)
    1x1 conv over the width axis (32 -> 1 channels)

Because nothing depends on H or W except through convolution and averaging,
one weight set serves any history depth, any row width, and every
(layer, head) pair. Forward, backward, and the Adam loop are implemented
directly in numpy; gradients are exact and checked against finite
differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from attncast.compress import max_pool
from attncast.errors import (
    FormatError,
    NumericError,
    ParameterError,
    TrainingError,
)
from attncast.trace import AttentionTrace

CONV1_OUT = 16
CONV2_OUT = 32
KERNEL = 3
PARAM_COUNT = (
    CONV1_OUT * (KERNEL * KERNEL + 1)
    + CONV2_OUT * (CONV1_OUT * KERNEL * KERNEL + 1)
    + (CONV2_OUT + 1)
)  # 160 + 4640 + 33 = 4833

WEIGHTS_MAGIC = b"APW1"


@dataclass
class PredictorWeights:
    w1: np.ndarray  # (16, 1, 3, 3)
    b1: np.ndarray  # (16,)
    w2: np.ndarray  # (32, 16, 3, 3)
    b2: np.ndarray  # (32,)
    w3: np.ndarray  # (32,)
    b3: np.ndarray  # scalar, shape ()

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors())

    def tensors(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)

    def copy(self) -> "PredictorWeights":
        return PredictorWeights(*(t.copy() for t in self.tensors()))

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def validate(self) -> None:
        shapes = [
            (CONV1_OUT, 1, KERNEL, KERNEL),
            (CONV1_OUT,),
            (CONV2_OUT, CONV1_OUT, KERNEL, KERNEL),
            (CONV2_OUT,),
            (CONV2_OUT,),
            (),
        ]
        for tensor, shape in zip(self.tensors(), shapes):
            if tensor.shape != shape:
                raise ParameterError(f"weight tensor shape {tensor.shape} != {shape}")
            if not np.all(np.isfinite(tensor)):
                raise NumericError("weights contain non-finite values")

    @classmethod
    def from_flat(cls, flat: np.ndarray) -> "PredictorWeights":
        if flat.size != PARAM_COUNT:
            raise ParameterError(f"expected {PARAM_COUNT} parameters, got {flat.size}")
        out = []
        cursor = 0
        for shape in [
            (CONV1_OUT, 1, KERNEL, KERNEL),
            (CONV1_OUT,),
            (CONV2_OUT, CONV1_OUT, KERNEL, KERNEL),
            (CONV2_OUT,),
            (CONV2_OUT,),
            (),
        ]:
            size = int(np.prod(shape)) if shape else 1
            out.append(np.array(flat[cursor : cursor + size], dtype=np.float64).reshape(shape))
            cursor += size
        return cls(*out)


def init_weights(rng_seed: int = 0) -> PredictorWeights:
    """He-style initialization, biases at zero."""
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed, spawn_key=(0xE11,)))
    w1 = rng.standard_normal((CONV1_OUT, 1, KERNEL, KERNEL)) * np.sqrt(2.0 / 9.0)
    w2 = rng.standard_normal((CONV2_OUT, CONV1_OUT, KERNEL, KERNEL)) * np.sqrt(
        2.0 / (CONV1_OUT * 9.0)
    )
    w3 = rng.standard_normal(CONV2_OUT) * np.sqrt(2.0 / CONV2_OUT)
    return PredictorWeights(
        w1=w1,
        b1=np.zeros(CONV1_OUT),
        w2=w2,
        b2=np.zeros(CONV2_OUT),
        w3=w3,
        b3=np.zeros(()),
    )


@dataclass
class AttentionHistory:
    """H x W grid of compressed rows, oldest row first."""

    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ParameterError("history grid must be 2-D (steps x blocks)")

    @property
    def depth(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]


@dataclass
class TrainSample:
    input: AttentionHistory
    target: np.ndarray  # length W


def stack_history(rows, depth: int, width: int) -> AttentionHistory:
    """Stack up to ``depth`` compressed-value vectors into an H x W grid.

    Rows are right-padded with zeros to the common width; missing leading
    steps become zero rows at the oldest end.
    """
    grid = np.zeros((depth, width), dtype=np.float64)
    tail = list(rows)[-depth:]
    for i, values in enumerate(tail):
        values = np.asarray(values, dtype=np.float64)
        offset = depth - len(tail) + i
        grid[offset, : min(width, values.size)] = values[:width]
    return AttentionHistory(grid=grid)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (C*9, H*W) patch matrix for a 3x3 kernel with pad 1."""
    c, h, w = x.shape
    padded = np.zeros((c, h + 2, w + 2), dtype=x.dtype)
    padded[:, 1:-1, 1:-1] = x
    windows = np.lib.stride_tricks.sliding_window_view(padded, (KERNEL, KERNEL), axis=(1, 2))
    # windows: (C, H, W, 3, 3) -> (C, 3, 3, H, W) -> (C*9, H*W)
    return windows.transpose(0, 3, 4, 1, 2).reshape(c * KERNEL * KERNEL, h * w)


def _col2im(cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of _im2col: scatter (C*9, H*W) patch gradients back to (C, H, W)."""
    grad_pad = np.zeros((c, h + 2, w + 2), dtype=cols.dtype)
    cols = cols.reshape(c, KERNEL, KERNEL, h, w)
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            grad_pad[:, ki : ki + h, kj : kj + w] += cols[:, ki, kj]
    return grad_pad[:, 1:-1, 1:-1]


def _forward_cached(weights: PredictorWeights, grid: np.ndarray) -> dict:
    h, w = grid.shape
    x = grid[None, :, :]
    cols1 = _im2col(x)
    s1 = (weights.w1.reshape(CONV1_OUT, -1) @ cols1 + weights.b1[:, None]).reshape(
        CONV1_OUT, h, w
    )
    a1 = np.maximum(s1, 0.0)
    cols2 = _im2col(a1)
    s2 = (weights.w2.reshape(CONV2_OUT, -1) @ cols2 + weights.b2[:, None]).reshape(
        CONV2_OUT, h, w
    )
    a2 = np.maximum(s2, 0.0)
    z = a2.mean(axis=1)  # (32, W)
    out = weights.w3 @ z + weights.b3
    return {
        "cols1": cols1,
        "s1": s1,
        "cols2": cols2,
        "s2": s2,
        "z": z,
        "out": out,
        "shape": (h, w),
    }


def forward(weights: PredictorWeights, history: AttentionHistory) -> np.ndarray:
    """Predict the next compressed row; output length equals history width."""
    weights.validate()
    if not np.all(np.isfinite(history.grid)):
        raise NumericError("history contains non-finite values")
    return _forward_cached(weights, history.grid)["out"]


def backward(
    weights: PredictorWeights, history: AttentionHistory, target: np.ndarray
) -> tuple[float, PredictorWeights]:
    """Loss and exact gradients of mean((forward - target)^2).

    The gradient container reuses PredictorWeights so parameter and
    gradient tensors stay shape-aligned for the optimizer.
    """
    weights.validate()
    target = np.asarray(target, dtype=np.float64)
    cache = _forward_cached(weights, history.grid)
    h, w = cache["shape"]
    if target.shape != (w,):
        raise ParameterError(f"target must have shape ({w},)")
    resid = cache["out"] - target
    loss = float(np.mean(resid**2))

    d_out = 2.0 * resid / w
    d_w3 = cache["z"] @ d_out
    d_b3 = np.array(d_out.sum())
    d_z = np.outer(weights.w3, d_out)  # (32, W)
    d_a2 = np.broadcast_to(d_z[:, None, :] / h, (CONV2_OUT, h, w))
    d_s2 = np.where(cache["s2"] > 0, d_a2, 0.0).reshape(CONV2_OUT, h * w)
    d_w2 = (d_s2 @ cache["cols2"].T).reshape(weights.w2.shape)
    d_b2 = d_s2.sum(axis=1)
    d_cols2 = weights.w2.reshape(CONV2_OUT, -1).T @ d_s2
    d_a1 = _col2im(d_cols2, CONV1_OUT, h, w)
    d_s1 = np.where(cache["s1"] > 0, d_a1, 0.0).reshape(CONV1_OUT, h * w)
    d_w1 = (d_s1 @ cache["cols1"].T).reshape(weights.w1.shape)
    d_b1 = d_s1.sum(axis=1)

    grads = PredictorWeights(w1=d_w1, b1=d_b1, w2=d_w2, b2=d_b2, w3=d_w3, b3=d_b3)
    return loss, grads


# ---------------------------------------------------------------------------
# Dataset packaging
# ---------------------------------------------------------------------------


def build_dataset(
    trace: AttentionTrace,
    history_steps: int,
    block_size: int,
    sample_ratio: float,
    rng_seed: int = 0,
    max_step: int | None = None,
) -> list[TrainSample]:
    """Package (history, next compressed row) pairs from a trace.

    For each decode step t that has a successor row, the input is the last
    ``history_steps`` compressed rows (zero rows fill the window before the
    earliest stored step), right-padded to the width of step t, and the
    target is the step-(t+1) row truncated to the first t positions (the
    newly generated position is never predicted) and compressed the same
    way. Only decode-phase rows become targets; a uniform ``sample_ratio``
    fraction of the candidates is kept. ``max_step`` optionally excludes
    targets beyond it, to hold out late steps.
    """
    if history_steps < 1:
        raise ParameterError("history_steps must be >= 1")
    if block_size < 1:
        raise ParameterError("block size must be >= 1")
    if not (0.0 < sample_ratio <= 1.0):
        raise ParameterError("sample_ratio must lie in (0, 1]")
    h = trace.header
    if h.num_decode_steps < 1:
        raise ParameterError("trace has no decode steps to learn from")
    last_t = h.num_decode_steps - 1 if max_step is None else min(max_step - 1, h.num_decode_steps - 1)

    candidates: list[tuple[int, int, int]] = []
    for layer in range(h.num_layers):
        for head in range(h.num_heads):
            for t in range(1, last_t + 1):
                candidates.append((layer, head, t))
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed, spawn_key=(0xDA7A,)))
    keep = max(1, int(round(sample_ratio * len(candidates))))
    chosen = sorted(
        rng.choice(len(candidates), size=min(keep, len(candidates)), replace=False).tolist()
    )

    samples: list[TrainSample] = []
    for idx in chosen:
        layer, head, t = candidates[idx]
        t_len = h.row_len(t)
        width = -(-t_len // block_size)
        window_rows = []
        for s in range(t - history_steps + 1, t + 1):
            if s < h.first_step_offset:
                continue
            window_rows.append(max_pool(trace.row(layer, head, s), block_size).values)
        history = stack_history(window_rows, history_steps, width)
        next_row = trace.row(layer, head, t + 1)[:t_len]
        target = max_pool(next_row, block_size).values
        samples.append(TrainSample(input=history, target=target))
    return samples


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _block_recovery_accuracy(weights: PredictorWeights, samples) -> float:
    """Mean recovered target mass of the predicted top blocks, relative to
    the best achievable at the same block count, in percent."""
    if not samples:
        return 0.0
    ratios = []
    for sample in samples:
        pred = _forward_cached(weights, sample.input.grid)["out"]
        w = pred.size
        k = max(1, int(round(0.1 * w)))
        order_pred = np.lexsort((np.arange(w), -pred))[:k]
        order_true = np.lexsort((np.arange(w), -sample.target))[:k]
        best = float(sample.target[order_true].sum())
        got = float(sample.target[order_pred].sum())
        ratios.append(1.0 if best <= 0 else got / best)
    return 100.0 * float(np.mean(ratios))


@dataclass
class EpochMetrics:
    epoch: int
    train_mse: float
    holdout_accuracy: float


def train(
    samples: list[TrainSample],
    epochs: int = 30,
    learning_rate: float = 1e-3,
    rng_seed: int = 0,
    batch_size: int = 32,
    holdout_fraction: float = 0.1,
) -> tuple[PredictorWeights, list[EpochMetrics]]:
    """Minibatch Adam on the MSE loss; returns the checkpoint with the best
    held-out block-recovery accuracy plus per-epoch metrics.

    The held-out split is a seeded 10% of the samples (all samples train
    when there are too few to split).
    """
    if not samples:
        raise ParameterError("cannot train on an empty sample set")
    if epochs < 1:
        raise ParameterError("epochs must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed, spawn_key=(0x7241,)))
    order = rng.permutation(len(samples))
    n_holdout = int(round(holdout_fraction * len(samples))) if len(samples) >= 10 else 0
    holdout = [samples[i] for i in order[:n_holdout]]
    train_set = [samples[i] for i in order[n_holdout:]]

    weights = init_weights(rng_seed)
    m = PredictorWeights(*(np.zeros_like(t) for t in weights.tensors()))
    v = PredictorWeights(*(np.zeros_like(t) for t in weights.tensors()))
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    adam_step = 0

    best_weights = weights.copy()
    best_accuracy = -np.inf
    metrics: list[EpochMetrics] = []
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(perm), batch_size):
            batch = [train_set[i] for i in perm[start : start + batch_size]]
            accum = [np.zeros_like(t) for t in weights.tensors()]
            batch_loss = 0.0
            for sample in batch:
                loss, grads = backward(weights, sample.input, sample.target)
                batch_loss += loss
                for acc, g in zip(accum, grads.tensors()):
                    acc += g
            batch_loss /= len(batch)
            if not np.isfinite(batch_loss):
                raise TrainingError(f"loss became non-finite in epoch {epoch}", epoch=epoch)
            losses.append(batch_loss)
            adam_step += 1
            corr1 = 1.0 - beta1**adam_step
            corr2 = 1.0 - beta2**adam_step
            for wt, mt, vt, g in zip(
                weights.tensors(), m.tensors(), v.tensors(), accum
            ):
                g = g / len(batch)
                mt *= beta1
                mt += (1 - beta1) * g
                vt *= beta2
                vt += (1 - beta2) * g * g
                wt -= learning_rate * (mt / corr1) / (np.sqrt(vt / corr2) + eps)
        eval_set = holdout if holdout else train_set
        accuracy = _block_recovery_accuracy(weights, eval_set)
        metrics.append(
            EpochMetrics(epoch=epoch, train_mse=float(np.mean(losses)), holdout_accuracy=accuracy)
        )
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best_weights = weights.copy()
    return best_weights, metrics


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------


def save_weights(weights: PredictorWeights, path) -> None:
    """Checkpoint: magic "APW1" then the tensors in declaration order as
    little-endian float32."""
    weights.validate()
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        for tensor in weights.tensors():
            fh.write(np.asarray(tensor, dtype="<f4").tobytes())


def load_weights(path) -> PredictorWeights:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WEIGHTS_MAGIC:
            raise FormatError(f"bad weights magic {magic!r}")
        flat = np.frombuffer(fh.read(4 * PARAM_COUNT), dtype="<f4")
        if flat.size != PARAM_COUNT:
            raise FormatError("weights file truncated")
        if fh.read(1):
            raise FormatError("trailing bytes after weight tensors")
    return PredictorWeights.from_flat(flat.astype(np.float64))


def metrics_to_csv(metrics: list[EpochMetrics]) -> str:
    lines = ["epoch,train_mse,holdout_accuracy"]
    for row in metrics:
        lines.append(f"{row.epoch},{row.train_mse:.8e},{row.holdout_accuracy:.4f}")
    return "\n".join(lines) + "\n"
