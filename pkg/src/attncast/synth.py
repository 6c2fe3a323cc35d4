"""Synthetic attention-trace generator driven by a drifting query/key model.

Queries and keys are unit-norm random walks sharing increment directions, so
nearby positions stay aligned; rotary position encoding turns the
alignment into a near-diagonal score band, and additive logit boosts inject
repeated-position and periodic structure before the per-step softmax. The
resulting traces carry the rotated query/key tensors, so retrieval scorers
and the raw-score drift check can run against them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from attncast.errors import ConfigError, ParameterError, UnsupportedError, ValidationError
from attncast.trace import AttentionTrace, TraceHeader

# Logit-space constants of the generation recipe. The raw rotary score of
# unit vectors lives in [-1, 1]; the gain spreads it so softmax rows
# concentrate the way real attention does, and the boosts are sized to put
# boosted positions decisively above the diagonal band.
LOGIT_GAIN = 8.0
REACCESS_BOOST = 8.0
SEASONAL_BOOST = 6.0
SEASONAL_COLUMN_FRACTION = 0.08


@dataclass
class SynthConfig:
    head_dim: int
    prefill_len: int
    decode_steps: int
    query_drift: float
    key_drift: float
    rope_base: float = 10000.0
    seasonal_period: int = 0
    reaccess_positions: frozenset[int] = field(default_factory=frozenset)
    rng_seed: int = 0
    num_layers: int = 1
    num_heads: int = 1

    def __post_init__(self):
        self.reaccess_positions = frozenset(int(p) for p in self.reaccess_positions)

    def validate(self) -> None:
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ConfigError("head_dim must be a positive even integer")
        if self.prefill_len < 1 or self.decode_steps < 1:
            raise ConfigError("prefill_len and decode_steps must be positive")
        if not (0.0 <= self.query_drift <= 1.0) or not (0.0 <= self.key_drift <= 1.0):
            raise ConfigError("drift magnitudes must lie in [0, 1]")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be positive")
        if self.seasonal_period != 0 and self.seasonal_period < 2:
            raise ConfigError("seasonal_period must be 0 or >= 2")
        if any(p < 0 for p in self.reaccess_positions):
            raise ConfigError("reaccess positions must be non-negative")
        if self.num_layers < 1 or self.num_heads < 1:
            raise ConfigError("num_layers and num_heads must be >= 1")


# ---------------------------------------------------------------------------
# Query/key random walks and similarity measurement
# ---------------------------------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _walk(start: np.ndarray, increments: np.ndarray, drift: float) -> np.ndarray:
    """Unit-norm random walk: v_{p+1} = normalize(v_p + drift * g_p)."""
    out = np.empty((len(increments) + 1, start.size), dtype=np.float64)
    out[0] = start
    if drift == 0.0:
        out[1:] = start
        return out
    cur = start
    for p, g in enumerate(increments):
        cur = _unit(cur + drift * g)
        out[p + 1] = cur
    return out


def gen_query_sequence(config: SynthConfig, length: int | None = None) -> np.ndarray:
    """Generate the query walk alone, for similarity measurements.

    Returns a (length, head_dim) array of unit vectors; length defaults to
    prefill_len + decode_steps.
    """
    config.validate()
    if length is None:
        length = config.prefill_len + config.decode_steps
    rng = np.random.default_rng(np.random.SeedSequence(config.rng_seed))
    start = _unit(rng.standard_normal(config.head_dim))
    incs = rng.standard_normal((length - 1, config.head_dim))
    incs /= np.linalg.norm(incs, axis=1, keepdims=True)
    return _walk(start, incs, config.query_drift)


def lag_autocorrelation(vectors: np.ndarray, lag: int) -> float:
    """Mean cosine similarity between vectors ``lag`` steps apart."""
    if lag < 1 or lag >= len(vectors):
        raise ParameterError("lag must satisfy 1 <= lag < len(vectors)")
    a = vectors[:-lag]
    b = vectors[lag:]
    cos = np.einsum("ij,ij->i", a, b) / (
        np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    )
    return float(np.mean(cos))


def calibrate_query_drift(
    target_rho: float = 0.87,
    head_dim: int = 64,
    steps: int = 2000,
    rng_seed: int = 0,
    iterations: int = 20,
    tolerance: float = 0.005,
) -> float:
    """Bisect the drift magnitude until the lag-1 cosine autocorrelation of
    the generated query walk hits ``target_rho``.

    The drift-to-autocorrelation map has no closed form; it is monotone
    decreasing, so bisection on [0, 1] converges quickly.
    """

    def rho_of(drift: float) -> float:
        cfg = SynthConfig(
            head_dim=head_dim,
            prefill_len=1,
            decode_steps=steps - 1,
            query_drift=drift,
            key_drift=drift,
            rng_seed=rng_seed,
        )
        return lag_autocorrelation(gen_query_sequence(cfg, length=steps), 1)

    lo, hi = 0.0, 1.0
    if rho_of(hi) > target_rho:
        return hi
    drift = 0.5
    for _ in range(iterations):
        drift = 0.5 * (lo + hi)
        rho = rho_of(drift)
        if abs(rho - target_rho) <= tolerance:
            break
        if rho > target_rho:
            lo = drift
        else:
            hi = drift
    return drift


# ---------------------------------------------------------------------------
# Rotary position encoding
# ---------------------------------------------------------------------------


def rope_frequencies(head_dim: int, rope_base: float) -> np.ndarray:
    """Per-group rotation frequencies: base**(-2(m-1)/d) for m = 1..d/2."""
    if head_dim < 2 or head_dim % 2 != 0:
        raise ParameterError("head_dim must be a positive even integer")
    m = np.arange(head_dim // 2, dtype=np.float64)
    return rope_base ** (-2.0 * m / head_dim)


def rotate_position(vec: np.ndarray, position: int, freqs: np.ndarray) -> np.ndarray:
    """Rotate each 2-D group of ``vec`` by position * frequency."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.size != 2 * freqs.size:
        raise ParameterError("vector length must equal twice the frequency count")
    angles = position * freqs
    cos, sin = np.cos(angles), np.sin(angles)
    x, y = vec[0::2], vec[1::2]
    out = np.empty_like(vec)
    out[0::2] = x * cos - y * sin
    out[1::2] = x * sin + y * cos
    return out


def rope_score_with_freqs(q, k, i: int, j: int, freqs: np.ndarray) -> float:
    """Rotary score of q at position i against k at position j.

    Equals sum_m ||q_m|| ||k_m|| cos(phi_m + (j - i) * theta_m); computed by
    rotating each vector to its position and taking the plain dot product.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 1:
        raise ParameterError("q and k must be 1-D vectors of equal length")
    if q.size % 2 != 0:
        raise ParameterError("vectors must have even dimension")
    return float(np.dot(rotate_position(q, i, freqs), rotate_position(k, j, freqs)))


def rope_score(q, k, i: int, j: int, rope_base: float) -> float:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size % 2 != 0:
        raise ParameterError("vectors must have even dimension")
    return rope_score_with_freqs(q, k, i, j, rope_frequencies(q.size, rope_base))


# ---------------------------------------------------------------------------
# Trace generation
# ---------------------------------------------------------------------------


def _draw_spans(rng: np.random.Generator, prefill_len: int, budget: int) -> set[int]:
    span = max(1, min(16, budget))
    cols: set[int] = set()
    while len(cols) < budget:
        start = int(rng.integers(0, max(1, prefill_len - span)))
        cols.update(range(start, min(start + span, prefill_len)))
    return cols


def seasonal_columns(config: SynthConfig, layer: int = 0) -> set[int]:
    """Deterministic prompt columns carrying the periodic boost.

    Boosted columns form a few contiguous spans (periodic attention lights up
    bands of neighboring positions, not isolated tokens). Each layer draws
    its own spans: attention structure diverges across depth far more than
    across steps, so deeper layers must not mirror layer 0.
    """
    if config.seasonal_period == 0:
        return set()
    rng = np.random.default_rng(
        np.random.SeedSequence(config.rng_seed, spawn_key=(0xC01, layer))
    )
    budget = max(1, int(round(SEASONAL_COLUMN_FRACTION * config.prefill_len)))
    return _draw_spans(rng, config.prefill_len, budget)


def layer_reaccess_positions(config: SynthConfig, layer: int) -> np.ndarray:
    """Repeated-access positions for one layer: layer 0 keeps the configured
    set verbatim; deeper layers re-draw the same number of positions."""
    base = np.array(sorted(config.reaccess_positions), dtype=np.intp)
    if layer == 0 or base.size == 0:
        return base
    rng = np.random.default_rng(
        np.random.SeedSequence(config.rng_seed, spawn_key=(0xD1F, layer))
    )
    limit = max(1, config.prefill_len)
    drawn = rng.choice(limit, size=min(base.size, limit), replace=False)
    return np.sort(drawn.astype(np.intp))


def _head_seed(config: SynthConfig, layer: int, head: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(config.rng_seed, spawn_key=(layer, head))


def gen_trace(
    config: SynthConfig,
    keep_prefill_rows: int = 64,
    logit_gain: float = LOGIT_GAIN,
    reaccess_boost: float = REACCESS_BOOST,
    seasonal_boost: float = SEASONAL_BOOST,
    noise_scale: float = 0.0,
) -> AttentionTrace:
    """Generate a full attention trace with q/k tensors attached.

    Per (layer, head), queries and keys follow unit-norm random walks with
    shared increment directions (magnitudes query_drift and key_drift), are
    rotated to their positions, and scored against each other. Repeated-
    position and periodic boosts are added in logit space so every row stays
    a proper distribution after the softmax. ``noise_scale`` adds i.i.d.
    per-step logit jitter, which makes single-row heuristics chase transient
    spikes the way they do on real attention.
    """
    config.validate()
    if any(p >= config.prefill_len + config.decode_steps for p in config.reaccess_positions):
        raise ConfigError("reaccess positions must fall inside the context")
    d = config.head_dim
    total = config.prefill_len + config.decode_steps
    n_prefill_rows = min(keep_prefill_rows, config.prefill_len)
    first_offset = -(n_prefill_rows - 1)
    freqs = rope_frequencies(d, config.rope_base)
    steps = range(first_offset, config.decode_steps + 1)

    header = TraceHeader(
        num_layers=config.num_layers,
        num_heads=config.num_heads,
        prefill_len=config.prefill_len,
        num_decode_steps=config.decode_steps,
        has_qk=True,
        head_dim=d,
        first_step_offset=first_offset,
    )

    positions = np.arange(total, dtype=np.float64)
    angles = positions[:, None] * freqs[None, :]
    cos_all, sin_all = np.cos(angles), np.sin(angles)

    def rotate_block(vecs: np.ndarray, pos_idx: np.ndarray) -> np.ndarray:
        x, y = vecs[:, 0::2], vecs[:, 1::2]
        c, s = cos_all[pos_idx], sin_all[pos_idx]
        out = np.empty_like(vecs)
        out[:, 0::2] = x * c - y * s
        out[:, 1::2] = x * s + y * c
        return out

    all_rows: list[list[list[np.ndarray]]] = []
    all_q: list[list[np.ndarray]] = []
    all_k: list[list[np.ndarray]] = []
    for layer in range(config.num_layers):
        layer_rows: list[list[np.ndarray]] = []
        layer_q: list[np.ndarray] = []
        layer_k: list[np.ndarray] = []
        reaccess = layer_reaccess_positions(config, layer)
        season_cols = np.array(sorted(seasonal_columns(config, layer)), dtype=np.intp)
        for head in range(config.num_heads):
            rng = np.random.default_rng(_head_seed(config, layer, head))
            start = _unit(rng.standard_normal(d))
            incs = rng.standard_normal((total - 1, d))
            incs /= np.linalg.norm(incs, axis=1, keepdims=True)
            keys = _walk(start, incs, config.key_drift)
            queries = _walk(start, incs, config.query_drift)

            keys_rot = rotate_block(keys, np.arange(total))
            q_positions = np.array(
                [config.prefill_len + s - 1 for s in steps], dtype=np.intp
            )
            queries_rot = rotate_block(queries[q_positions], q_positions)

            raw = queries_rot @ keys_rot.T  # (rows, total)
            logits = logit_gain * raw
            if noise_scale > 0.0:
                logits += noise_scale * rng.standard_normal(logits.shape)
            if reaccess.size:
                logits[:, reaccess] += reaccess_boost
            if config.seasonal_period >= 2 and season_cols.size:
                # phase staggers by one step per layer: attention patterns
                # drift apart across depth much faster than across steps
                on_rows = np.array(
                    [(s - layer) % config.seasonal_period == 0 for s in steps], dtype=bool
                )
                logits[np.ix_(on_rows, season_cols)] += seasonal_boost

            head_rows: list[np.ndarray] = []
            for idx, s in enumerate(steps):
                t_len = config.prefill_len + s
                z = logits[idx, :t_len]
                z = z - z.max()
                expz = np.exp(z)
                probs = expz / expz.sum()
                row = probs.astype(np.float32)
                row /= np.float32(row.sum(dtype=np.float64))
                head_rows.append(row)
            layer_rows.append(head_rows)
            layer_q.append(queries_rot.astype(np.float32))
            layer_k.append(keys_rot.astype(np.float32))
        all_rows.append(layer_rows)
        all_q.append(layer_q)
        all_k.append(layer_k)

    trace = AttentionTrace(header=header, rows=all_rows, queries=all_q, keys=all_k)
    trace.validate()
    return trace


# ---------------------------------------------------------------------------
# Raw-score drift bound
# ---------------------------------------------------------------------------


def drift_bound_check(trace: AttentionTrace) -> float:
    """Verify the raw-score drift bound on every consecutive step pair.

    For stored (rotated) queries and keys, the raw-score change over the
    shared first t entries is dq @ K[:t].T, whose Euclidean norm is bounded
    by ||dq||_2 * sigma_max(K[:t]). Returns the worst observed ratio
    ||dA|| / (||dq|| * sigma_max + 1e-6); raises if the bound is violated.
    """
    h = trace.header
    if not h.has_qk:
        raise UnsupportedError("drift bound check needs a trace with q/k tensors")
    worst = 0.0
    slack = 1e-6
    for layer in range(h.num_layers):
        for head in range(h.num_heads):
            q_block = trace.queries[layer][head].astype(np.float64)
            keys = trace.keys[layer][head].astype(np.float64)
            gram = keys[: h.row_len(h.first_step_offset)].T @ keys[: h.row_len(h.first_step_offset)]
            for idx, step in enumerate(h.steps):
                if step == h.num_decode_steps:
                    break
                t_len = h.row_len(step)
                dq = q_block[idx + 1] - q_block[idx]
                dq_norm = float(np.linalg.norm(dq))
                sigma = math.sqrt(max(float(np.linalg.eigvalsh(gram)[-1]), 0.0))
                da_norm = float(np.linalg.norm(keys[:t_len] @ dq))
                denom = dq_norm * sigma + slack
                if da_norm > denom:
                    raise ValidationError(
                        f"drift bound violated at (layer {layer}, head {head}, step {step}): "
                        f"{da_norm:.6g} > {denom:.6g}"
                    )
                ratio = 0.0 if dq_norm == 0.0 else da_norm / denom
                worst = max(worst, ratio)
                # extend the Gram matrix with the key revealed at the next step
                nxt = keys[t_len]
                gram = gram + np.outer(nxt, nxt)
    return worst
