"""Deterministic fluid model of decode-time KV prefetching schedules.

Three schedules share one parameterization:

* ``cross_token`` — the whole next-token prefetch pipeline (prediction plus
  one batched sparse transfer) overlaps the full per-token compute of the
  current token; per-token latency is the larger of the two.
* ``cross_layer`` — prefetching still moves the sparse cache but each layer
  issues its own transfer inside a single layer's compute window, so the
  per-issue fixed cost is paid once per layer.
* ``full_offload`` — every layer fetches the entire context's KV, one layer
  ahead, with no prediction.

Latencies are milliseconds; bandwidth is bytes per millisecond. Prediction
cost is affine in the context length. Per-token compute is a constant
(layers x per-layer) unless a per-context override table is supplied, which
is what the table fitter produces.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from attncast.errors import ConfigError, ParameterError

SCHEDULES = ("cross_token", "cross_layer", "full_offload")

# Bundled reference per-token overhead measurements (ms) from a 32-layer
# 8B-class offloading deployment: context -> (predict, transfer, wait).
REFERENCE_BREAKDOWN: dict[int, tuple[float, float, float]] = {
    4096: (0.7, 2.3, 44.4),
    8192: (1.2, 3.9, 43.4),
    16384: (2.3, 7.6, 39.7),
    32768: (4.5, 13.2, 32.3),
}

DEFAULT_BYTES_PER_TOKEN_PER_LAYER = 4096.0  # 8 KV heads x 128 dim x 2 tensors x fp16
DEFAULT_NUM_LAYERS = 32
DEFAULT_BUDGET_FRACTION = 0.05


@dataclass
class SimConfig:
    num_layers: int
    per_layer_compute: float  # ms
    predict_base_ms: float  # prediction latency = base + per_token * n
    predict_per_token_ms: float
    bytes_per_token_per_layer: float
    pcie_bandwidth: float  # bytes per ms
    transfer_fixed_overhead: float  # ms per transfer issue
    budget: int  # tokens; ignored when budget_fraction > 0
    context_lengths: list[int]
    schedule: str = "cross_token"
    budget_fraction: float = 0.0  # when > 0, budget scales with context
    compute_ms_by_context: dict[int, float] = field(default_factory=dict)

    def validate(self) -> None:
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        positives = {
            "per_layer_compute": self.per_layer_compute,
            "bytes_per_token_per_layer": self.bytes_per_token_per_layer,
            "pcie_bandwidth": self.pcie_bandwidth,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.transfer_fixed_overhead < 0 or self.predict_base_ms < 0:
            raise ConfigError("fixed overheads must be non-negative")
        if self.predict_per_token_ms < 0:
            raise ConfigError("predict slope must be non-negative")
        if not self.context_lengths:
            raise ConfigError("context_lengths must be non-empty")
        if any(n < 1 for n in self.context_lengths):
            raise ConfigError("context lengths must be positive")
        if self.budget_fraction < 0 or self.budget_fraction > 1:
            raise ConfigError("budget_fraction must lie in [0, 1]")
        if self.budget_fraction == 0 and self.budget < 0:
            raise ConfigError("budget must be non-negative")

    def budget_at(self, context: int) -> float:
        if self.budget_fraction > 0:
            return self.budget_fraction * context
        return float(self.budget)

    def compute_ms(self, context: int) -> float:
        return self.compute_ms_by_context.get(
            context, self.num_layers * self.per_layer_compute
        )

    def predict_ms(self, context: int) -> float:
        return self.predict_base_ms + self.predict_per_token_ms * context


@dataclass
class SimPoint:
    context_length: int
    schedule: str
    predict_ms: float
    transfer_ms: float
    wait_ms: float
    stall_ms: float
    total_per_token_ms: float
    resident_kv_bytes: float
    speedup_vs_full_offload: float


@dataclass
class SimReport:
    points: list[SimPoint]

    def by_context(self, schedule: str | None = None) -> dict[int, SimPoint]:
        return {
            p.context_length: p
            for p in self.points
            if schedule is None or p.schedule == schedule
        }


def _schedule_point(config: SimConfig, schedule: str, context: int) -> tuple[float, ...]:
    """Returns (predict, transfer, wait, stall, total, resident_bytes)."""
    compute = config.compute_ms(context)
    volume_rate = config.bytes_per_token_per_layer * config.num_layers / config.pcie_bandwidth
    if schedule == "cross_token":
        predict = config.predict_ms(context)
        transfer = config.transfer_fixed_overhead + config.budget_at(context) * volume_rate
        resident = config.budget_at(context) * config.bytes_per_token_per_layer * config.num_layers
    elif schedule == "cross_layer":
        predict = config.predict_ms(context)
        transfer = (
            config.num_layers * config.transfer_fixed_overhead
            + config.budget_at(context) * volume_rate
        )
        resident = config.budget_at(context) * config.bytes_per_token_per_layer * config.num_layers
    elif schedule == "full_offload":
        predict = 0.0
        transfer = config.num_layers * config.transfer_fixed_overhead + context * volume_rate
        resident = context * config.bytes_per_token_per_layer * config.num_layers
    else:
        raise ConfigError(f"unknown schedule {schedule!r}")
    overhead = predict + transfer
    total = max(compute, overhead)
    wait = max(0.0, compute - overhead)
    stall = max(0.0, overhead - compute)
    return predict, transfer, wait, stall, total, resident


def simulate(config: SimConfig) -> SimReport:
    """Evaluate every schedule at every configured context length.

    The report always carries all three schedules so each point's speedup
    over full offload is well defined; ``config.schedule`` marks the
    schedule of interest for CSV consumers.
    """
    config.validate()
    points: list[SimPoint] = []
    for context in config.context_lengths:
        fo = _schedule_point(config, "full_offload", context)
        for schedule in SCHEDULES:
            predict, transfer, wait, stall, total, resident = _schedule_point(
                config, schedule, context
            )
            points.append(
                SimPoint(
                    context_length=context,
                    schedule=schedule,
                    predict_ms=predict,
                    transfer_ms=transfer,
                    wait_ms=wait,
                    stall_ms=stall,
                    total_per_token_ms=total,
                    resident_kv_bytes=resident,
                    speedup_vs_full_offload=fo[4] / total,
                )
            )
    return SimReport(points=points)


# ---------------------------------------------------------------------------
# Fitting the simulator to an observed overhead table
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    config: SimConfig
    predict_coefficients: tuple[float, float]  # (intercept ms, slope ms/token)
    transfer_coefficients: tuple[float, float]
    predict_residuals: dict[int, float]
    transfer_residuals: dict[int, float]


def _affine_fit(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float, np.ndarray]:
    design = np.stack([np.ones_like(xs), xs], axis=1)
    coef, *_ = np.linalg.lstsq(design, ys, rcond=None)
    residuals = ys - design @ coef
    return float(coef[0]), float(coef[1]), residuals


def fit_parameters(
    observed: dict[int, tuple[float, float, float]],
    num_layers: int = DEFAULT_NUM_LAYERS,
    bytes_per_token_per_layer: float = DEFAULT_BYTES_PER_TOKEN_PER_LAYER,
    budget_fraction: float = DEFAULT_BUDGET_FRACTION,
) -> FitResult:
    """Least-squares affine fit of predict/transfer latencies vs context.

    ``observed`` maps context length to (predict_ms, transfer_ms, wait_ms).
    The per-context compute is taken as the column sum (the token is done
    when prediction, transfer, and the wait on the main model all finish),
    and the transfer slope is converted into a PCIe bandwidth under the
    assumed sparse budget fraction and per-token KV size.
    """
    if len(observed) < 2:
        raise ParameterError("fitting needs at least two breakdown rows")
    contexts = np.array(sorted(observed), dtype=np.float64)
    predict = np.array([observed[int(n)][0] for n in contexts])
    transfer = np.array([observed[int(n)][1] for n in contexts])
    wait = np.array([observed[int(n)][2] for n in contexts])

    p_int, p_slope, p_resid = _affine_fit(contexts, predict)
    t_int, t_slope, t_resid = _affine_fit(contexts, transfer)
    if t_slope <= 0:
        raise ParameterError("transfer latency must grow with context to fit a bandwidth")

    compute_by_context = {
        int(n): float(p + t + w) for n, p, t, w in zip(contexts, predict, transfer, wait)
    }
    bandwidth = budget_fraction * bytes_per_token_per_layer * num_layers / t_slope
    anchor = int(contexts[-1])
    config = SimConfig(
        num_layers=num_layers,
        per_layer_compute=compute_by_context[anchor] / num_layers,
        predict_base_ms=max(0.0, p_int),
        predict_per_token_ms=max(0.0, p_slope),
        bytes_per_token_per_layer=bytes_per_token_per_layer,
        pcie_bandwidth=bandwidth,
        transfer_fixed_overhead=max(0.0, t_int),
        budget=0,
        context_lengths=[int(n) for n in contexts],
        schedule="cross_token",
        budget_fraction=budget_fraction,
        compute_ms_by_context=compute_by_context,
    )
    return FitResult(
        config=config,
        predict_coefficients=(p_int, p_slope),
        transfer_coefficients=(t_int, t_slope),
        predict_residuals={int(n): float(r) for n, r in zip(contexts, p_resid)},
        transfer_residuals={int(n): float(r) for n, r in zip(contexts, t_resid)},
    )


def default_fit() -> FitResult:
    return fit_parameters(REFERENCE_BREAKDOWN)


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------


def report_to_csv(report: SimReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        [
            "context_length",
            "schedule",
            "predict_ms",
            "transfer_ms",
            "wait_ms",
            "stall_ms",
            "total_per_token_ms",
            "resident_kv_bytes",
            "speedup_vs_full_offload",
        ]
    )
    for p in report.points:
        writer.writerow(
            [
                p.context_length,
                p.schedule,
                f"{p.predict_ms:.4f}",
                f"{p.transfer_ms:.4f}",
                f"{p.wait_ms:.4f}",
                f"{p.stall_ms:.4f}",
                f"{p.total_per_token_ms:.4f}",
                f"{p.resident_kv_bytes:.0f}",
                f"{p.speedup_vs_full_offload:.4f}",
            ]
        )
    return buf.getvalue()


def report_to_plot_data(report: SimReport) -> str:
    """Plot-data file: one x column (context length), one series per schedule."""
    contexts = sorted({p.context_length for p in report.points})
    by_key = {(p.context_length, p.schedule): p for p in report.points}
    lines = ["context_length," + ",".join(SCHEDULES)]
    for n in contexts:
        totals = [f"{by_key[(n, s)].total_per_token_ms:.4f}" for s in SCHEDULES]
        lines.append(f"{n}," + ",".join(totals))
    return "\n".join(lines) + "\n"
