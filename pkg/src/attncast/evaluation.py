"""Recovery metric, per-method accuracy harness, and the sweep driver.

The recovery rate of a selection is the fraction of a row's attention mass
it captures. Method accuracy is that recovery divided by the recovery of
the best possible same-budget selection (top tokens of the true row),
averaged over decode steps, then heads, then layers, in percent.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from attncast.baselines import (
    SnapKVSelector,
    quest_key_summaries,
    select_h2o,
    select_oracle,
    select_prev,
    select_quest,
    select_streaming,
)
from attncast.errors import ConfigError, MetricError, UnsupportedError
from attncast.predictor import PredictorWeights
from attncast.selector import SelectorConfig, init_state, step, topk
from attncast.trace import AttentionTrace

METHODS = (
    "predictor",
    "streaming_llm",
    "h2o_plus",
    "snap_kv",
    "quest",
    "prev_token",
    "prev_layer",
    "oracle",
    "oracle_complement",
)

SWEEP_CSV_HEADER = "trace,method,H,M,b,B,accuracy_pct"


@dataclass
class EvalParams:
    budget: int
    block_size: int = 16
    history: int = 64
    calibration_period: int = 5
    sink_tokens: int = 64
    local_tokens: int = 64
    window: int = 64
    update_interval: int = 1
    start_step: int = 1  # first decode step that is scored
    weights: PredictorWeights | None = None


@dataclass
class EvalReport:
    trace_id: str
    method: str
    accuracy_pct: float
    mean_recovery_pct: float
    params: EvalParams
    per_step: list[float] = field(default_factory=list)


def recovery_rate(row, selection) -> float:
    """Fraction of the row's L1 mass captured by the selected indices."""
    row = np.asarray(row, dtype=np.float64)
    total = float(np.abs(row).sum())
    if total <= 0.0:
        raise MetricError("recovery rate undefined for a zero-mass row")
    idx = np.fromiter((int(i) for i in selection), dtype=np.intp)
    if idx.size == 0:
        return 0.0
    if idx.min() < 0 or idx.max() >= row.size:
        raise MetricError("selection index out of row range")
    return float(row[idx].sum() / total)


def _iter_selections(trace: AttentionTrace, method: str, params: EvalParams, layer: int, head: int):
    """Yield (step, selection) pairs for decode steps 1..D of one head."""
    h = trace.header
    d = h.num_decode_steps
    b = params.budget

    if method == "predictor":
        if params.weights is None:
            raise ConfigError("predictor evaluation requires trained weights")
        cfg = SelectorConfig(
            budget=b,
            block_size=params.block_size,
            history=params.history,
            calibration_period=params.calibration_period,
            sink_tokens=params.sink_tokens,
            local_tokens=params.local_tokens,
            update_interval=params.update_interval,
        )
        prefill = [trace.row(layer, head, s) for s in h.steps if s < 0]
        state = init_state(cfg, prefill)
        selection: set[int] | None = None
        for t in range(0, d):
            row_t = trace.row(layer, head, t)
            if selection is None:
                observed = row_t
            else:
                observed = np.zeros_like(row_t, dtype=np.float64)
                idx = np.fromiter((i for i in selection if i < row_t.size), dtype=np.intp)
                observed[idx] = row_t[idx]
            state, selection = step(state, cfg, params.weights, observed, full_row=row_t)
            yield t + 1, selection
        return

    if method == "snap_kv":
        prefill_rows = [trace.row(layer, head, s) for s in h.steps if s <= 0]
        snap = SnapKVSelector(prefill_rows, b, h.prefill_len, window=params.window)
        for t in range(1, d + 1):
            yield t, snap.selection(h.row_len(t))
        return

    for t in range(1, d + 1):
        t_len = h.row_len(t)
        if method == "streaming_llm":
            yield t, select_streaming(t_len, b)
        elif method == "h2o_plus":
            lo = max(h.first_step_offset, t - params.window)
            rows = [trace.row(layer, head, s) for s in range(lo, t)]
            yield t, select_h2o(rows, b)
        elif method == "quest":
            if not h.has_qk:
                raise UnsupportedError("quest needs a trace with q/k tensors")
            keys = trace.head_keys(layer, head)[:t_len]
            summaries = quest_key_summaries(keys, params.block_size)
            query = trace.query(layer, head, t)
            yield t, select_quest(query, summaries, b, params.block_size, t_len)
        elif method == "prev_token":
            ref = trace.row(layer, head, t - 1) if t >= 2 else None
            yield t, select_prev("prev_token", ref, b, t_len)
        elif method == "prev_layer":
            ref = trace.row(layer - 1, head, t) if layer >= 1 else None
            yield t, select_prev("prev_layer", ref, b, t_len)
        elif method == "oracle":
            yield t, select_oracle(trace.row(layer, head, t), b)
        elif method == "oracle_complement":
            row = trace.row(layer, head, t)
            k = min(b, row.size)
            yield t, topk(-np.asarray(row, dtype=np.float64), k)
        else:
            raise ConfigError(f"unknown method {method!r}")


def prediction_accuracy(
    trace: AttentionTrace, method: str, params: EvalParams, trace_id: str = ""
) -> EvalReport:
    """Score one method on one trace against the same-budget oracle."""
    h = trace.header
    per_layer_acc: list[float] = []
    per_layer_rec: list[float] = []
    per_step_all: list[float] = []
    for layer in range(h.num_layers):
        head_acc: list[float] = []
        head_rec: list[float] = []
        for head in range(h.num_heads):
            ratios: list[float] = []
            recoveries: list[float] = []
            for t, selection in _iter_selections(trace, method, params, layer, head):
                if t < params.start_step:
                    continue
                row = trace.row(layer, head, t)
                got = recovery_rate(row, selection)
                best = recovery_rate(row, select_oracle(row, params.budget))
                ratios.append(got / best if best > 0 else 1.0)
                recoveries.append(got)
            if not ratios:
                raise MetricError("no decode steps were scored")
            head_acc.append(float(np.mean(ratios)))
            head_rec.append(float(np.mean(recoveries)))
            per_step_all.extend(ratios)
        per_layer_acc.append(float(np.mean(head_acc)))
        per_layer_rec.append(float(np.mean(head_rec)))
    return EvalReport(
        trace_id=trace_id,
        method=method,
        accuracy_pct=100.0 * float(np.mean(per_layer_acc)),
        mean_recovery_pct=100.0 * float(np.mean(per_layer_rec)),
        params=params,
        per_step=per_step_all,
    )


@dataclass
class SweepCell:
    trace_id: str
    method: str
    history: int
    calibration_period: int
    block_size: int
    budget: int
    accuracy_pct: float | None
    error: str | None = None


def sweep(
    traces: list[tuple[str, AttentionTrace]],
    methods: list[str],
    base_params: EvalParams,
    history_grid: list[int] | None = None,
    calibration_grid: list[int] | None = None,
    block_grid: list[int] | None = None,
    budget_grid: list[int] | None = None,
) -> list[SweepCell]:
    """Cartesian evaluation over the hyperparameter grids.

    Failed cells are recorded with their error message and the sweep
    continues; cells come back in lexicographic key order.
    """
    history_grid = history_grid or [base_params.history]
    calibration_grid = calibration_grid or [base_params.calibration_period]
    block_grid = block_grid or [base_params.block_size]
    budget_grid = budget_grid or [base_params.budget]
    if not (traces and methods and history_grid and calibration_grid and block_grid and budget_grid):
        raise ConfigError("sweep grids must be non-empty")

    cells: list[SweepCell] = []
    for trace_id, trace in sorted(traces, key=lambda pair: pair[0]):
        for method in sorted(methods):
            for hist in sorted(history_grid):
                for period in sorted(calibration_grid):
                    for block in sorted(block_grid):
                        for budget in sorted(budget_grid):
                            params = replace(
                                base_params,
                                history=hist,
                                calibration_period=period,
                                block_size=block,
                                budget=budget,
                            )
                            try:
                                report = prediction_accuracy(trace, method, params, trace_id)
                                cells.append(
                                    SweepCell(
                                        trace_id,
                                        method,
                                        hist,
                                        period,
                                        block,
                                        budget,
                                        report.accuracy_pct,
                                    )
                                )
                            except Exception as exc:  # cell failure must not stop the sweep
                                cells.append(
                                    SweepCell(
                                        trace_id, method, hist, period, block, budget, None, str(exc)
                                    )
                                )
    return cells


def sweep_to_csv(cells: list[SweepCell]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_CSV_HEADER.split(","))
    for cell in cells:
        acc = "" if cell.accuracy_pct is None else f"{cell.accuracy_pct:.4f}"
        writer.writerow(
            [
                cell.trace_id,
                cell.method,
                cell.history,
                cell.calibration_period,
                cell.block_size,
                cell.budget,
                acc,
            ]
        )
    return buf.getvalue()
