"""Command-line entry point tying the toolkit into reproducible runs.

Subcommands: ``synth`` (generate a trace), ``train`` (fit the forecaster),
``eval`` (method accuracy on traces), ``sweep`` (hyperparameter grid),
``sim`` (prefetch latency model), ``import`` (validate foreign trace
files). Every run writes a JSON manifest beside its outputs. Exit codes:
0 success, 2 usage error, 3 data error, 4 numeric/training error.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

import click

from attncast import __version__
from attncast.configio import dataclass_from_flat, parse_flat_file
from attncast.errors import (
    AttncastError,
    ConfigError,
    CorruptionError,
    FormatError,
    MetricError,
    NumericError,
    ValidationError,
)
from attncast.evaluation import (
    EvalParams,
    SweepCell,
    prediction_accuracy,
    sweep,
    sweep_to_csv,
)
from attncast.predictor import (
    build_dataset,
    load_weights,
    metrics_to_csv,
    save_weights,
    train,
)
from attncast.prefetchsim import (
    SimConfig,
    default_fit,
    report_to_csv,
    report_to_plot_data,
    simulate,
)
from attncast.synth import SynthConfig, gen_trace
from attncast.trace import read_trace_file, write_trace_file

OUT_DIR_ENV = "ATTNCAST_OUT_DIR"

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _resolve_out(path: str) -> Path:
    """Relative outputs land in $ATTNCAST_OUT_DIR when it is set."""
    p = Path(path)
    base = os.environ.get(OUT_DIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _write_manifest(out_path: Path, command: str, seed, inputs, outputs, config_path=None):
    manifest = {
        "command": command,
        "config": str(config_path) if config_path else None,
        "rng_seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
    }
    path = out_path.with_name(out_path.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _exit_code_for(exc: AttncastError) -> int:
    if isinstance(exc, (FormatError, CorruptionError, ValidationError, MetricError)):
        return EXIT_DATA
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_USAGE  # config/parameter problems are usage errors


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except AttncastError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(_exit_code_for(exc))
        except FileNotFoundError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DATA)

    return wrapper


@click.group()
@click.version_option(version=__version__)
def main():
    """Attention forecasting toolkit for KV-cache critical-token selection."""


@main.command("synth")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, help="Output .att1 trace path.")
@click.option("--seed", type=int, default=None, help="Override the config rng_seed.")
@_handle_errors
def cmd_synth(config_path, out_path, seed):
    """Generate a synthetic attention trace from a flat config file."""
    entries = parse_flat_file(config_path)
    overrides = {"rng_seed": seed} if seed is not None else None
    config = dataclass_from_flat(SynthConfig, entries, config_path, overrides)
    config.validate()
    trace = gen_trace(config)
    out = _resolve_out(out_path)
    write_trace_file(trace, out)
    _write_manifest(out, "synth", config.rng_seed, [config_path], [out], config_path)
    click.echo(f"wrote {out}")


@main.command("train")
@click.argument("trace_paths", nargs=-1, required=True, type=click.Path())
@click.option("--history", "-H", type=int, default=64, show_default=True)
@click.option("--block-size", "-b", type=int, default=16, show_default=True)
@click.option("--sample-ratio", type=float, default=0.03, show_default=True)
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--holdout-steps", type=int, default=0, show_default=True,
              help="Exclude the last N decode steps of every trace from training targets.")
@click.option("--out", "out_path", required=True, help="Output weights checkpoint path.")
@_handle_errors
def cmd_train(trace_paths, history, block_size, sample_ratio, epochs, seed, holdout_steps, out_path):
    """Train the forecaster on one or more traces; writes weights + metrics CSV."""
    for path in trace_paths:
        if not Path(path).exists():
            raise click.UsageError(f"trace file not found: {path}")
    samples = []
    for path in trace_paths:
        trace = read_trace_file(path)
        max_step = (
            trace.header.num_decode_steps - holdout_steps if holdout_steps > 0 else None
        )
        samples.extend(
            build_dataset(trace, history, block_size, sample_ratio, rng_seed=seed, max_step=max_step)
        )
    weights, metrics = train(samples, epochs=epochs, rng_seed=seed)
    out = _resolve_out(out_path)
    save_weights(weights, out)
    metrics_path = out.with_name(out.stem + ".metrics.csv")
    metrics_path.write_text(metrics_to_csv(metrics), encoding="utf-8")
    _write_manifest(out, "train", seed, list(trace_paths), [out, metrics_path])
    click.echo(f"wrote {out} and {metrics_path}")


def _parse_methods(methods: str) -> list[str]:
    out = [m.strip() for m in methods.split(",") if m.strip()]
    if not out:
        raise click.UsageError("at least one method is required")
    return out


@main.command("eval")
@click.argument("trace_paths", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--methods", default="oracle", show_default=True,
              help="Comma-separated method names.")
@click.option("--budget", "-B", type=int, required=True)
@click.option("--weights", "weights_path", type=click.Path(exists=True, dir_okay=False),
              help="Forecaster checkpoint (required for the predictor method).")
@click.option("--calibration", "-M", type=int, default=5, show_default=True)
@click.option("--history", "-H", type=int, default=64, show_default=True)
@click.option("--block-size", "-b", type=int, default=16, show_default=True)
@click.option("--sink", type=int, default=64, show_default=True)
@click.option("--local", type=int, default=64, show_default=True)
@click.option("--window", type=int, default=64, show_default=True)
@click.option("--skip-steps", type=int, default=0, show_default=True,
              help="Skip the first N decode steps when scoring.")
@click.option("--out", "out_path", required=True, help="Output CSV path.")
@_handle_errors
def cmd_eval(trace_paths, methods, budget, weights_path, calibration, history,
             block_size, sink, local, window, skip_steps, out_path):
    """Score methods on traces against the same-budget oracle."""
    method_list = _parse_methods(methods)
    weights = load_weights(weights_path) if weights_path else None
    if "predictor" in method_list and weights is None:
        raise click.UsageError("--weights is required when evaluating the predictor")
    params = EvalParams(
        budget=budget,
        block_size=block_size,
        history=history,
        calibration_period=calibration,
        sink_tokens=sink,
        local_tokens=local,
        window=window,
        start_step=1 + skip_steps,
        weights=weights,
    )
    cells: list[SweepCell] = []
    for path in trace_paths:
        trace = read_trace_file(path)
        for method in method_list:
            report = prediction_accuracy(trace, method, params, trace_id=Path(path).name)
            cells.append(
                SweepCell(
                    Path(path).name, method, history, calibration, block_size, budget,
                    report.accuracy_pct,
                )
            )
    out = _resolve_out(out_path)
    out.write_text(sweep_to_csv(cells), encoding="utf-8")
    _write_manifest(out, "eval", None, list(trace_paths), [out])
    click.echo(f"wrote {out}")


@main.command("sweep")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, help="Output CSV path.")
@_handle_errors
def cmd_sweep(config_path, out_path):
    """Run a hyperparameter grid described by a flat config file.

    Keys: traces (paths), methods, budgets, histories, calibrations,
    blocks (all comma-separated), plus optional weights, sink, local,
    window, skip_steps.
    """
    entries = {k: v for k, (v, _) in parse_flat_file(config_path).items()}
    known = {"traces", "methods", "budgets", "histories", "calibrations", "blocks",
             "weights", "sink", "local", "window", "skip_steps"}
    unknown = set(entries) - known
    if unknown:
        raise ConfigError(f"{config_path}: unknown keys {', '.join(sorted(unknown))}")

    def int_list(key: str, fallback: list[int]) -> list[int]:
        if key not in entries or not entries[key].strip():
            return fallback
        try:
            return [int(v) for v in entries[key].split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"{config_path}: bad integer list for {key!r}") from exc

    trace_paths = [p.strip() for p in entries.get("traces", "").split(",") if p.strip()]
    methods = [m.strip() for m in entries.get("methods", "").split(",") if m.strip()]
    if not trace_paths or not methods:
        raise ConfigError(f"{config_path}: 'traces' and 'methods' must be non-empty")
    budgets = int_list("budgets", [])
    if not budgets:
        raise ConfigError(f"{config_path}: 'budgets' must be non-empty")
    weights = load_weights(entries["weights"]) if entries.get("weights") else None
    if "predictor" in methods and weights is None:
        raise ConfigError(f"{config_path}: 'weights' is required for the predictor method")
    base = EvalParams(
        budget=budgets[0],
        sink_tokens=int(entries.get("sink", 64)),
        local_tokens=int(entries.get("local", 64)),
        window=int(entries.get("window", 64)),
        start_step=1 + int(entries.get("skip_steps", 0)),
        weights=weights,
    )
    traces = [(Path(p).name, read_trace_file(p)) for p in trace_paths]
    cells = sweep(
        traces,
        methods,
        base,
        history_grid=int_list("histories", [base.history]),
        calibration_grid=int_list("calibrations", [base.calibration_period]),
        block_grid=int_list("blocks", [base.block_size]),
        budget_grid=budgets,
    )
    out = _resolve_out(out_path)
    out.write_text(sweep_to_csv(cells), encoding="utf-8")
    _write_manifest(out, "sweep", None, trace_paths, [out], config_path)
    failures = [c for c in cells if c.accuracy_pct is None]
    for cell in failures:
        click.echo(
            f"cell failed: {cell.trace_id}/{cell.method} H={cell.history} "
            f"M={cell.calibration_period} b={cell.block_size} B={cell.budget}: {cell.error}",
            err=True,
        )
    click.echo(f"wrote {out} ({len(cells) - len(failures)}/{len(cells)} cells ok)")
    if failures:
        sys.exit(EXIT_DATA)


@main.command("sim")
@click.argument("config_path", required=False, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, help="Output CSV path.")
@_handle_errors
def cmd_sim(config_path, out_path):
    """Simulate prefetch schedules; without a config, uses parameters fitted
    from the bundled reference overhead table."""
    if config_path:
        entries = parse_flat_file(config_path)
        config = dataclass_from_flat(SimConfig, entries, config_path)
    else:
        config = default_fit().config
    config.validate()
    report = simulate(config)
    out = _resolve_out(out_path)
    out.write_text(report_to_csv(report), encoding="utf-8")
    plot_path = out.with_name(out.stem + ".plotdata.csv")
    plot_path.write_text(report_to_plot_data(report), encoding="utf-8")
    _write_manifest(out, "sim", None, [config_path] if config_path else [], [out, plot_path],
                    config_path)
    click.echo(f"wrote {out} and {plot_path}")


@main.command("import")
@click.argument("trace_paths", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@_handle_errors
def cmd_import(trace_paths):
    """Validate foreign .att1 files and print a one-line summary per file."""
    for path in trace_paths:
        trace = read_trace_file(path)
        h = trace.header
        click.echo(
            f"{path}: ok layers={h.num_layers} heads={h.num_heads} "
            f"prefill={h.prefill_len} decode={h.num_decode_steps} qk={int(h.has_qk)}"
        )


if __name__ == "__main__":
    main()
