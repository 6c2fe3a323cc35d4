"""Command line for pretraining the desk-scale model and exporting traces."""

from __future__ import annotations

import sys

import click

from attntap import __version__


@click.group()
@click.version_option(version=__version__)
def main():
    """Attention trace exporter for a small causal language model."""


@main.command("pretrain")
@click.option("--out", "out_dir", required=True, help="Checkpoint directory.")
@click.option("--steps", type=int, default=250, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_pretrain(out_dir, steps, seed):
    """Train the bundled tiny LM on the synthetic recall corpus."""
    from attntap.pretrain import pretrain

    losses = pretrain(out_dir, steps=steps, seed=seed)
    click.echo(f"trained {steps} steps; loss {losses[0]:.3f} -> {losses[-1]:.3f}; saved {out_dir}")


@main.command("export")
@click.option("--model", "model_dir", required=True, help="Checkpoint directory.")
@click.option("--prompts", "prompt_file", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Text file, one prompt per line.")
@click.option("--max-new", type=int, required=True, help="Decode steps per prompt.")
@click.option("--layers", default="", help="Comma-separated layer filter (default: all).")
@click.option("--qk/--no-qk", "include_qk", default=False,
              help="Also store rotated query/key tensors and the similarity CSV.")
@click.option("--out", "out_dir", required=True, help="Output directory.")
def cmd_export(model_dir, prompt_file, max_new, layers, include_qk, out_dir):
    """Capture attention during greedy decoding and write .att1 traces."""
    from attntap.capture import ExportJob, export

    layer_list = [int(v) for v in layers.split(",") if v.strip()] if layers else []
    job = ExportJob(
        model_dir=model_dir,
        prompt_file=prompt_file,
        max_new_tokens=max_new,
        layers=layer_list,
        include_qk=include_qk,
        out_dir=out_dir,
    )
    try:
        result = export(job)
    except (ValueError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    for path in result.trace_paths:
        click.echo(f"wrote {path}")
    if result.similarity_path:
        click.echo(f"wrote {result.similarity_path}")


@main.command("export-similarity")
@click.option("--model", "model_dir", required=True, help="Checkpoint directory.")
@click.option("--prompts", "prompt_file", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--max-new", type=int, required=True)
@click.option("--layers", default="", help="Comma-separated layer filter (default: all).")
@click.option("--out", "out_dir", required=True, help="Output directory.")
def cmd_export_similarity(model_dir, prompt_file, max_new, layers, out_dir):
    """Capture q/k during decoding and write only the lag-autocorrelation CSV
    (traces are produced too, since the capture is the same pass)."""
    from attntap.capture import ExportJob, export

    layer_list = [int(v) for v in layers.split(",") if v.strip()] if layers else []
    job = ExportJob(
        model_dir=model_dir,
        prompt_file=prompt_file,
        max_new_tokens=max_new,
        layers=layer_list,
        include_qk=True,
        out_dir=out_dir,
    )
    try:
        result = export(job)
    except (ValueError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"wrote {result.similarity_path}")


if __name__ == "__main__":
    main()
