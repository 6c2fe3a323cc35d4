"""Greedy decoding with exact attention capture, packaged as export jobs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from attntap import __version__
from attntap.model import load_model
from attntap.trace_writer import write_att1

PREFILL_ROWS_KEPT = 64  # trailing prompt rows stored ahead of the decode rows


@dataclass
class ExportJob:
    model_dir: str
    prompt_file: str
    max_new_tokens: int
    layers: list[int] = field(default_factory=list)  # empty = all layers
    include_qk: bool = False
    out_dir: str = "."

    def validate(self) -> None:
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class ExportResult:
    trace_paths: list[Path]
    similarity_path: Path | None


def read_prompts(path) -> list[str]:
    prompts = [line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines()]
    prompts = [p for p in prompts if p.strip()]
    if not prompts:
        raise ValueError(f"no prompts in {path}")
    return prompts


def _run_capture(model, tokens, layers, include_qk, max_new):
    """Greedy decode with full-context forwards; keeps each step's final
    attention row per captured layer/head, plus rotated q/k when asked."""
    prefill_len = int(tokens.shape[0])
    n_heads = model.config.n_heads
    rows: dict[tuple[int, int], list[np.ndarray]] = {
        (li, h): [] for li in range(len(layers)) for h in range(n_heads)
    }
    qs: dict[tuple[int, int], list[np.ndarray]] = {
        (li, h): [] for li in range(len(layers)) for h in range(n_heads)
    }
    keys: dict[tuple[int, int], np.ndarray] = {}

    with torch.no_grad():
        logits, captures = model(tokens[None, :], capture=True)
        n_prefill_rows = min(PREFILL_ROWS_KEPT, prefill_len)
        for li, layer in enumerate(layers):
            attn, q, _ = captures[layer]
            for h in range(n_heads):
                for pos in range(prefill_len - n_prefill_rows, prefill_len):
                    rows[(li, h)].append(attn[0, h, pos, : pos + 1].numpy().astype(np.float32))
                    if include_qk:
                        qs[(li, h)].append(q[0, h, pos].numpy().astype(np.float32))
        seq = tokens
        for _ in range(max_new):
            nxt = int(torch.argmax(logits[0, -1]))
            seq = torch.cat([seq, torch.tensor([nxt], dtype=seq.dtype)])
            logits, captures = model(seq[None, :], capture=True)
            t = int(seq.shape[0])
            for li, layer in enumerate(layers):
                attn, q, k = captures[layer]
                for h in range(n_heads):
                    rows[(li, h)].append(attn[0, h, t - 1, :t].numpy().astype(np.float32))
                    if include_qk:
                        qs[(li, h)].append(q[0, h, t - 1].numpy().astype(np.float32))
                        keys[(li, h)] = k[0, h].numpy().astype(np.float32)
    return rows, qs, keys, n_prefill_rows


def export(job: ExportJob) -> ExportResult:
    """Run greedy decoding per prompt and write one `.att1` file each,
    plus a query/key similarity CSV when q/k capture is enabled."""
    job.validate()
    model, vocab = load_model(job.model_dir)
    layers = job.layers or list(range(model.config.n_layers))
    for layer in layers:
        if not (0 <= layer < model.config.n_layers):
            raise ValueError(f"layer {layer} out of range")
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    prompts = read_prompts(job.prompt_file)
    trace_paths: list[Path] = []
    all_q: list[tuple[int, int, np.ndarray]] = []
    n_heads = model.config.n_heads

    for idx, prompt in enumerate(prompts):
        tokens = torch.tensor([vocab[ch] for ch in prompt if ch in vocab], dtype=torch.long)
        prefill_len = int(tokens.shape[0])
        if prefill_len > model.config.max_seq_len - job.max_new_tokens:
            raise ValueError(f"prompt {idx} too long for the model context window")
        if prefill_len < 2:
            raise ValueError(f"prompt {idx} is empty after tokenization")

        rows, qs, keys, n_prefill_rows = _run_capture(
            model, tokens, layers, job.include_qk, job.max_new_tokens
        )
        row_blocks = [[rows[(li, h)] for h in range(n_heads)] for li in range(len(layers))]
        q_blocks = k_blocks = None
        if job.include_qk:
            q_blocks = [
                [np.stack(qs[(li, h)]) for h in range(n_heads)] for li in range(len(layers))
            ]
            k_blocks = [[keys[(li, h)] for h in range(n_heads)] for li in range(len(layers))]
            for li in range(len(layers)):
                for h in range(n_heads):
                    all_q.append((layers[li], h, np.stack(qs[(li, h)])))

        path = out_dir / f"trace_{idx:03d}.att1"
        write_att1(
            path,
            row_blocks,
            prefill_len=prefill_len,
            num_decode_steps=job.max_new_tokens,
            first_step_offset=-(n_prefill_rows - 1),
            queries=q_blocks,
            keys=k_blocks,
        )
        trace_paths.append(path)

    similarity_path = None
    if job.include_qk:
        from attntap.similarity import similarity_csv

        similarity_path = out_dir / "similarity.csv"
        similarity_path.write_text(similarity_csv(all_q), encoding="utf-8")

    manifest = {
        "command": "export",
        "model": str(job.model_dir),
        "prompts": str(job.prompt_file),
        "max_new_tokens": job.max_new_tokens,
        "layers": layers,
        "include_qk": job.include_qk,
        "outputs": [str(p) for p in trace_paths]
        + ([str(similarity_path)] if similarity_path else []),
        "tool_version": __version__,
    }
    (out_dir / "export.manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return ExportResult(trace_paths=trace_paths, similarity_path=similarity_path)
