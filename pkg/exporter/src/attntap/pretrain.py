"""Deterministic desk-scale pretraining on a synthetic recall corpus.

The corpus mixes key-value recall lines ("k3=v7; ... ?k3=v7."), repeated
motifs, and filler words. Recall lines push heads toward revisiting fixed
prompt positions; motifs give periodic structure; both are the temporal
regularities the downstream forecaster feeds on.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from attntap.model import ModelConfig, TinyCausalLM, save_model

ALPHABET = list("abcdefghijklmnopqrstuvwxyz0123456789=?;.! ")


def build_vocab() -> dict[str, int]:
    return {ch: i for i, ch in enumerate(ALPHABET)}


def _recall_line(rng: np.random.Generator) -> str:
    keys = rng.choice(26, size=4, replace=False)
    vals = rng.integers(0, 10, size=4)
    pairs = [f"{ALPHABET[k]}{v}={ALPHABET[(k + 7) % 26]}{(v * 3) % 10}" for k, v in zip(keys, vals)]
    ask = rng.integers(0, 4)
    return "; ".join(pairs) + f"; ?{pairs[ask]}."


def _motif_line(rng: np.random.Generator) -> str:
    motif = "".join(ALPHABET[c] for c in rng.integers(0, 36, size=int(rng.integers(3, 6))))
    return (motif + "!") * int(rng.integers(4, 9))


def _filler_line(rng: np.random.Generator) -> str:
    words = []
    for _ in range(int(rng.integers(4, 9))):
        length = int(rng.integers(2, 7))
        words.append("".join(ALPHABET[c] for c in rng.integers(0, 26, size=length)))
    return " ".join(words) + "."


def make_document(rng: np.random.Generator, target_len: int) -> str:
    parts = []
    size = 0
    makers = [_recall_line, _motif_line, _filler_line]
    while size < target_len:
        line = makers[int(rng.integers(0, 3))](rng)
        parts.append(line)
        size += len(line) + 1
    return " ".join(parts)[:target_len]


def encode(text: str, vocab: dict[str, int]) -> torch.Tensor:
    return torch.tensor([vocab[ch] for ch in text if ch in vocab], dtype=torch.long)


def pretrain(
    out_dir,
    steps: int = 250,
    batch_size: int = 12,
    seq_len: int = 192,
    seed: int = 0,
    learning_rate: float = 3e-3,
) -> list[float]:
    """Train the tiny LM from scratch and save the checkpoint; returns the
    per-step losses (useful to confirm learning actually happened)."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    vocab = build_vocab()
    config = ModelConfig(vocab_size=len(vocab))
    model = TinyCausalLM(config)
    corpus = encode(make_document(rng, 200_000), vocab)
    optim = torch.optim.Adam(model.parameters(), lr=learning_rate)
    losses = []
    model.train()
    for _ in range(steps):
        starts = rng.integers(0, len(corpus) - seq_len - 1, size=batch_size)
        batch = torch.stack([corpus[s : s + seq_len + 1] for s in starts])
        inputs, targets = batch[:, :-1], batch[:, 1:]
        logits, _ = model(inputs)
        loss = F.cross_entropy(logits.reshape(-1, config.vocab_size), targets.reshape(-1))
        optim.zero_grad()
        loss.backward()
        optim.step()
        losses.append(float(loss.detach()))
    model.eval()
    save_model(model, vocab, out_dir)
    return losses
