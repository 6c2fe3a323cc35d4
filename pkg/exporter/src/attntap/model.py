"""A compact causal transformer with rotary position encoding.

Attention is computed head by head in plain tensor ops (no fused kernels),
so the per-step softmax rows and the rotated query/key vectors can be
captured exactly as the model used them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 96
    n_layers: int = 3
    n_heads: int = 4
    max_seq_len: int = 512
    rope_base: float = 10000.0

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def rope_angles(head_dim: int, max_len: int, base: float) -> tuple[torch.Tensor, torch.Tensor]:
    freqs = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float32) / head_dim)
    angles = torch.arange(max_len, dtype=torch.float32)[:, None] * freqs[None, :]
    return torch.cos(angles), torch.sin(angles)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved pairs; x is (..., seq, head_dim)."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    seq = x.shape[-2]
    c, s = cos[:seq], sin[:seq]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * c - x2 * s
    out[..., 1::2] = x1 * s + x2 * c
    return out


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        self.qkv = nn.Linear(config.d_model, 3 * config.d_model, bias=False)
        self.proj = nn.Linear(config.d_model, config.d_model, bias=False)
        cos, sin = rope_angles(config.head_dim, config.max_seq_len, config.rope_base)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)

    def forward(self, x: torch.Tensor, capture: bool = False):
        bsz, seq, dim = x.shape
        q, k, v = self.qkv(x).split(dim, dim=2)
        shape = (bsz, seq, self.n_heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)  # (B, H, T, hd)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        q = apply_rope(q, self.rope_cos, self.rope_sin)
        k = apply_rope(k, self.rope_cos, self.rope_sin)
        scores = (q @ k.transpose(-2, -1)) / (self.head_dim**0.5)
        mask = torch.triu(torch.ones(seq, seq, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        attn = F.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bsz, seq, dim)
        out = self.proj(out)
        if capture:
            return out, attn, q, k
        return out, None, None, None


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = CausalSelfAttention(config)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(config.d_model, 4 * config.d_model),
            nn.GELU(),
            nn.Linear(4 * config.d_model, config.d_model),
        )

    def forward(self, x: torch.Tensor, capture: bool = False):
        attn_out, attn, q, k = self.attn(self.ln1(x), capture=capture)
        x = x + attn_out
        x = x + self.mlp(self.ln2(x))
        return x, attn, q, k


class TinyCausalLM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Embedding(config.vocab_size, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)

    def forward(self, tokens: torch.Tensor, capture: bool = False):
        """Returns (logits, captures) where captures[layer] = (attn, q, k)
        with attn (B, H, T, T) and q/k (B, H, T, head_dim), post-rotation."""
        x = self.embed(tokens)
        captures = []
        for block in self.blocks:
            x, attn, q, k = block(x, capture=capture)
            if capture:
                captures.append((attn, q, k))
        logits = self.lm_head(self.ln_f(x))
        return logits, captures

    @torch.no_grad()
    def greedy_decode(self, prompt: torch.Tensor, max_new: int) -> torch.Tensor:
        tokens = prompt.clone()
        for _ in range(max_new):
            logits, _ = self.forward(tokens[None, :])
            nxt = int(torch.argmax(logits[0, -1]))
            tokens = torch.cat([tokens, torch.tensor([nxt], dtype=tokens.dtype)])
        return tokens


def save_model(model: TinyCausalLM, vocab: dict[str, int], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out / "model.pt")
    (out / "config.json").write_text(json.dumps(asdict(model.config), indent=2))
    (out / "vocab.json").write_text(json.dumps(vocab, indent=2))


def load_model(model_dir) -> tuple[TinyCausalLM, dict[str, int]]:
    path = Path(model_dir)
    if not (path / "model.pt").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    config = ModelConfig(**json.loads((path / "config.json").read_text()))
    vocab = json.loads((path / "vocab.json").read_text())
    model = TinyCausalLM(config)
    model.load_state_dict(torch.load(path / "model.pt", map_location="cpu", weights_only=True))
    model.eval()
    return model, vocab
