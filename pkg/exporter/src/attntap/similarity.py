"""Lag-k cosine autocorrelation of captured query sequences."""

from __future__ import annotations

import numpy as np

LAGS = (1, 2, 5, 10, 20, 50)


def lag_cosine(vectors: np.ndarray, lag: int) -> float:
    """Mean cosine similarity of vector pairs ``lag`` steps apart."""
    if lag < 1 or lag >= len(vectors):
        raise ValueError("lag must satisfy 1 <= lag < len(vectors)")
    a = vectors[:-lag].astype(np.float64)
    b = vectors[lag:].astype(np.float64)
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return float(np.mean(np.einsum("ij,ij->i", a, b) / norms))


def similarity_csv(blocks: list[tuple[int, int, np.ndarray]]) -> str:
    """CSV of per-(layer, head) lag autocorrelations, columns
    layer,head,lag,rho; lags without enough samples are skipped."""
    lines = ["layer,head,lag,rho"]
    for layer, head, vectors in blocks:
        for lag in LAGS:
            if lag >= len(vectors):
                continue
            lines.append(f"{layer},{head},{lag},{lag_cosine(vectors, lag):.6f}")
    return "\n".join(lines) + "\n"
