"""Shared fixtures: small synthetic traces and a trained forecaster.

The "small bundle" is one seeded pair of noisy re-access traces plus
weights trained on them; several behavioral tests (selector containment,
method comparisons) reuse it because training even a tiny model is the
slowest part of the suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from attncast.predictor import PredictorWeights, build_dataset, train
from attncast.synth import SynthConfig, gen_trace
from attncast.trace import AttentionTrace


def clustered_runs(rng, n_runs: int, run_len: int, lo: int, hi: int) -> frozenset[int]:
    starts = rng.choice(np.arange(lo, hi - run_len), n_runs, replace=False)
    out: set[int] = set()
    for s in starts:
        out.update(range(int(s), int(s) + run_len))
    return frozenset(out)


@dataclass
class SmallBundle:
    traces: list[AttentionTrace]
    weights: PredictorWeights
    history: int
    block_size: int
    budget: int
    seed: int


@pytest.fixture(scope="session")
def small_bundle() -> SmallBundle:
    """Two noisy re-access traces (2 heads each) and weights trained on them."""
    seed = 11
    traces = [
        gen_trace(
            SynthConfig(
                head_dim=32,
                prefill_len=600,
                decode_steps=160,
                query_drift=0.15,
                key_drift=0.15,
                seasonal_period=0,
                reaccess_positions=frozenset(list(range(200, 210)) + list(range(420, 430))),
                rng_seed=seed + i,
                num_heads=2,
            ),
            keep_prefill_rows=16,
            noise_scale=1.5,
        )
        for i in range(2)
    ]
    history, block = 8, 16
    samples = []
    for tr in traces:
        samples.extend(build_dataset(tr, history, block, 0.10, rng_seed=seed))
    weights, _ = train(samples, epochs=15, rng_seed=seed)
    return SmallBundle(
        traces=traces, weights=weights, history=history, block_size=block, budget=256, seed=seed
    )


@pytest.fixture(scope="session")
def tiny_trace() -> AttentionTrace:
    """A fast multi-layer trace with q/k for format and harness structure tests."""
    return gen_trace(
        SynthConfig(
            head_dim=16,
            prefill_len=96,
            decode_steps=30,
            query_drift=0.2,
            key_drift=0.2,
            seasonal_period=5,
            reaccess_positions=frozenset({7, 40}),
            rng_seed=5,
            num_layers=2,
            num_heads=2,
        ),
        keep_prefill_rows=8,
    )
