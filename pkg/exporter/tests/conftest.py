"""Session fixtures: one pretrained tiny model and one q/k export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from attntap.capture import ExportJob, ExportResult, export
from attntap.pretrain import make_document, pretrain


@dataclass
class ExportFixture:
    model_dir: Path
    prompt_file: Path
    result: ExportResult
    max_new: int


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("model")
    losses = pretrain(out, steps=150, seed=0)
    assert losses[-1] < losses[0]  # the checkpoint actually learned
    return out


@pytest.fixture(scope="session")
def exported(model_dir, tmp_path_factory) -> ExportFixture:
    out = tmp_path_factory.mktemp("exports")
    prompt_file = out / "prompts.txt"
    rng = np.random.default_rng(77)
    prompt_file.write_text(make_document(rng, 220) + "\n", encoding="utf-8")
    job = ExportJob(
        model_dir=str(model_dir),
        prompt_file=str(prompt_file),
        max_new_tokens=64,
        include_qk=True,
        out_dir=str(out),
    )
    return ExportFixture(model_dir=model_dir, prompt_file=prompt_file,
                         result=export(job), max_new=64)
