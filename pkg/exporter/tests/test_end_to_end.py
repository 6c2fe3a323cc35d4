"""Feed an exported real-model trace through the primary toolkit's CLI:
train the forecaster on early decode steps, score methods on held-out
late steps, and check the forecaster clears the streaming baseline."""

import csv
import subprocess


def run(args):
    proc = subprocess.run(args, capture_output=True, text=True)
    assert proc.returncode == 0, f"{args}\nstdout: {proc.stdout}\nstderr: {proc.stderr}"
    return proc


class TestEndToEnd:
    def test_forecaster_beats_streaming_on_heldout_steps(self, exported, tmp_path):
        trace = str(exported.result.trace_paths[0])
        weights = tmp_path / "weights.apw1"
        run(
            ["attncast", "train", trace, "-H", "16", "-b", "8",
             "--sample-ratio", "0.5", "--epochs", "20", "--seed", "3",
             "--holdout-steps", "24", "--out", str(weights)]
        )
        out = tmp_path / "eval.csv"
        run(
            ["attncast", "eval", trace, "--methods", "predictor,streaming_llm",
             "-B", "64", "-b", "8", "-H", "16", "-M", "5",
             "--sink", "16", "--local", "16", "--weights", str(weights),
             "--skip-steps", "40", "--out", str(out)]
        )
        rows = list(csv.DictReader(out.read_text().splitlines()))
        scores = {row["method"]: float(row["accuracy_pct"]) for row in rows}
        assert scores["predictor"] >= scores["streaming_llm"]

    def test_cli_export_then_import(self, model_dir, exported, tmp_path):
        out_dir = tmp_path / "cli_exports"
        run(
            ["attntap", "export", "--model", str(model_dir),
             "--prompts", str(exported.prompt_file), "--max-new", "6",
             "--layers", "0,2", "--out", str(out_dir)]
        )
        trace = out_dir / "trace_000.att1"
        assert trace.exists()
        proc = run(["attncast", "import", str(trace)])
        assert "layers=2" in proc.stdout
