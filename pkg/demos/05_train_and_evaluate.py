"""End to end through the command layer: data, a short training run, inference, evaluation.

The run is tiny so it finishes in about a minute; the numbers are only a smoke test.
"""

# %%
import json
import tempfile
from pathlib import Path

from pointfuse import cli
from pointfuse.trainer import parse_log

config = {
    "data": {"n_scenes": 4, "n_views": 4, "extent": 3.0, "ground_plane": True},
    "model": {"embed_dim": 32, "fusion_layers": 2, "attention_heads": 4, "head_hidden_dim": 32},
    "train": {"total_steps": 150, "base_lr": 1e-3, "batch_size": 2},
    "seed": 0,
}

with tempfile.TemporaryDirectory() as d:
    d = Path(d)
    (d / "run.json").write_text(json.dumps(config))
    common = ["--config", str(d / "run.json")]

    # %% data and training
    cli.main(["gen-data", *common, "--out", str(d / "data.f3rdata")])
    cli.main(["train", *common, "--data", str(d / "data.f3rdata"), "--out", str(d / "run")])
    rows = parse_log(d / "run" / "train.log")
    print("loss", round(rows[0]["loss_total"], 3), "->", round(rows[-1]["loss_total"], 3))

    # %% inference writes one prediction file for the whole dataset
    ckpt = d / "run" / "step_150.f3rckpt"
    cli.main(["infer", *common, "--checkpoint", str(ckpt), "--data", str(d / "data.f3rdata"),
              "--out", str(d / "pred")])
    pred = d / "pred" / "predictions.f3rpred"

    # %% camera recovery and reconstruction metrics
    cli.main(["eval-pose", *common, "--predictions", str(pred), "--data", str(d / "data.f3rdata"),
              "--out", str(d / "eval")])
    cli.main(["eval-recon", "--predictions", str(pred), "--data", str(d / "data.f3rdata"),
              "--out", str(d / "eval")])

    # %% a colored point cloud of the first sample
    cli.main(["export-ply", "--source", str(pred), "--head", "local-aligned", "--out", str(d / "cloud.ply")])
