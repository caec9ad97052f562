"""CLI pipeline: every subcommand, schema-valid reports, byte determinism."""

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from PIL import Image

from ambiseg.checkpoint import checkpoint_hash, load_checkpoint
from ambiseg.cli import load_schema, main
from ambiseg.data import load_dataset


GEN_ARGS = [
    "generate-data", "--image-size", "8", "--num-raters", "2",
    "--count", "6", "--seed", "21",
]
TRAIN_ARGS = [
    "--T", "5", "--beta-start", "0.05", "--beta-end", "0.3",
    "--steps", "4", "--batch-size", "4", "--base-channels", "4",
    "--channel-multipliers", "1,2", "--time-embed-dim", "8",
    "--ambiguity-filters", "4,8", "--latent-dim", "3",
    "--eval-samples", "2", "--seed", "3",
]


def _tree_bytes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full generate → train → sample → evaluate → plot → ablate run."""
    root = tmp_path_factory.mktemp("pipeline")
    data, run = root / "data", root / "run"
    assert main(GEN_ARGS + ["--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(run),
                 "--mode", "cimd"] + TRAIN_ARGS) == 0
    assert main(["sample", "--checkpoint", str(run / "checkpoint.npz"),
                 "--data", str(data), "--image-index", "1", "--n", "3",
                 "--seed", "5", "--out", str(root / "samples")]) == 0
    assert main(["evaluate", "--checkpoint", str(run / "checkpoint.npz"),
                 "--data", str(data), "--n", "2", "--seed", "9",
                 "--out", str(root / "eval")]) == 0
    assert main(["plot", "--checkpoint", str(run / "checkpoint.npz"),
                 "--data", str(data), "--images", "0,2", "--n", "2",
                 "--seed", "4", "--out", str(root / "grid.png")]) == 0
    assert main(["ablate", "--data", str(data), "--out", str(root / "ablation"),
                 "--mode", "cimd"] + TRAIN_ARGS) == 0
    return root


def test_generated_dataset_loads(pipeline):
    ds = load_dataset(pipeline / "data")
    assert len(ds) == 6
    assert ds[0].image.shape == (1, 8, 8)
    assert ds[0].num_raters == 2


def test_train_artifacts(pipeline):
    run = pipeline / "run"
    assert (run / "checkpoint.npz").exists()
    assert (run / "loss_curves.png").stat().st_size > 0
    lines = (run / "train_log.ndjson").read_text().splitlines()
    assert len(lines) == 4
    ckpt = load_checkpoint(run / "checkpoint.npz")
    assert ckpt.meta["extra"]["train_config"]["mode"] == "cimd"


def test_sample_artifacts_and_manifest_schema(pipeline):
    out = pipeline / "samples"
    manifest = json.loads((out / "manifest.json").read_text())
    jsonschema.validate(manifest, load_schema("sample_manifest.schema.json"))
    assert manifest["files"] == ["sample_0.png", "sample_1.png", "sample_2.png"]
    assert manifest["checkpoint_sha256"] == checkpoint_hash(
        pipeline / "run" / "checkpoint.npz"
    )
    for name in manifest["files"]:
        arr = np.asarray(Image.open(out / name))
        assert arr.shape == (8, 8)
        assert set(np.unique(arr)) <= {0, 255}


def test_evaluation_report_schema(pipeline):
    out = pipeline / "eval"
    report = json.loads((out / "report.json").read_text())
    jsonschema.validate(report, load_schema("evaluation_report.schema.json"))
    assert report["n_images"] == 6
    assert len(report["per_image"]) == 6
    assert (out / "metrics.png").stat().st_size > 0
    rows = (out / "report.csv").read_text().splitlines()
    assert len(rows) == 7
    assert rows[0] == "image_id,ged,s_c,d_max,d_a,ci"


def test_ablation_report_schema(pipeline):
    out = pipeline / "ablation"
    report = json.loads((out / "ablation_report.json").read_text())
    jsonschema.validate(report, load_schema("ablation_report.schema.json"))
    assert len(report["arms"]) == 3
    assert len((out / "ablation.csv").read_text().splitlines()) == 4
    assert (out / "ablation.png").stat().st_size > 0
    for arm in report["arms"]:
        assert (out / arm["mode"] / "checkpoint.npz").exists()


def test_plot_renders(pipeline):
    assert (pipeline / "grid.png").stat().st_size > 0


def test_reruns_are_byte_identical(pipeline, tmp_path):
    data2, run2 = tmp_path / "data2", tmp_path / "run2"
    assert main(GEN_ARGS + ["--out", str(data2)]) == 0
    assert _tree_bytes(data2) == _tree_bytes(pipeline / "data")
    assert main(["train", "--data", str(data2), "--out", str(run2),
                 "--mode", "cimd"] + TRAIN_ARGS) == 0
    assert (run2 / "checkpoint.npz").read_bytes() == (
        pipeline / "run" / "checkpoint.npz"
    ).read_bytes()
    assert main(["sample", "--checkpoint", str(run2 / "checkpoint.npz"),
                 "--data", str(data2), "--image-index", "1", "--n", "3",
                 "--seed", "5", "--out", str(tmp_path / "samples2")]) == 0
    for name in ("manifest.json", "sample_0.png", "sample_2.png"):
        assert (tmp_path / "samples2" / name).read_bytes() == (
            pipeline / "samples" / name
        ).read_bytes()
    assert main(["evaluate", "--checkpoint", str(run2 / "checkpoint.npz"),
                 "--data", str(data2), "--n", "2", "--seed", "9",
                 "--out", str(tmp_path / "eval2")]) == 0
    assert (tmp_path / "eval2" / "report.json").read_bytes() == (
        pipeline / "eval" / "report.json"
    ).read_bytes()


def test_config_file_with_flag_override(pipeline, tmp_path):
    cfg = tmp_path / "arm.cfg"
    cfg.write_text(
        "mode = ddpm-prob-seg\nT = 5\nbeta_start = 0.05\nbeta_end = 0.3\n"
        "steps = 4\nbatch_size = 4\nbase_channels = 4\n"
        "channel_multipliers = 1,2\ntime_embed_dim = 8\nseed = 3\n"
    )
    out = tmp_path / "run"
    assert main(["train", "--data", str(pipeline / "data"), "--out", str(out),
                 "--config", str(cfg), "--steps", "2"]) == 0
    meta = load_checkpoint(out / "checkpoint.npz").meta
    assert meta["extra"]["train_config"]["steps"] == 2  # flag beats file
    assert meta["extra"]["train_config"]["mode"] == "ddpm-prob-seg"
    assert meta["extra"]["step"] == 2


def test_help_and_usage_errors(capsys):
    assert main(["--help"]) == 0
    assert "generate-data" in capsys.readouterr().out
    assert main(["train", "--help"]) == 0
    capsys.readouterr()
    assert main(["--frobnicate"]) != 0
    assert main([]) != 0
    assert main(["sample"]) != 0  # missing required flags
    capsys.readouterr()


def test_runtime_errors_exit_nonzero(pipeline, capsys):
    code = main(["evaluate", "--checkpoint", str(pipeline / "nope.npz"),
                 "--data", str(pipeline / "data"), "--out", str(pipeline / "x")])
    assert code == 1
    assert "error:" in capsys.readouterr().err
    code = main(["sample", "--checkpoint", str(pipeline / "run" / "checkpoint.npz"),
                 "--data", str(pipeline / "data"), "--image-index", "99",
                 "--out", str(pipeline / "y")])
    assert code == 1
    assert "image index 99" in capsys.readouterr().err


def test_module_and_script_entry_points():
    proc = subprocess.run(
        [sys.executable, "-m", "ambiseg", "--help"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert "generate-data" in proc.stdout
    script = Path(sys.executable).with_name("ambiseg")
    if script.exists():  # console script lands next to the interpreter
        proc = subprocess.run([str(script), "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
