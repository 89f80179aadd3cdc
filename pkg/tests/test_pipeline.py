import json
import logging
from pathlib import Path

import pytest

from memdyn import pipeline
from memdyn.config import PipelineConfig

TINY = {
    "seed": 3,
    "dataset": {"kind": "gaussian-blobs", "n_classes": 3, "n_samples": 120, "dim": 4,
                "class_separation": 2.0, "label_noise_rate": 0.05, "seed": 3},
    "hidden": [8],
    "optimizer": {"kind": "adamw", "lr": 0.01, "weight_decay": 0.0},
    "epochs": 4,
    "checkpoint_interval": 2,
    "batch_size": 16,
    "n_shadow": 4,
    "attack": {"threshold": 2.0},
    "report": {"n_trajectories": 3},
}


@pytest.fixture(scope="module")
def tiny_cfg():
    return PipelineConfig.from_dict(TINY)


@pytest.fixture(scope="module")
def smoke_run(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    doc = pipeline.run_pipeline(tiny_cfg, out)
    return out, doc


EXPECTED = [
    "config.json", "manifest.json", "train/scores.jsonl", "train/scores.bin",
    "train/posteriors.npy", "train/train_loss.json", "attack/states.jsonl",
    "dynamics/metrics.json", "dynamics/transitions.csv", "dynamics/exposure.csv",
    "dynamics/clusters.csv", "hardness/hardness.csv", "correlate/correlations.csv",
] + list(pipeline.POOL_FILES) + [f"report/{n}" for n in pipeline.REPORT_FILES]


def test_pipeline_writes_all_artifacts(smoke_run):
    out, doc = smoke_run
    for rel in EXPECTED:
        assert (out / rel).is_file(), rel
    assert [doc["stages"][s]["status"] for s in pipeline.STAGES] == ["done"] * 7
    assert (out / "train/checkpoints/run_0").is_dir()
    metrics = json.loads((out / "dynamics/metrics.json").read_text())
    assert metrics["n_samples"] == 120
    rows = (out / "dynamics/transitions.csv").read_text().splitlines()
    assert len(rows) == 1 + 81 * 2  # two checkpoint intervals


def test_states_round_trip(smoke_run):
    out, _ = smoke_run
    field = pipeline.read_states(out / "attack/states.jsonl")
    tmp = out / "copy.jsonl"
    pipeline.write_states(field, tmp)
    assert tmp.read_bytes() == (out / "attack/states.jsonl").read_bytes()
    tmp.unlink()


def test_rerun_skips_everything(smoke_run, tiny_cfg, caplog):
    out, doc = smoke_run
    before = (out / "manifest.json").read_text()
    with caplog.at_level(logging.INFO, logger="memdyn.pipeline"):
        pipeline.run_pipeline(tiny_cfg, out)
    skipped = [r.getMessage() for r in caplog.records if "up to date" in r.getMessage()]
    assert len(skipped) == len(pipeline.STAGES)
    assert (out / "manifest.json").read_text() == before


def test_config_change_reruns_downstream_only(smoke_run, tiny_cfg, tmp_path, caplog):
    import shutil
    out = tmp_path / "copy"
    shutil.copytree(smoke_run[0], out)
    cfg = PipelineConfig.from_dict({**TINY, "report": {"n_trajectories": 2}})
    with caplog.at_level(logging.INFO, logger="memdyn.pipeline"):
        pipeline.run_pipeline(cfg, out)
    ran = [r.getMessage().split(":")[0] for r in caplog.records if "running" in r.getMessage()]
    assert ran == ["report"]


def test_corrupted_input_is_detected(smoke_run, tiny_cfg, tmp_path):
    import shutil
    out = tmp_path / "copy"
    shutil.copytree(smoke_run[0], out)
    path = out / "train/scores.jsonl"
    path.write_text(path.read_text().replace("0.", "1.", 1))
    with pytest.raises(pipeline.HashMismatchError, match="scores.jsonl"):
        pipeline.run_stage("attack", tiny_cfg, out)


def test_missing_input_fails(tiny_cfg, tmp_path):
    with pytest.raises(pipeline.StageError, match=r"\[attack\]"):
        pipeline.run_stage("attack", tiny_cfg, tmp_path)


def test_threads_do_not_change_results(smoke_run, tiny_cfg, tmp_path):
    out1, _ = smoke_run
    out2 = tmp_path / "threads"
    pipeline.run_pipeline(tiny_cfg, out2, threads=2)
    compare = ["dynamics/metrics.json", "correlate/correlations.csv", "train/scores.jsonl",
               "hardness/hardness.csv"] + [f"report/{n}" for n in pipeline.REPORT_FILES]
    for rel in compare:
        assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes(), rel
    m1 = json.loads((out1 / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    strip = lambda m: {k: {f: v for f, v in e.items() if f != "wall_time_s"}
                       for k, e in m["stages"].items()}
    assert strip(m1) == strip(m2) and m1["config_hash"] == m2["config_hash"]
