"""Resumable end-to-end pipeline: data, training, attack, analysis, report.

Every stage reads its inputs from the output directory and writes its
outputs there. ``manifest.json`` records, per stage, a key derived from the
relevant configuration and the input file hashes, plus a hash of every
output. A stage whose key matches and whose outputs verify is skipped.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from memdyn import __version__, attacks, data, dynamics, hardness, report, trainer
from memdyn.config import PipelineConfig
from memdyn.plane import cell_label

logger = logging.getLogger(__name__)

STAGES = ("gen-data", "train", "attack", "dynamics", "hardness", "correlate", "report")

TRAVEL_Q = 0.1
REPORT_FILES = ("plane_initial.svg", "plane_final.svg", "exposure.svg", "entropy.svg",
                "transitions.svg", "com.svg", "loss.svg")


class StageError(RuntimeError):
    """A stage failed; the message starts with the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class HashMismatchError(StageError):
    pass


@dataclasses.dataclass
class StageResult:
    outputs: list[str]
    warnings: list[str] = dataclasses.field(default_factory=list)


# Manifest -------------------------------------------------------------------


class Manifest:
    def __init__(self, path: Path, config_hash: str):
        self.path = path
        self.doc = {"config_hash": config_hash, "tool_version": __version__, "stages": {}}
        if path.exists():
            # stage keys, not the overall hash, decide what is still current
            self.doc["stages"] = json.loads(path.read_text()).get("stages", {})

    def stage(self, name: str) -> dict | None:
        return self.doc["stages"].get(name)

    def record(self, name: str, entry: dict) -> None:
        self.doc["stages"][name] = entry
        self.doc["stages"] = {k: self.doc["stages"][k] for k in STAGES if k in self.doc["stages"]}
        self.save()

    def save(self) -> None:
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n")

    @property
    def artifacts(self) -> dict[str, str]:
        out = {}
        for entry in self.doc["stages"].values():
            out.update(entry.get("outputs", {}))
        return out


def _sha(path: Path) -> str:
    return data.file_sha256(path)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# Stage inputs ---------------------------------------------------------------

_TRAIN = "train"
_DATA = "data"
POOL_FILES = tuple(f"{_DATA}/{n}" for n in ("pool.meta.json", "features.f32", "labels.u16",
                                              "true_labels.u16", "ids.u32"))


def _stage_inputs(stage: str, out: Path) -> list[str]:
    """Files (relative to the output directory) a stage reads."""
    pool = list(POOL_FILES)
    if stage == "gen-data":
        return []
    if stage == "train":
        return pool
    if stage == "attack":
        return pool + [f"{_TRAIN}/scores.jsonl", f"{_TRAIN}/posteriors.npy"]
    if stage == "dynamics":
        return ["attack/states.jsonl"]
    if stage == "hardness":
        ckpts = sorted(p.relative_to(out).as_posix() for p in (out / _TRAIN / "checkpoints").rglob("*.params"))
        return pool + [f"{_TRAIN}/scores.bin", f"{_TRAIN}/posteriors.npy"] + ckpts
    if stage == "correlate":
        return ["attack/states.jsonl", "hardness/hardness.csv"]
    if stage == "report":
        return ["attack/states.jsonl", "dynamics/metrics.json", "dynamics/transitions.csv",
                "dynamics/exposure.csv", f"{_TRAIN}/scores.bin"]
    raise ValueError(stage)


def _stage_config(stage: str, cfg: PipelineConfig) -> dict:
    d = cfg.to_dict()
    if stage == "gen-data":
        return {"dataset": d["dataset"]}
    if stage == "train":
        return {k: d[k] for k in ("seed", "hidden", "optimizer", "epochs",
                                  "checkpoint_interval", "batch_size", "n_shadow")}
    if stage == "attack":
        return {"attack": d["attack"]}
    if stage == "dynamics":
        return {"dynamics": d["dynamics"]}
    if stage == "hardness":
        return {"hardness": d["hardness"]}
    if stage == "correlate":
        return {"theta_vuln": d["dynamics"]["theta_vuln"]}
    return {"report": d["report"], "theta_vuln": d["dynamics"]["theta_vuln"]}


def _verify_inputs(stage: str, out: Path, manifest: Manifest, paths: list[str]) -> dict:
    known = manifest.artifacts
    hashes = {}
    for rel in paths:
        p = out / rel
        if not p.exists():
            raise StageError(stage, f"missing input {rel}; run the producing stage first")
        h = _sha(p)
        if rel in known and known[rel] != h:
            raise HashMismatchError(stage, f"hash mismatch for input {rel}: "
                                           f"expected {known[rel][:12]}, found {h[:12]}")
        hashes[rel] = h
    return hashes


def _outputs_valid(out: Path, entry: dict) -> bool:
    for rel, h in entry.get("outputs", {}).items():
        p = out / rel
        if not p.exists() or _sha(p) != h:
            return False
    return True


# Stage bodies ---------------------------------------------------------------


def _load_pool(out: Path) -> data.SamplePool:
    return data.load_pool(out / _DATA)


def _gen_data(cfg: PipelineConfig, out: Path, threads: int) -> StageResult:
    data.save_pool(data.generate(cfg.dataset), out / _DATA, cfg.dataset)
    return StageResult(list(POOL_FILES))


def _train(cfg: PipelineConfig, out: Path, threads: int) -> StageResult:
    pool = _load_pool(out)
    plan = data.plan_membership(pool.n_samples, cfg.n_shadow, cfg.seed)
    runs, log = trainer.train_population(pool, plan, cfg.train_config(), cfg.seed, threads)
    d = out / _TRAIN
    d.mkdir(parents=True, exist_ok=True)
    trainer.write_jsonl(log, d / "scores.jsonl")
    trainer.write_bin(log, d / "scores.bin")
    np.save(d / "posteriors.npy", log.posteriors.astype("<f4"))
    trainer.save_checkpoints(runs, d / "checkpoints")
    losses = {str(r.model_id): [float(np.float32(x)) for x in r.losses] for r in runs}
    (d / "train_loss.json").write_text(json.dumps(losses, sort_keys=True) + "\n")
    files = ["scores.jsonl", "scores.bin", "posteriors.npy", "train_loss.json"]
    ckpts = sorted(p.relative_to(out).as_posix() for p in (d / "checkpoints").rglob("*.params"))
    return StageResult([f"{_TRAIN}/{f}" for f in files] + ckpts)


def _read_log(out: Path, jsonl: bool = False) -> trainer.ScoreLog:
    d = out / _TRAIN
    log = trainer.read_jsonl(d / "scores.jsonl") if jsonl else trainer.read_bin(d / "scores.bin")
    post = np.load(d / "posteriors.npy").astype(float)
    if post.shape[:3] != log.shape:
        raise ValueError(f"posteriors shape {post.shape} does not match score log {log.shape}")
    return dataclasses.replace(log, posteriors=post)


def write_states(field: attacks.VulnerabilityField, path: Path) -> None:
    with open(path, "w") as fh:
        for e, s, f, t, a in field.records():
            fh.write(f'{{"epoch": {e}, "sample": {s}, "fpr": {f!r}, "tpr": {t!r}, "adv": {a!r}}}\n')


def read_states(path: Path) -> attacks.VulnerabilityField:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{path}: no states")
    epochs = np.unique([r["epoch"] for r in rows])
    ids = np.unique([r["sample"] for r in rows])
    T, M = len(epochs), len(ids)
    if len(rows) != T * M:
        raise ValueError(f"{path}: expected {T * M} states, found {len(rows)}")
    fpr = np.full((M, T), np.nan)
    tpr = np.full((M, T), np.nan)
    et = {int(e): i for i, e in enumerate(epochs)}
    sj = {int(s): j for j, s in enumerate(ids)}
    for r in rows:
        fpr[sj[r["sample"]], et[r["epoch"]]] = r["fpr"]
        tpr[sj[r["sample"]], et[r["epoch"]]] = r["tpr"]
    if np.isnan(fpr).any():
        raise ValueError(f"{path}: duplicate (epoch, sample) records")
    return attacks.VulnerabilityField(epochs, ids, fpr, tpr)


def _attack(cfg: PipelineConfig, out: Path, threads: int) -> StageResult:
    pool = _load_pool(out)
    log = _read_log(out, jsonl=True)
    field = attacks.vulnerability_field(log, cfg.attack.lira(), cfg.attack.method, pool.labels)
    d = out / "attack"
    d.mkdir(parents=True, exist_ok=True)
    write_states(field, d / "states.jsonl")
    return StageResult(["attack/states.jsonl"])


def _csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _num(x) -> str:
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return ""
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _dynamics(cfg: PipelineConfig, out: Path, threads: int) -> StageResult:
    field = read_states(out / "attack" / "states.jsonl")
    dc = cfg.dynamics
    summary = dynamics.summarize(field, dc.theta_vuln, dc.entropy_resolution,
                                 dc.dbscan_eps, dc.dbscan_min_pts)
    curve = dynamics.exposure_curve(field, dc.theta_vuln)
    d = out / "dynamics"
    d.mkdir(parents=True, exist_ok=True)
    metrics = summary.to_dict()
    metrics["epochs"] = [int(e) for e in field.epochs]
    metrics["n_samples"] = field.n_samples
    metrics["attack_method"] = cfg.attack.method
    metrics["attack_threshold"] = cfg.attack.threshold
    metrics["theta_vuln"] = dc.theta_vuln
    if field.n_samples >= 2 / TRAVEL_Q:
        high, low = dynamics.travel_stratification(field, TRAVEL_Q)
        metrics["travel"] = {"q": TRAVEL_Q, "high": high.tolist(), "low": low.tolist()}
    (d / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")

    rows = []
    for tm in dynamics.transition_series(field):
        occ = tm.occupied
        for i in range(9):
            for j in range(9):
                p = tm.probs[i, j] if occ[i] else None
                rows.append((tm.epoch_from, cell_label(i), cell_label(j),
                             int(tm.counts[i, j]), _num(p)))
    _csv(d / "transitions.csv", ("epoch_from", "from_cell", "to_cell", "count", "prob"), rows)
    _csv(d / "exposure.csv", ("epoch", "coverage"),
         [(int(e), _num(c)) for e, c in zip(curve.epochs, curve.coverage)])
    _csv(d / "clusters.csv", ("epoch", "n_clusters"),
         [(int(e), int(c)) for e, c in zip(field.epochs, summary.cluster_counts)])
    return StageResult([f"dynamics/{f}" for f in
                        ("metrics.json", "transitions.csv", "exposure.csv", "clusters.csv")])


HARDNESS_COLUMNS = ("sample", "grad_norm", "iteration_learned", "influence",
                    "aleatoric", "epistemic")


def _hardness(cfg: PipelineConfig, out: Path, threads: int) -> StageResult:
    pool = _load_pool(out)
    log = _read_log(out)
    ckdir = out / _TRAIN / "checkpoints"
    ckpts = [[trainer.load_checkpoint(ckdir, int(m), int(e)) for e in log.epochs]
             for m in log.model_ids]
    hc = cfg.hardness
    prof = hardness.build_profile(ckpts, pool.features, pool.labels, log.member,
                                  log.correct, log.posteriors, pool.sample_ids,
                                  hc.damping, hc.ensemble, hc.checkpoint)
    d = out / "hardness"
    d.mkdir(parents=True, exist_ok=True)
    rows = [(int(s), _num(g), int(it), _num(inf), _num(a), _num(e)) for s, g, it, inf, a, e in
            zip(prof.sample_ids, prof.grad_norm, prof.iteration_learned, prof.influence,
                prof.aleatoric, prof.epistemic)]
    _csv(d / "hardness.csv", HARDNESS_COLUMNS, rows)
    meta = {
        "n_checkpoints": prof.n_checkpoints,
        "never": hardness.NEVER,
        "never_maps_to": prof.n_checkpoints,
        "grad_norm": "mean over every checkpoint of each in-model",
        "iteration_learned": "majority of in-models correct; checkpoint index",
        "influence": "output-layer self-influence at the final checkpoint, mean over in-models",
        "influence_damping": hc.damping,
        "uncertainty_ensemble": hc.ensemble,
        "uncertainty_checkpoint_epoch": int(log.epochs[hc.checkpoint]),
    }
    (d / "hardness.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return StageResult(["hardness/hardness.csv", "hardness/hardness.meta.json"])


def read_hardness(path: Path, n_checkpoints: int) -> hardness.HardnessProfile:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    col = {k: np.array([float(r[k]) for r in rows]) for k in HARDNESS_COLUMNS}
    return hardness.HardnessProfile(
        sample_ids=col["sample"].astype(np.int64),
        grad_norm=col["grad_norm"],
        iteration_learned=col["iteration_learned"].astype(np.int64),
        influence=col["influence"],
        aleatoric=col["aleatoric"],
        epistemic=col["epistemic"],
        n_checkpoints=n_checkpoints,
    )


def _correlate(cfg: PipelineConfig, out: Path, threads: int) -> StageResult:
    field = read_states(out / "attack" / "states.jsonl")
    prof = read_hardness(out / "hardness" / "hardness.csv", len(field.epochs))
    if not np.array_equal(prof.sample_ids, field.sample_ids):
        raise ValueError("hardness.csv and states.jsonl cover different samples")
    table = hardness.correlation_table(prof, field.advantage, cfg.dynamics.theta_vuln)
    d = out / "correlate"
    d.mkdir(parents=True, exist_ok=True)
    _csv(d / "correlations.csv", ("metric", "target", "subset", "r", "n"),
         [(m, t, s, "undefined" if r is None else repr(r), n) for m, t, s, r, n in table.rows()])
    return StageResult(["correlate/correlations.csv"])


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _opt(v: str) -> float:
    return float(v) if v != "" else math.nan


def _report(cfg: PipelineConfig, out: Path, threads: int) -> StageResult:
    field = read_states(out / "attack" / "states.jsonl")
    metrics = json.loads((out / "dynamics" / "metrics.json").read_text())
    d = out / "report"
    d.mkdir(parents=True, exist_ok=True)
    warnings: list[str] = []
    epochs = field.epochs

    n = cfg.report.n_trajectories
    L = field.advantage
    travel = np.abs(np.diff(L, axis=1)).sum(axis=1)
    picks = np.lexsort((field.sample_ids, -travel))[:n]
    trajs = [(field.sample_ids[j], field.fpr[j], field.tpr[j]) for j in picks]
    files = {
        "plane_initial.svg": report.render_plane(field.fpr[:, 0], field.tpr[:, 0],
                                                 histograms=cfg.report.histograms,
                                                 title=f"epoch {int(epochs[0])}"),
        "plane_final.svg": report.render_plane(field.fpr[:, -1], field.tpr[:, -1], trajs,
                                               histograms=cfg.report.histograms,
                                               title=f"epoch {int(epochs[-1])}"),
    }
    exp = _read_csv(out / "dynamics" / "exposure.csv")
    files["exposure.svg"] = report.render_curves(
        {"coverage": ([int(r["epoch"]) for r in exp], [_opt(r["coverage"]) for r in exp])},
        "exposure", ylabel="coverage of final vulnerable set", warnings=warnings,
        title="exposure")
    ent = metrics["entropy_series"]
    files["entropy.svg"] = report.render_curves(
        {"H": (epochs, [math.nan if v is None else v for v in ent])}, "entropy",
        ylabel="spatial entropy (nats)", warnings=warnings, title="entropy")
    trans = _read_csv(out / "dynamics" / "transitions.csv")
    series = {}
    for src, dst in (("S11", "S31"), ("S31", "S31"), ("S31", "S11")):
        sel = [r for r in trans if r["from_cell"] == src and r["to_cell"] == dst]
        series[f"a({src},{dst})"] = ([int(r["epoch_from"]) for r in sel],
                                     [_opt(r["prob"]) for r in sel])
    files["transitions.svg"] = report.render_curves(series, "transition",
                                                    ylabel="transition probability",
                                                    warnings=warnings, title="transitions")
    com = np.array([[math.nan if v is None else v for v in row] for row in metrics["com_series"]])
    files["com.svg"] = report.render_curves(
        {"FPR": (epochs, com[:, 0]), "TPR": (epochs, com[:, 1])}, "generic",
        ylabel="centre of mass", warnings=warnings, title="centre of mass")
    log = trainer.read_bin(out / _TRAIN / "scores.bin")
    b = log.member.astype(bool)
    files["loss.svg"] = report.render_curves(
        {"members": log.loss[-1][b], "non-members": log.loss[-1][~b]}, "histogram",
        xlabel="final-checkpoint loss", title="loss distribution")
    for name, svg in files.items():
        (d / name).write_text(svg)
    return StageResult([f"report/{f}" for f in REPORT_FILES], warnings)


_BODIES = {
    "gen-data": _gen_data,
    "train": _train,
    "attack": _attack,
    "dynamics": _dynamics,
    "hardness": _hardness,
    "correlate": _correlate,
    "report": _report,
}


# Driver ---------------------------------------------------------------------


def run_stage(name: str, cfg: PipelineConfig, out, threads: int = 1,
              manifest: Manifest | None = None) -> dict:
    """Run one stage unless its recorded outputs are current. Returns its entry."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = manifest or Manifest(out / "manifest.json", cfg.digest())
    inputs = _verify_inputs(name, out, manifest, _stage_inputs(name, out))
    key = _digest({"stage": name, "config": _stage_config(name, cfg), "inputs": inputs})
    old = manifest.stage(name)
    if old and old.get("status") == "done" and old.get("key") == key and _outputs_valid(out, old):
        logger.info("%s: up to date, skipped", name)
        return old
    logger.info("%s: running", name)
    start = time.perf_counter()
    try:
        result = _BODIES[name](cfg, out, threads)
    except StageError:
        raise
    except Exception as exc:
        manifest.record(name, {"status": "failed", "key": key, "error": str(exc)})
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    entry = {
        "status": "done",
        "key": key,
        "wall_time_s": round(time.perf_counter() - start, 3),
        "outputs": {rel: _sha(out / rel) for rel in result.outputs},
        "warnings": result.warnings,
    }
    manifest.record(name, entry)
    return entry


def run_pipeline(cfg: PipelineConfig, out, threads: int = 1,
                 stages=STAGES) -> dict:
    """Run ``stages`` in order and return the manifest document."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out / "manifest.json", cfg.digest())
    (out / "config.json").write_text(cfg.to_json())
    for name in stages:
        run_stage(name, cfg, out, threads, manifest)
    return manifest.doc
