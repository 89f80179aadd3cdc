"""Shadow-population training and per-checkpoint score logging.

Every model gets its own RNG stream seeded from (master seed, model id), so
a population trained across many processes is identical to one trained
serially. At each checkpoint every pool sample, member or not, is scored.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from concurrent import futures
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from memdyn import nn, optim
from memdyn.data import MembershipPlan, SamplePool

logger = logging.getLogger(__name__)

CONF_CLAMP = 1e-6


class TrainingDivergedError(RuntimeError):
    pass


class ScoreLogError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    widths: tuple[int, ...] | None = None  # hidden widths only; None -> (64, 64)
    epochs: int = 60
    checkpoint_interval: int = 5
    batch_size: int = 32
    optimizer: optim.OptimizerConfig = optim.OptimizerConfig()

    def validate(self) -> None:
        if self.epochs <= 0 or self.checkpoint_interval <= 0:
            raise ValueError("epochs and checkpoint_interval must be positive")
        if self.epochs % self.checkpoint_interval:
            raise ValueError("checkpoint_interval must divide epochs")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0 (0 = full batch)")
        self.optimizer.validate()

    def layer_widths(self, dim: int, n_classes: int) -> tuple[int, ...]:
        hidden = (64, 64) if self.widths is None else tuple(self.widths)
        return (dim, *hidden, n_classes)

    @property
    def checkpoint_epochs(self) -> tuple[int, ...]:
        return tuple(range(0, self.epochs + 1, self.checkpoint_interval))


@dataclasses.dataclass
class TrainRun:
    model_id: int
    members: np.ndarray
    checkpoint_epochs: tuple[int, ...]
    checkpoints: list[nn.ModelParams]
    rng_seed: tuple[int, int]
    losses: list[float] = dataclasses.field(default_factory=list)


@dataclasses.dataclass
class ScoreLog:
    """Dense (checkpoint, model, sample) tables; record order is canonical.

    ``posteriors`` keeps the full probability vectors, shape (T, N, M, C);
    the record stream itself only carries the target-class confidence.
    """

    epochs: np.ndarray
    model_ids: np.ndarray
    sample_ids: np.ndarray
    member: np.ndarray  # (N, M) uint8
    conf: np.ndarray  # (T, N, M)
    loss: np.ndarray
    correct: np.ndarray
    posteriors: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.conf.shape

    def __len__(self) -> int:
        return int(np.prod(self.conf.shape))

    def records(self):
        """Flat columns in (epoch, model, sample) order."""
        T, N, M = self.shape
        return {
            "epoch": np.repeat(self.epochs, N * M),
            "model": np.tile(np.repeat(self.model_ids, M), T),
            "sample": np.tile(self.sample_ids, T * N),
            "member": np.tile(self.member.reshape(-1), T),
            "conf": self.conf.reshape(-1),
            "loss": self.loss.reshape(-1),
            "correct": self.correct.reshape(-1),
        }

    @classmethod
    def from_records(cls, epoch, model, sample, member, conf, loss, correct) -> "ScoreLog":
        """Rebuild dense tables from records in any order.

        Raises ScoreLogError naming missing or duplicated (epoch, model, sample)
        keys; nothing is interpolated.
        """
        epoch, model, sample = (np.asarray(a, dtype=np.int64) for a in (epoch, model, sample))
        ep_u, ei = np.unique(epoch, return_inverse=True)
        mo_u, mi = np.unique(model, return_inverse=True)
        sa_u, si = np.unique(sample, return_inverse=True)
        T, N, M = len(ep_u), len(mo_u), len(sa_u)
        flat = (ei * N + mi) * M + si
        seen = np.bincount(flat, minlength=T * N * M)
        if np.any(seen > 1):
            k = int(np.flatnonzero(seen > 1)[0])
            raise ScoreLogError(f"duplicate record {_key(k, ep_u, mo_u, sa_u)}")
        if np.any(seen == 0):
            gaps = np.flatnonzero(seen == 0)
            shown = ", ".join(str(_key(k, ep_u, mo_u, sa_u)) for k in gaps[:10])
            raise ScoreLogError(
                f"{len(gaps)} missing (epoch, model, sample) records: {shown}"
            )

        def dense(values, dtype):
            out = np.empty(T * N * M, dtype=dtype)
            out[flat] = values
            return out.reshape(T, N, M)

        mem = dense(member, np.uint8)
        if np.any(mem != mem[0]):
            raise ScoreLogError("membership bits change between epochs")
        return cls(
            ep_u, mo_u, sa_u, mem[0],
            dense(conf, float), dense(loss, float), dense(correct, np.uint8),
        )


def _key(k, ep_u, mo_u, sa_u):
    N, M = len(mo_u), len(sa_u)
    return (int(ep_u[k // (N * M)]), int(mo_u[(k // M) % N]), int(sa_u[k % M]))


def model_rng(master_seed: int, model_id: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, model_id])


def _score(params: nn.ModelParams, X, y):
    probs = nn.forward(params, X)
    conf = np.clip(probs[np.arange(len(y)), y], CONF_CLAMP, 1 - CONF_CLAMP)
    correct = (probs.argmax(axis=1) == y).astype(np.uint8)
    return probs, conf, -np.log(conf), correct


def train_model(
    pool: SamplePool,
    members: np.ndarray,
    cfg: TrainConfig,
    master_seed: int,
    model_id: int,
) -> tuple[TrainRun, dict]:
    """Train one shadow model on the pool samples flagged in ``members``."""
    with threadpool_limits(1):
        return _train_model(pool, members, cfg, master_seed, model_id)


def _train_model(pool, members, cfg, master_seed, model_id):
    rng = model_rng(master_seed, model_id)
    widths = cfg.layer_widths(pool.dim, pool.n_classes)
    params = nn.init_params(widths, rng)
    flat = params.flat
    X, y = pool.features, pool.labels
    train_idx = np.flatnonzero(members)
    bs = cfg.batch_size or len(train_idx)
    state = optim.OptimizerState()
    ckpt_epochs = cfg.checkpoint_epochs

    run = TrainRun(model_id, np.asarray(members, dtype=np.uint8), ckpt_epochs, [],
                   (master_seed, model_id))
    scores = {"probs": [], "conf": [], "loss": [], "correct": []}

    def record():
        snap = params.with_flat(flat.copy())
        run.checkpoints.append(snap)
        for key, val in zip(scores, _score(snap, X, y)):
            scores[key].append(val)

    record()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, len(order), bs):
            batch = order[start : start + bs]
            Xb, yb = X[batch], y[batch]

            def grad_fn(w, Xb=Xb, yb=yb):
                return nn.loss_and_grad(params, Xb, yb, flat=w)

            try:
                flat, state, loss = optim.step(state, flat, grad_fn, cfg.optimizer)
            except FloatingPointError as exc:
                raise TrainingDivergedError(
                    f"model {model_id} diverged at epoch {epoch}: {exc}"
                ) from exc
            total += loss * len(batch)
        run.losses.append(total / len(order))
        if epoch % cfg.checkpoint_interval == 0:
            record()
    return run, {k: np.stack(v) for k, v in scores.items()}


def _train_task(args):
    return train_model(*args)


def train_population(
    pool: SamplePool,
    plan: MembershipPlan,
    cfg: TrainConfig,
    master_seed: int,
    threads: int = 1,
) -> tuple[list[TrainRun], ScoreLog]:
    cfg.validate()
    if plan.n_samples != pool.n_samples:
        raise ValueError(
            f"plan covers {plan.n_samples} samples but pool has {pool.n_samples}"
        )
    tasks = [(pool, plan.bits[i], cfg, master_seed, i) for i in range(plan.n_models)]
    if threads > 1 and len(tasks) > 1:
        with futures.ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_train_task, tasks))
    else:
        results = [_train_task(t) for t in tasks]

    runs = [r for r, _ in results]
    stack = {k: np.stack([s[k] for _, s in results], axis=1) for k in results[0][1]}
    log = ScoreLog(
        epochs=np.array(cfg.checkpoint_epochs),
        model_ids=np.arange(plan.n_models),
        sample_ids=np.asarray(pool.sample_ids),
        member=plan.bits.astype(np.uint8),
        conf=stack["conf"],
        loss=stack["loss"],
        correct=stack["correct"],
        posteriors=stack["probs"],
    )
    logger.info("trained %d models, %d score records", len(runs), len(log))
    return runs, log


# Persistence --------------------------------------------------------------

JSONL_KEYS = ("epoch", "model", "sample", "member", "conf", "loss", "correct")
_BIN_MAGIC = b"MDSL"


def write_jsonl(log: ScoreLog, path) -> None:
    """One JSON object per record; floats are written at float32 precision."""
    rec = log.records()
    conf = rec["conf"].astype(np.float32)
    loss = rec["loss"].astype(np.float32)
    with open(path, "w") as fh:
        for e, m, s, b, c, l, k in zip(
            rec["epoch"].tolist(), rec["model"].tolist(), rec["sample"].tolist(),
            rec["member"].tolist(), conf.tolist(), loss.tolist(), rec["correct"].tolist(),
        ):
            fh.write(
                f'{{"epoch": {e}, "model": {m}, "sample": {s}, "member": {b}, '
                f'"conf": {_f32(c)}, "loss": {_f32(l)}, "correct": {k}}}\n'
            )


def _f32(x: float) -> str:
    return repr(float(np.float32(x)))


def read_jsonl(path) -> ScoreLog:
    cols = {k: [] for k in JSONL_KEYS}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ScoreLogError(f"{path}: line {lineno}: {exc}") from exc
            if set(obj) != set(JSONL_KEYS):
                raise ScoreLogError(f"{path}: line {lineno}: keys {sorted(obj)}")
            for k in JSONL_KEYS:
                cols[k].append(obj[k])
    return ScoreLog.from_records(*(cols[k] for k in JSONL_KEYS))


def write_bin(log: ScoreLog, path) -> None:
    """Little-endian columnar layout: header, then one block per column."""
    rec = log.records()
    T, N, M = log.shape
    header = _BIN_MAGIC + struct.pack("<IQIII", 1, len(log), T, N, M)
    blocks = [
        rec["epoch"].astype("<u4"), rec["model"].astype("<u4"),
        rec["sample"].astype("<u4"), rec["member"].astype("u1"),
        rec["conf"].astype("<f4"), rec["loss"].astype("<f4"),
        rec["correct"].astype("u1"),
    ]
    with open(path, "wb") as fh:
        fh.write(header)
        for b in blocks:
            fh.write(b.tobytes())


def read_bin(path) -> ScoreLog:
    raw = Path(path).read_bytes()
    if raw[:4] != _BIN_MAGIC:
        raise ScoreLogError(f"{path}: offset 0: bad magic")
    version, n, T, N, M = struct.unpack("<IQIII", raw[4:28])
    if version != 1:
        raise ScoreLogError(f"{path}: unsupported version {version}")
    pos = 28
    cols = []
    for dtype in ("<u4", "<u4", "<u4", "u1", "<f4", "<f4", "u1"):
        size = n * np.dtype(dtype).itemsize
        if pos + size > len(raw):
            raise ScoreLogError(f"{path}: offset {pos}: truncated column block")
        cols.append(np.frombuffer(raw, dtype=dtype, count=n, offset=pos))
        pos += size
    log = ScoreLog.from_records(*cols)
    if log.shape != (T, N, M):
        raise ScoreLogError(f"{path}: header counts {(T, N, M)} != data {log.shape}")
    return log


def save_checkpoints(runs: list[TrainRun], directory) -> None:
    directory = Path(directory)
    for run in runs:
        d = directory / f"run_{run.model_id}"
        d.mkdir(parents=True, exist_ok=True)
        for epoch, params in zip(run.checkpoint_epochs, run.checkpoints):
            nn.save_params(params, d / f"ckpt_{epoch}.params")


def load_checkpoint(directory, model_id: int, epoch: int) -> nn.ModelParams:
    return nn.load_params(Path(directory) / f"run_{model_id}" / f"ckpt_{epoch}.params")
