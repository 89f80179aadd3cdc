"""Sample pools and membership plans.

Synthetic pools have two difficulty knobs: the distance between class
centres and a label-noise rate. Small external datasets load from CSV or
IDX files. A membership plan assigns every pool sample to roughly half of
the shadow models.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

KINDS = ("gaussian-blobs", "concentric-rings", "csv-file", "idx-file")


class DataFormatError(ValueError):
    """A data file could not be parsed; the message names the row or offset."""


@dataclasses.dataclass(frozen=True)
class DatasetSpec:
    kind: str = "gaussian-blobs"
    n_classes: int = 4
    n_samples: int = 1000
    dim: int = 8
    class_separation: float = 3.0
    label_noise_rate: float = 0.0
    seed: int = 0
    path: str | None = None
    labels_path: str | None = None

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unsupported dataset kind {self.kind!r}")
        if self.kind in ("csv-file", "idx-file"):
            if not self.path:
                raise ValueError(f"{self.kind} requires a path")
            return
        for name in ("n_classes", "n_samples", "dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_samples % self.n_classes:
            raise ValueError("n_samples must be divisible by n_classes")
        if self.class_separation < 0:
            raise ValueError("class_separation must be non-negative")
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise ValueError("label_noise_rate must be in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.kind == "gaussian-blobs" and self.dim < self.n_classes:
            raise ValueError("gaussian-blobs needs dim >= n_classes")
        if self.kind == "concentric-rings" and self.dim < 2:
            raise ValueError("concentric-rings needs dim >= 2")


@dataclasses.dataclass(frozen=True)
class SamplePool:
    features: np.ndarray
    labels: np.ndarray
    true_labels: np.ndarray
    sample_ids: np.ndarray
    n_classes: int

    def __post_init__(self):
        M = len(self.features)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if not (len(self.labels) == len(self.true_labels) == len(self.sample_ids) == M):
            raise ValueError("features, labels and ids disagree in length")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        for lab in (self.labels, self.true_labels):
            if M and (lab.min() < 0 or lab.max() >= self.n_classes):
                raise ValueError("label out of range")
        if len(np.unique(self.sample_ids)) != M:
            raise ValueError("sample ids are not unique")

    @property
    def n_samples(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - x.mean(axis=0)) / sd


def _flip_labels(rng: np.random.Generator, labels: np.ndarray, rate: float, C: int):
    noisy = labels.copy()
    n_flip = int(round(rate * len(labels)))
    if n_flip:
        idx = rng.choice(len(labels), size=n_flip, replace=False)
        # uniform over the C - 1 wrong classes
        shift = rng.integers(1, C, size=n_flip)
        noisy[idx] = (labels[idx] + shift) % C
    return noisy


def generate(spec: DatasetSpec) -> SamplePool:
    spec.validate()
    if spec.kind == "csv-file":
        return load_csv(spec.path, n_classes=spec.n_classes)
    if spec.kind == "idx-file":
        return load_idx(spec.path, spec.labels_path, spec.n_classes)

    rng = np.random.default_rng(spec.seed)
    M, C, d = spec.n_samples, spec.n_classes, spec.dim
    y = np.repeat(np.arange(C), M // C)
    rng.shuffle(y)
    if spec.kind == "gaussian-blobs":
        # centres on scaled basis vectors: pairwise distance separation * sqrt(2)
        centres = np.zeros((C, d))
        centres[np.arange(C), np.arange(C)] = spec.class_separation
        x = centres[y] + rng.standard_normal((M, d))
    else:
        direction = rng.standard_normal((M, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = (y + 1) * spec.class_separation
        x = direction * radius[:, None] + rng.standard_normal((M, d))
    x = _standardize(x)
    noisy = _flip_labels(rng, y, spec.label_noise_rate, C)
    return SamplePool(x, noisy, y, np.arange(M), C)


def load_csv(path, n_classes: int | None = None) -> SamplePool:
    """Read ``id,label,f0..f{d-1}`` rows. Classes default to max(label) + 1."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataFormatError(f"{path}: unreadable ({exc})") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: empty file")
        d = len(header) - 2
        expected = ["id", "label"] + [f"f{i}" for i in range(d)]
        if d < 1 or [h.strip() for h in header] != expected:
            raise DataFormatError(f"{path}: row 1: malformed header {header!r}")
        ids, labels, feats = [], [], []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise DataFormatError(
                    f"{path}: row {rowno}: expected {d + 2} fields, got {len(row)}"
                )
            try:
                ids.append(int(row[0]))
                labels.append(int(row[1]))
                feats.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}: row {rowno}: {exc}") from exc
            if labels[-1] < 0 or (n_classes is not None and labels[-1] >= n_classes):
                raise DataFormatError(
                    f"{path}: row {rowno}: label {labels[-1]} outside [0, {n_classes})"
                )
    if not ids:
        raise DataFormatError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    C = n_classes if n_classes is not None else int(y.max()) + 1
    return SamplePool(np.array(feats, dtype=float), y, y.copy(), np.array(ids), C)


_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_idx(path: Path) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"{path}: unreadable ({exc})") from exc
    if len(raw) < 4:
        raise DataFormatError(f"{path}: offset 0: truncated magic number")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_DTYPES:
        raise DataFormatError(f"{path}: offset 0: bad magic number {raw[:4].hex()}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: offset 4: truncated dimension header")
    shape = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = np.dtype(_IDX_DTYPES[code])
    need = int(np.prod(shape)) * dtype.itemsize
    if len(raw) - head != need:
        raise DataFormatError(
            f"{path}: offset {head}: expected {need} data bytes, found {len(raw) - head}"
        )
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(shape)


def load_idx(path, labels_path=None, n_classes: int | None = None) -> SamplePool:
    """Load an IDX image file (and optional label file), flattened to [0, 1].

    Without a label file every sample gets label 0.
    """
    images = _read_idx(Path(path))
    M = images.shape[0]
    x = images.reshape(M, -1).astype(float)
    if images.dtype.kind == "u" and images.dtype.itemsize == 1:
        x /= 255.0
    if labels_path is not None:
        y = _read_idx(Path(labels_path)).astype(np.int64)
        if y.ndim != 1 or len(y) != M:
            raise DataFormatError(
                f"{labels_path}: offset 4: {y.shape} labels for {M} images"
            )
    else:
        y = np.zeros(M, dtype=np.int64)
    C = n_classes if n_classes is not None else int(y.max()) + 1
    return SamplePool(x, y, y.copy(), np.arange(M), C)


@dataclasses.dataclass(frozen=True)
class MembershipPlan:
    """bits[i, j] == 1 when sample j is in model i's training set."""

    bits: np.ndarray

    @property
    def n_models(self) -> int:
        return self.bits.shape[0]

    @property
    def n_samples(self) -> int:
        return self.bits.shape[1]

    def train_indices(self, model: int) -> np.ndarray:
        return np.flatnonzero(self.bits[model])

    def holdout_indices(self, model: int) -> np.ndarray:
        return np.flatnonzero(self.bits[model] == 0)


MIN_PER_SIDE = 2


def plan_membership(M: int, N: int, seed: int) -> MembershipPlan:
    """Bernoulli(0.5) bits, redrawing any sample column short of 2 in or 2 out."""
    if N < 2 * MIN_PER_SIDE:
        raise ValueError(f"need at least {2 * MIN_PER_SIDE} models, got {N}")
    rng = np.random.default_rng([seed, 0x6D656D62])
    bits = rng.integers(0, 2, size=(N, M), dtype=np.uint8)
    while True:
        n_in = bits.sum(axis=0)
        bad = np.flatnonzero((n_in < MIN_PER_SIDE) | (N - n_in < MIN_PER_SIDE))
        if not len(bad):
            return MembershipPlan(bits)
        bits[:, bad] = rng.integers(0, 2, size=(N, len(bad)), dtype=np.uint8)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def save_pool(pool: SamplePool, directory, spec: DatasetSpec | None = None) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = {
        "features.f32": pool.features.astype("<f4"),
        "labels.u16": pool.labels.astype("<u2"),
        "true_labels.u16": pool.true_labels.astype("<u2"),
        "ids.u32": pool.sample_ids.astype("<u4"),
    }
    for name, arr in blobs.items():
        (directory / name).write_bytes(arr.tobytes())
    meta = {
        "spec": dataclasses.asdict(spec) if spec else None,
        "n_samples": pool.n_samples,
        "dim": pool.dim,
        "n_classes": pool.n_classes,
        "hashes": {name: file_sha256(directory / name) for name in blobs},
    }
    (directory / "pool.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def load_pool(directory) -> SamplePool:
    directory = Path(directory)
    meta = json.loads((directory / "pool.meta.json").read_text())
    for name, digest in meta["hashes"].items():
        if file_sha256(directory / name) != digest:
            raise DataFormatError(f"{directory / name}: hash mismatch")
    M, d = meta["n_samples"], meta["dim"]

    def read(name, dtype):
        return np.frombuffer((directory / name).read_bytes(), dtype=dtype)

    x = read("features.f32", "<f4").reshape(M, d).astype(float)
    return SamplePool(
        x,
        read("labels.u16", "<u2").astype(np.int64),
        read("true_labels.u16", "<u2").astype(np.int64),
        read("ids.u32", "<u4").astype(np.int64),
        meta["n_classes"],
    )
