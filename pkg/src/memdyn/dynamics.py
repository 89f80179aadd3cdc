"""Population-level dynamics on the vulnerability plane.

All functions take dense (M, T) tables of fpr and tpr (rows are samples,
columns checkpoints). ``tables`` converts a VulnerabilityField or a list of
Trajectory objects into that form. Undefined quantities are returned as
NaN rather than a misleading zero.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from memdyn import dbscan as _dbscan
from memdyn.plane import Trajectory, cell_index, path_lengths, stack_trajectories

S11 = 0  # robust: low TPR, low FPR
S31 = 6  # vulnerable: high TPR, low FPR


def tables(population) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(population, "fpr") and hasattr(population, "tpr"):
        return np.asarray(population.fpr, float), np.asarray(population.tpr, float)
    if isinstance(population, (list, tuple)) and population and isinstance(population[0], Trajectory):
        return stack_trajectories(population)
    fpr, tpr = population
    return np.asarray(fpr, float), np.asarray(tpr, float)


def _coords(states) -> np.ndarray:
    if len(states) and hasattr(states[0], "fpr"):
        return np.array([(s.fpr, s.tpr) for s in states], dtype=float)
    return np.asarray(states, dtype=float).reshape(-1, 2)


# Transition matrices --------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class TransitionMatrix:
    epoch_from: int
    counts: np.ndarray
    probs: np.ndarray

    @property
    def occupied(self) -> np.ndarray:
        return self.counts.sum(axis=1) > 0

    def prob(self, src: int, dst: int) -> float:
        """Entry a_{src,dst}; NaN when no sample started in ``src``."""
        return float(self.probs[src, dst]) if self.occupied[src] else math.nan


def transition_matrix(states_t, states_t1, epoch_from: int = 0,
                      resolution: int = 3) -> TransitionMatrix:
    """Counts and row-normalised probabilities of cell-to-cell moves.

    ``states_*`` are aligned sequences of VulnerabilityState or (fpr, tpr)
    pairs.
    """
    a, b = _coords(states_t), _coords(states_t1)
    if len(a) != len(b):
        raise ValueError(f"population sizes differ: {len(a)} vs {len(b)}")
    k = resolution * resolution
    src = cell_index(a[:, 0], a[:, 1], resolution)
    dst = cell_index(b[:, 0], b[:, 1], resolution)
    counts = np.bincount(src * k + dst, minlength=k * k).reshape(k, k)
    rows = counts.sum(axis=1, keepdims=True)
    probs = np.divide(counts, rows, out=np.zeros((k, k)), where=rows > 0)
    return TransitionMatrix(epoch_from, counts, probs)


def transition_series(population, epochs=None) -> list[TransitionMatrix]:
    fpr, tpr = tables(population)
    T = fpr.shape[1]
    if epochs is None:
        epochs = getattr(population, "epochs", range(T))
    epochs = list(epochs)
    return [
        transition_matrix(
            np.column_stack([fpr[:, t], tpr[:, t]]),
            np.column_stack([fpr[:, t + 1], tpr[:, t + 1]]),
            epoch_from=int(epochs[t]),
        )
        for t in range(T - 1)
    ]


def robust_to_vulnerable_series(population) -> np.ndarray:
    """P(S_11 -> S_31) for each interval; NaN where S_11 was empty."""
    fpr, _ = tables(population)
    if fpr.shape[1] < 2:
        raise ValueError("need at least 2 checkpoints")
    return np.array([m.prob(S11, S31) for m in transition_series(population)])


# Motion metrics -------------------------------------------------------------


def com_series(population) -> np.ndarray:
    """(T, 2) centre of mass (fpr, tpr) per checkpoint."""
    fpr, tpr = tables(population)
    if fpr.size == 0:
        raise ValueError("empty population")
    return np.column_stack([fpr.mean(axis=0), tpr.mean(axis=0)])


def com_displacement(series) -> float:
    """Total length of the centre-of-mass path."""
    series = np.asarray(series, dtype=float)
    if len(series) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(series, axis=0), axis=1).sum())


def mean_encoding_speed(population, mask=None) -> float:
    """Mean step length over the selected samples and every interval."""
    fpr, tpr = tables(population)
    if fpr.shape[1] < 2:
        raise ValueError("need at least 2 checkpoints")
    if mask is not None:
        fpr, tpr = fpr[mask], tpr[mask]
    if not len(fpr):
        return math.nan
    return float(np.hypot(np.diff(fpr, axis=1), np.diff(tpr, axis=1)).mean())


def _principal_axis(cov: np.ndarray):
    """Dominant eigenvector of a symmetric 2x2 matrix, or None if isotropic."""
    a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
    half_gap = math.hypot((a - c) / 2, b)
    if half_gap <= 1e-12 * max(abs(a) + abs(c), 1e-300):
        return None
    lam = (a + c) / 2 + half_gap
    if abs(b) > 0:
        v = np.array([lam - c, b]) if a >= c else np.array([b, lam - a])
    else:
        v = np.array([1.0, 0.0]) if a > c else np.array([0.0, 1.0])
    return v / np.linalg.norm(v)


def directional_angle(com) -> float:
    """Angle (radians, atan2 of tpr over fpr) of the CoM's dominant drift axis.

    The principal eigenvector of the velocity covariance is oriented to
    agree with the mean velocity. With no dominant axis the mean velocity's
    own angle is used; if that is zero too the angle is NaN.
    """
    com = np.asarray(com, dtype=float)
    vel = np.diff(com, axis=0)
    if len(vel) < 2:
        raise ValueError("need at least 2 velocity vectors (3 checkpoints)")
    mean = vel.mean(axis=0)
    axis = _principal_axis(np.cov(vel.T))
    if axis is None:
        if not np.any(mean):
            return math.nan
        return math.atan2(mean[1], mean[0])
    d = float(axis @ mean)
    if d < 0 or (d == 0 and (axis[1] < 0 or (axis[1] == 0 and axis[0] < 0))):
        axis = -axis
    return math.atan2(axis[1], axis[0])


# Information metrics --------------------------------------------------------


def spatial_entropy(states, resolution: int = 3) -> float:
    """Shannon entropy (nats) of grid-cell occupancy at one checkpoint."""
    pts = _coords(states)
    if not len(pts):
        raise ValueError("empty population")
    counts = np.bincount(cell_index(pts[:, 0], pts[:, 1], resolution))
    p = counts[counts > 0] / len(pts)
    return float(-(p * np.log(p)).sum()) + 0.0


def entropy_series(population, resolution: int = 3) -> np.ndarray:
    fpr, tpr = tables(population)
    return np.array([
        spatial_entropy(np.column_stack([fpr[:, t], tpr[:, t]]), resolution)
        for t in range(fpr.shape[1])
    ])


# Clustering metrics ---------------------------------------------------------


def cluster_counts(population, eps: float = 0.02, min_pts: int = 5) -> np.ndarray:
    """DBSCAN cluster count per checkpoint, noise excluded."""
    fpr, tpr = tables(population)
    return np.array([
        _dbscan.n_clusters(_dbscan.dbscan(np.column_stack([fpr[:, t], tpr[:, t]]), eps, min_pts))
        for t in range(fpr.shape[1])
    ])


# Path-length analyses -------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ExposureCurve:
    epochs: np.ndarray
    coverage: np.ndarray
    vulnerable_set_size: int
    flag_budget: int

    @property
    def defined(self) -> bool:
        return self.vulnerable_set_size > 0


def _ids(population, sample_ids, M: int) -> np.ndarray:
    if sample_ids is not None:
        return np.asarray(sample_ids)
    return np.asarray(getattr(population, "sample_ids", np.arange(M)))


def _rank(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties by ascending id."""
    return np.lexsort((ids, -scores))


def exposure_curve(population, threshold: float = 0.0, budget: str | float = "vulnerable",
                   sample_ids=None, epochs=None) -> ExposureCurve:
    """Share of the final vulnerable set flagged early by prefix path length.

    At each checkpoint the ``budget`` samples with the longest path so far
    are flagged. ``budget`` is "vulnerable" (flag as many as are finally
    vulnerable) or a fraction of the population.
    """
    fpr, tpr = tables(population)
    M, T = fpr.shape
    if T < 2:
        raise ValueError("need at least 2 checkpoints")
    ids = _ids(population, sample_ids, M)
    if epochs is None:
        epochs = getattr(population, "epochs", np.arange(T))
    alpha = tpr - fpr
    vulnerable = alpha[:, -1] > threshold
    n_v = int(vulnerable.sum())
    k = n_v if budget == "vulnerable" else int(round(float(budget) * M))
    if n_v == 0:
        return ExposureCurve(np.asarray(epochs), np.full(T, math.nan), 0, k)
    prefix = path_lengths(alpha)
    cov = np.empty(T)
    for t in range(T):
        flagged = _rank(prefix[:, t], ids)[:k]
        cov[t] = vulnerable[flagged].sum() / n_v
    return ExposureCurve(np.asarray(epochs), cov, n_v, k)


def travel_stratification(population, q: float = 0.1, sample_ids=None):
    """(high-travel ids, low-travel ids): top and bottom q by path length."""
    if not 0 < q < 0.5:
        raise ValueError("q must be in (0, 0.5)")
    fpr, tpr = tables(population)
    M = len(fpr)
    if M < 2 / q:
        raise ValueError(f"population of {M} too small for q={q}")
    ids = _ids(population, sample_ids, M)
    L = path_lengths(tpr - fpr)[:, -1]
    n = int(math.floor(q * M))
    order = _rank(L, ids)
    high = ids[order[:n]]
    low_order = np.lexsort((ids, L))
    low = ids[low_order[:n]]
    return high, low


# Summary --------------------------------------------------------------------


@dataclasses.dataclass
class PopulationSummary:
    com_series: np.ndarray
    com_displacement: float
    mean_speed: float
    mean_speed_vulnerable: float
    directional_angle: float
    entropy_series: np.ndarray
    delta_entropy: float
    cluster_counts: np.ndarray
    avg_clusters: float
    delta_clusters: int
    robust_to_vulnerable: np.ndarray
    peak_robust_to_vulnerable: float
    final_mean_advantage: float
    n_vulnerable: int
    entropy_resolution: int

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, np.ndarray):
                return [clean(x) for x in v.tolist()]
            if isinstance(v, list):
                return [clean(x) for x in v]
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, (np.floating, np.integer)):
                return clean(v.item())
            return v

        return {f.name: clean(getattr(self, f.name)) for f in dataclasses.fields(self)}


def summarize(population, threshold: float = 0.0, entropy_resolution: int = 30,
              eps: float = 0.02, min_pts: int = 5) -> PopulationSummary:
    fpr, tpr = tables(population)
    alpha = tpr - fpr
    com = com_series((fpr, tpr))
    ent = entropy_series((fpr, tpr), entropy_resolution)
    clusters = cluster_counts((fpr, tpr), eps, min_pts)
    r2v = robust_to_vulnerable_series((fpr, tpr))
    vulnerable = alpha[:, -1] > threshold
    return PopulationSummary(
        com_series=com,
        com_displacement=com_displacement(com),
        mean_speed=mean_encoding_speed((fpr, tpr)),
        mean_speed_vulnerable=mean_encoding_speed((fpr, tpr), vulnerable),
        directional_angle=directional_angle(com) if len(com) >= 3 else math.nan,
        entropy_series=ent,
        delta_entropy=float(ent[-1] - ent[0]),
        cluster_counts=clusters,
        avg_clusters=float(clusters.mean()),
        delta_clusters=int(clusters[-1] - clusters[0]),
        robust_to_vulnerable=r2v,
        peak_robust_to_vulnerable=float(np.nanmax(r2v)) if np.any(np.isfinite(r2v)) else math.nan,
        final_mean_advantage=float(alpha[:, -1].mean()),
        n_vulnerable=int(vulnerable.sum()),
        entropy_resolution=entropy_resolution,
    )
