"""Membership inference over a shadow population.

Each model in the population takes a turn as the target. Its observation of
a sample is scored against reference distributions fit on the other
models, the score is thresholded into a member / non-member decision, and
the decisions are counted against the true membership bits to give that
sample's (FPR, TPR) at one checkpoint.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from memdyn.plane import Trajectory, VulnerabilityState
from memdyn.trainer import ScoreLog

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-12
METHODS = ("lira", "shokri")


class DegenerateVarianceError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class LiraConfig:
    variance_mode: str = "global"
    threshold: float = 0.0
    leave_one_out: bool = True

    def validate(self) -> None:
        if self.variance_mode not in ("global", "per-sample"):
            raise ValueError(f"unknown variance mode {self.variance_mode!r}")


def logit_scale(conf):
    """log(p / (1 - p)); inputs are assumed clamped away from 0 and 1."""
    conf = np.asarray(conf, dtype=float)
    return np.log(conf) - np.log1p(-conf)


def gaussian_llr(x, mu_in, var_in, mu_out, var_out):
    """log N(x; mu_in, var_in) - log N(x; mu_out, var_out), elementwise."""
    return (
        0.5 * (np.log(var_out) - np.log(var_in))
        - (x - mu_in) ** 2 / (2 * var_in)
        + (x - mu_out) ** 2 / (2 * var_out)
    )


def lira_score(target_phi, in_phis, out_phis, cfg: LiraConfig = LiraConfig(),
               var_in=None, var_out=None) -> float:
    """Log-likelihood ratio of one observation under in/out Gaussian fits.

    In global mode the pooled variances must be supplied by the caller; in
    per-sample mode they are the unbiased variances of ``in_phis`` and
    ``out_phis``.
    """
    in_phis = np.asarray(in_phis, dtype=float)
    out_phis = np.asarray(out_phis, dtype=float)
    if not len(in_phis) or not len(out_phis):
        raise ValueError("both reference sets must be non-empty")
    if cfg.variance_mode == "global":
        if var_in is None or var_out is None:
            raise ValueError("global variance mode needs pooled variances")
    else:
        var_in = np.var(in_phis, ddof=1) if var_in is None else var_in
        var_out = np.var(out_phis, ddof=1) if var_out is None else var_out
    if var_in < VAR_FLOOR or var_out < VAR_FLOOR:
        raise DegenerateVarianceError(
            f"variance below floor (in={var_in:.3g}, out={var_out:.3g})"
        )
    return float(gaussian_llr(target_phi, in_phis.mean(), var_in, out_phis.mean(), var_out))


def _group_stats(phi, bits):
    """Per-sample sums, counts and unbiased within-group sum of squares."""
    b = bits.astype(bool)
    n_in = b.sum(axis=0)
    n_out = len(bits) - n_in
    s_in = np.where(b, phi, 0.0).sum(axis=0)
    s_out = np.where(b, 0.0, phi).sum(axis=0)
    mu_in, mu_out = s_in / n_in, s_out / n_out
    ss_in = np.where(b, (phi - mu_in) ** 2, 0.0).sum(axis=0)
    ss_out = np.where(b, 0.0, (phi - mu_out) ** 2).sum(axis=0)
    return n_in, n_out, s_in, s_out, ss_in, ss_out


def pooled_variances(phi, bits) -> tuple[float, float]:
    """In- and out-variances pooled over every sample at one checkpoint."""
    n_in, n_out, _, _, ss_in, ss_out = _group_stats(phi, bits)
    dof_in, dof_out = (n_in - 1).sum(), (n_out - 1).sum()
    if dof_in < 1 or dof_out < 1:
        raise ValueError("global variance needs >= 2 in and >= 2 out observations")
    return float(ss_in.sum() / dof_in), float(ss_out.sum() / dof_out)


def lira_scores(phi, bits, cfg: LiraConfig = LiraConfig(), epoch=None) -> np.ndarray:
    """(N, M) log-LR of each model's observation of each sample.

    Means are refit without the target model when ``leave_one_out``;
    variances always use the full reference population.
    """
    cfg.validate()
    phi = np.asarray(phi, dtype=float)
    b = np.asarray(bits).astype(bool)
    n_in, n_out, s_in, s_out, ss_in, ss_out = _group_stats(phi, b)
    if np.any(n_in < 1) or np.any(n_out < 1):
        raise ValueError("every sample needs at least one in- and one out-model")

    if cfg.variance_mode == "global":
        var_in, var_out = pooled_variances(phi, b)
        where = f"epoch {epoch}" if epoch is not None else "pooled"
        if var_in < VAR_FLOOR or var_out < VAR_FLOOR:
            raise DegenerateVarianceError(
                f"{where}: pooled variance below floor (in={var_in:.3g}, out={var_out:.3g})"
            )
        var_in = np.full(phi.shape[1], var_in)
        var_out = np.full(phi.shape[1], var_out)
    else:
        if np.any(n_in < 2) or np.any(n_out < 2):
            raise ValueError("per-sample variance needs >= 2 in and >= 2 out models")
        var_in, var_out = ss_in / (n_in - 1), ss_out / (n_out - 1)
        bad = np.flatnonzero((var_in < VAR_FLOOR) | (var_out < VAR_FLOOR))
        if len(bad):
            raise DegenerateVarianceError(
                f"epoch {epoch}: variance below floor for sample index {int(bad[0])}"
                f" ({len(bad)} samples affected)"
            )

    if cfg.leave_one_out:
        mu_in = np.where(b, (s_in - phi) / np.maximum(n_in - 1, 1), s_in / n_in)
        mu_out = np.where(b, s_out / n_out, (s_out - phi) / np.maximum(n_out - 1, 1))
    else:
        mu_in = np.broadcast_to(s_in / n_in, phi.shape)
        mu_out = np.broadcast_to(s_out / n_out, phi.shape)
    return gaussian_llr(phi, mu_in, var_in, mu_out, var_out)


def rates_from_decisions(decisions, bits) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (fpr, tpr) from (N, M) binary decisions and membership."""
    d = np.asarray(decisions).astype(bool)
    b = np.asarray(bits).astype(bool)
    n_in = b.sum(axis=0)
    n_out = len(b) - n_in
    tpr = (d & b).sum(axis=0) / n_in
    fpr = (d & ~b).sum(axis=0) / n_out
    return fpr, tpr


# Shokri et al. shadow-classifier attack ------------------------------------


@dataclasses.dataclass(frozen=True)
class ShokriAttackModel:
    """weights[c] = (bias, w_1..w_C) of the logistic classifier for class c."""

    weights: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def member_probability(self, posteriors, labels) -> np.ndarray:
        feats = sorted_features(posteriors)
        w = self.weights[np.asarray(labels, dtype=int)]
        z = w[:, 0] + np.einsum("ij,ij->i", feats, w[:, 1:])
        return _sigmoid(z)

    def decide(self, posteriors, labels) -> np.ndarray:
        return (self.member_probability(posteriors, labels) > 0.5).astype(np.uint8)


def sorted_features(posteriors) -> np.ndarray:
    return -np.sort(-np.asarray(posteriors, dtype=float), axis=-1)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def fit_logistic(X, y, l2: float = 1e-4, tol: float = 1e-6, max_iter: int = 500):
    """Newton-IRLS logistic regression with intercept and light ridge.

    Returns (bias, weights...) as one vector.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.hstack([np.ones((len(X), 1)), X])
    reg = np.full(A.shape[1], l2 * len(X))
    reg[0] = 0.0
    w = np.zeros(A.shape[1])
    for _ in range(max_iter):
        p = _sigmoid(A @ w)
        grad = A.T @ (p - y) + reg * w
        H = (A * (p * (1 - p))[:, None]).T @ A + np.diag(reg) + 1e-10 * np.eye(len(w))
        step = np.linalg.solve(H, grad)
        w -= step
        if np.max(np.abs(step)) < tol:
            break
    return w


def shokri_train(posteriors, labels, membership, n_classes: int) -> ShokriAttackModel:
    """One logistic member/non-member classifier per class label."""
    feats = sorted_features(posteriors)
    labels = np.asarray(labels, dtype=int)
    membership = np.asarray(membership, dtype=int)
    W = np.zeros((n_classes, n_classes + 1))
    for c in range(n_classes):
        sel = labels == c
        if not np.any(sel):
            continue
        m = membership[sel]
        if m.min() == m.max():
            raise ValueError(f"class {c}: attack training data has a single label")
        W[c] = fit_logistic(feats[sel], m)
    return ShokriAttackModel(W)


def shokri_decisions(posteriors, labels, bits) -> np.ndarray:
    """(N, M) decisions; model i is attacked by classifiers trained on the rest.

    ``posteriors`` is (N, M, C) for one checkpoint.
    """
    N, M, C = posteriors.shape
    bits = np.asarray(bits)
    out = np.zeros((N, M), dtype=np.uint8)
    others = np.arange(N)
    for i in range(N):
        rest = others[others != i]
        attack = shokri_train(
            posteriors[rest].reshape(-1, C),
            np.tile(labels, len(rest)),
            bits[rest].reshape(-1),
            C,
        )
        out[i] = attack.decide(posteriors[i], labels)
    return out


# Population-level estimation -----------------------------------------------


@dataclasses.dataclass
class VulnerabilityField:
    """(M, T) fpr/tpr tables for every sample at every checkpoint."""

    epochs: np.ndarray
    sample_ids: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    @property
    def advantage(self) -> np.ndarray:
        return self.tpr - self.fpr

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    def trajectories(self) -> list[Trajectory]:
        return [
            Trajectory.from_arrays(int(s), self.epochs, self.fpr[j], self.tpr[j])
            for j, s in enumerate(self.sample_ids)
        ]

    def states_at(self, t: int) -> list[VulnerabilityState]:
        return [VulnerabilityState(float(f), float(p))
                for f, p in zip(self.fpr[:, t], self.tpr[:, t])]

    def records(self):
        """(epoch, sample, fpr, tpr, adv) in (epoch, sample) order."""
        for t, epoch in enumerate(self.epochs):
            for j, s in enumerate(self.sample_ids):
                f, p = float(self.fpr[j, t]), float(self.tpr[j, t])
                yield int(epoch), int(s), f, p, p - f


def epoch_decisions(log: ScoreLog, t: int, method: str = "lira",
                    cfg: LiraConfig = LiraConfig(), labels=None) -> np.ndarray:
    if method == "lira":
        phi = logit_scale(log.conf[t])
        return (lira_scores(phi, log.member, cfg, epoch=int(log.epochs[t]))
                > cfg.threshold).astype(np.uint8)
    if method == "shokri":
        if log.posteriors is None or labels is None:
            raise ValueError("the Shokri attack needs full posteriors and labels")
        return shokri_decisions(log.posteriors[t], labels, log.member)
    raise ValueError(f"unknown attack method {method!r}")


def vulnerability_field(log: ScoreLog, cfg: LiraConfig = LiraConfig(),
                        method: str = "lira", labels=None) -> VulnerabilityField:
    T, N, M = log.shape
    fpr = np.empty((M, T))
    tpr = np.empty((M, T))
    for t in range(T):
        d = epoch_decisions(log, t, method, cfg, labels)
        fpr[:, t], tpr[:, t] = rates_from_decisions(d, log.member)
    return VulnerabilityField(np.asarray(log.epochs), np.asarray(log.sample_ids), fpr, tpr)


def estimate_state(sample: int, epoch: int, log: ScoreLog,
                   cfg: LiraConfig = LiraConfig(), method: str = "lira",
                   labels=None) -> VulnerabilityState:
    """(FPR, TPR) of one sample at one recorded epoch."""
    t = int(np.flatnonzero(log.epochs == epoch)[0])
    j = int(np.flatnonzero(log.sample_ids == sample)[0])
    d = epoch_decisions(log, t, method, cfg, labels)
    fpr, tpr = rates_from_decisions(d[:, j : j + 1], log.member[:, j : j + 1])
    return VulnerabilityState(float(fpr[0]), float(tpr[0]))
