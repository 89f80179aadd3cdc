"""Per-sample learning difficulty and its correlation with vulnerability.

Hardness metrics: mean gradient norm, the checkpoint from which a sample
stays learned, self-influence, and the aleatoric / epistemic split of
ensemble predictive entropy. Each is correlated with final advantage and
with the advantage-change rate, over all samples and within the
vulnerable / non-vulnerable subsets.
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Sequence

import numpy as np

from memdyn import nn
from memdyn.plane import Trajectory, path_length, path_lengths

NEVER = -1

METRICS = ("grad_norm", "iteration_learned", "influence", "aleatoric", "epistemic")
TARGETS = ("alpha", "v_alpha")
SUBSETS = ("all", "vulnerable", "non_vulnerable")


class InfluenceError(RuntimeError):
    pass


def encoding_rate_v_alpha(traj: Trajectory) -> float:
    """Mean absolute advantage change per checkpoint interval."""
    if len(traj) < 2:
        raise ValueError("v_alpha needs at least 2 checkpoints")
    return path_length(traj) / (len(traj) - 1)


def v_alpha_table(alpha: np.ndarray) -> np.ndarray:
    """v_alpha for every row of an (M, T) advantage table."""
    T = alpha.shape[1]
    if T < 2:
        raise ValueError("v_alpha needs at least 2 checkpoints")
    return path_lengths(alpha)[:, -1] / (T - 1)


def iteration_learned(history) -> int:
    """First index from which every entry of the 0/1 history is 1, else NEVER."""
    h = np.asarray(history).astype(bool)
    if not len(h):
        raise ValueError("empty history")
    if not h[-1]:
        return NEVER
    misses = np.flatnonzero(~h)
    return int(misses[-1] + 1) if len(misses) else 0


def learned_histories(correct: np.ndarray, member: np.ndarray) -> np.ndarray:
    """(M, T) majority vote of each sample's in-models being correct.

    ``correct`` is (T, N, M); ``member`` is (N, M).
    """
    b = member.astype(bool)
    hits = (correct.astype(bool) & b[None]).sum(axis=1)
    return (hits / b.sum(axis=0) > 0.5).T


# Gradient norms -------------------------------------------------------------


def mean_grad_norms(checkpoints_by_model: Sequence[Sequence[nn.ModelParams]],
                    X, y, member: np.ndarray) -> np.ndarray:
    """Per-sample gradient norm averaged over in-models and their checkpoints."""
    member = member.astype(bool)
    total = np.zeros(member.shape[1])
    count = np.zeros(member.shape[1])
    for i, ckpts in enumerate(checkpoints_by_model):
        idx = np.flatnonzero(member[i])
        for params in ckpts:
            total[idx] += nn.per_sample_grad_norms(params, X[idx], y[idx])
            count[idx] += 1
    if np.any(count == 0):
        raise ValueError("some samples have no in-model")
    return total / count


# Influence ------------------------------------------------------------------


def conjugate_gradient(matvec, b, tol: float = 1e-6, max_iter: int = 100):
    """Solve A x = b for symmetric positive-definite A given only A @ v.

    Stops when the residual norm falls below ``tol * |b|``; raises
    InfluenceError with the final residual otherwise.
    """
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = r @ r
    target = tol * math.sqrt(rs)
    if math.sqrt(rs) <= target or rs == 0:
        return x
    for _ in range(max_iter):
        Ap = matvec(p)
        curv = p @ Ap
        if curv <= 0:
            raise InfluenceError(f"matrix not positive definite (p'Ap={curv:.3g})")
        step = rs / curv
        x += step * p
        r -= step * Ap
        rs_new = r @ r
        if math.sqrt(rs_new) <= target:
            return x
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise InfluenceError(
        f"CG did not converge in {max_iter} iterations (residual {math.sqrt(rs):.3g})"
    )


DENSE_LIMIT = 2000


def influence(params: nn.ModelParams, X_train, y_train, x, y, damping: float = 0.01,
              l2: float = 0.0, subset: str = "all", method: str = "auto") -> float:
    """Self-influence g' (H + damping I)^-1 g of one sample.

    g is the sample's loss gradient and H the Hessian of the mean training
    loss (plus ``l2 / 2 * |w|^2`` when the training objective carried it),
    both at ``params``. ``subset="last"`` restricts both to the output
    layer. Below DENSE_LIMIT parameters the system is solved densely unless
    ``method="cg"``.
    """
    if damping <= 0:
        raise ValueError("damping must be positive")
    sl = nn.last_layer_slice(params.widths) if subset == "last" else slice(None)
    g = nn.per_sample_gradient(params, x, y)[sl]
    if not np.any(g):
        return 0.0
    n = len(g)

    def matvec(v):
        full = np.zeros_like(params.flat)
        full[sl] = v
        return nn.hvp(params, X_train, y_train, full)[sl] + (l2 + damping) * v

    if method == "dense" or (method == "auto" and n < DENSE_LIMIT):
        A = np.column_stack([matvec(e) for e in np.eye(n)])
        A = (A + A.T) / 2
        return float(g @ np.linalg.solve(A, g))
    return float(g @ conjugate_gradient(matvec, g))


def _augmented_features(params: nn.ModelParams, X):
    """Inputs to the output layer with a constant 1 appended, and softmax outputs."""
    acts, _ = nn._forward(params, np.asarray(X, dtype=float))
    a = np.hstack([acts[-2], np.ones((len(X), 1))])
    return a, nn.softmax(acts[-1])


def last_layer_self_influence(params: nn.ModelParams, X_train, y_train, X_eval, y_eval,
                              damping: float = 0.01) -> np.ndarray:
    """Output-layer self-influence for many samples with one factorisation.

    With the bias folded in as an extra input, the output-layer Hessian of
    cross-entropy is mean_n kron(a a', diag(p) - p p') and a sample's
    gradient is kron(a, p - onehot(y)), matching the flat parameter layout.
    """
    a, p = _augmented_features(params, X_train)
    C = p.shape[1]
    S = np.einsum("nc,cd->ncd", p, np.eye(C)) - np.einsum("nc,nd->ncd", p, p)
    H = np.einsum("nk,nl,ncd->kcld", a, a, S).reshape(a.shape[1] * C, -1) / len(a)
    H += damping * np.eye(len(H))
    ae, pe = _augmented_features(params, X_eval)
    r = pe.copy()
    r[np.arange(len(r)), np.asarray(y_eval, dtype=int)] -= 1.0
    G = np.einsum("nk,nc->nkc", ae, r).reshape(len(ae), -1)
    L = np.linalg.cholesky((H + H.T) / 2)
    Z = np.linalg.solve(L, G.T)
    return np.einsum("ij,ij->j", Z, Z)


def mean_self_influence(final_params: Sequence[nn.ModelParams], X, y, member,
                        damping: float = 0.01) -> np.ndarray:
    """Output-layer self-influence averaged over each sample's in-models."""
    member = member.astype(bool)
    total = np.zeros(member.shape[1])
    for i, params in enumerate(final_params):
        idx = np.flatnonzero(member[i])
        total[idx] += last_layer_self_influence(params, X[idx], y[idx], X[idx], y[idx], damping)
    return total / member.sum(axis=0)


# Uncertainty ----------------------------------------------------------------


def entropy(p, axis=-1):
    p = np.asarray(p, dtype=float)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=axis)


def uncertainty_decomposition(probs) -> tuple[float, float]:
    """(aleatoric, epistemic) from a (members, classes) array of predictions.

    Total entropy of the mean prediction splits into the mean per-member
    entropy (aleatoric) and the remainder, the mutual information
    (epistemic), floored at zero.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or len(probs) < 2:
        raise ValueError("need at least 2 ensemble members")
    total = float(entropy(probs.mean(axis=0)))
    aleatoric = float(entropy(probs).mean())
    return aleatoric, max(total - aleatoric, 0.0)


ENSEMBLES = ("out", "in", "all")


def ensemble_uncertainty(posteriors: np.ndarray, member: np.ndarray, ensemble: str = "out"):
    """Aleatoric and epistemic per sample over an ensemble of shadow models.

    ``posteriors`` is (N, M, C) at one checkpoint. ``ensemble`` picks each
    sample's out-models (default), its in-models, or every model.
    """
    b = member.astype(bool)
    if ensemble == "out":
        sel = ~b
    elif ensemble == "in":
        sel = b
    elif ensemble == "all":
        sel = np.ones_like(b)
    else:
        raise ValueError(f"unknown ensemble {ensemble!r}")
    if np.any(sel.sum(axis=0) < 2):
        raise ValueError("every sample needs at least 2 ensemble members")
    w = sel / sel.sum(axis=0)
    mean = np.einsum("nm,nmc->mc", w, posteriors)
    total = entropy(mean)
    aleatoric = (w * entropy(posteriors)).sum(axis=0)
    return aleatoric, np.maximum(total - aleatoric, 0.0)


# Correlation ----------------------------------------------------------------


def pearson(x, y) -> float | None:
    """Product-moment correlation; None when undefined (n < 3 or constant input)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("inputs differ in length")
    if len(x) < 3:
        return None
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0 or syy == 0:
        return None
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


@dataclasses.dataclass
class HardnessProfile:
    sample_ids: np.ndarray
    grad_norm: np.ndarray
    iteration_learned: np.ndarray
    influence: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    n_checkpoints: int

    def metric(self, name: str) -> np.ndarray:
        """Metric values ready for correlation; NEVER maps past the last checkpoint."""
        v = getattr(self, name).astype(float)
        if name == "iteration_learned":
            v = np.where(v == NEVER, self.n_checkpoints, v)
        return v


@dataclasses.dataclass
class CorrelationTable:
    """cells[(metric, target, subset)] = (r, n); r is None when undefined."""

    cells: dict
    threshold: float

    def r(self, metric: str, target: str, subset: str = "all") -> float | None:
        return self.cells[(metric, target, subset)][0]

    def rows(self):
        for (metric, target, subset), (r, n) in self.cells.items():
            yield metric, target, subset, r, n


def correlation_table(profile: HardnessProfile, alpha: np.ndarray,
                      threshold: float = 0.0) -> CorrelationTable:
    """Correlate each hardness metric with final advantage and v_alpha.

    ``alpha`` is the (M, T) advantage table aligned with the profile.
    """
    final = alpha[:, -1]
    targets = {"alpha": final, "v_alpha": v_alpha_table(alpha)}
    masks = {
        "all": np.ones(len(final), dtype=bool),
        "vulnerable": final > threshold,
        "non_vulnerable": final <= threshold,
    }
    cells = {}
    for metric in METRICS:
        values = profile.metric(metric)
        for target in TARGETS:
            for subset in SUBSETS:
                m = masks[subset]
                cells[(metric, target, subset)] = (
                    pearson(values[m], targets[target][m]), int(m.sum())
                )
    return CorrelationTable(cells, threshold)


def build_profile(checkpoints_by_model: Sequence[Sequence[nn.ModelParams]], X, y,
                  member: np.ndarray, correct: np.ndarray, posteriors: np.ndarray,
                  sample_ids, damping: float = 0.01, ensemble: str = "out",
                  checkpoint: int = -1) -> HardnessProfile:
    """All hardness metrics for every sample of a trained population.

    ``correct`` is (T, N, M) and ``posteriors`` (T, N, M, C) from the score
    log. Influence is measured at each in-model's final checkpoint and
    uncertainty at checkpoint index ``checkpoint``.
    """
    learned = learned_histories(correct, member)
    aleatoric, epistemic = ensemble_uncertainty(posteriors[checkpoint], member, ensemble)
    return HardnessProfile(
        sample_ids=np.asarray(sample_ids),
        grad_norm=mean_grad_norms(checkpoints_by_model, X, y, member),
        iteration_learned=np.array([iteration_learned(h) for h in learned]),
        influence=mean_self_influence([c[-1] for c in checkpoints_by_model], X, y,
                                      member, damping),
        aleatoric=aleatoric,
        epistemic=epistemic,
        n_checkpoints=correct.shape[0],
    )
