"""SGD with momentum, AdamW and SAM over flat parameter vectors."""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

OPTIMIZERS = ("sgd-momentum", "adamw", "sam-over-sgd")

GradFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rho: float = 0.05

    def validate(self) -> None:
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.kind == "sam-over-sgd" and self.rho <= 0:
            raise ValueError("SAM requires rho > 0")


@dataclasses.dataclass
class OptimizerState:
    step: int = 0
    velocity: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def _finite(params: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(params)):
        raise FloatingPointError(f"non-finite parameters after {what} step")
    return params


def sgd_momentum_step(state: OptimizerState, params, grad, cfg: OptimizerConfig):
    if state.velocity is None:
        state.velocity = np.zeros_like(params)
    state.velocity = cfg.momentum * state.velocity + grad
    state.step += 1
    new = params - cfg.lr * state.velocity - cfg.lr * cfg.weight_decay * params
    return _finite(new, "sgd"), state


def adamw_step(state: OptimizerState, params, grad, cfg: OptimizerConfig):
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.step += 1
    t = state.step
    state.m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad * grad
    m_hat = state.m / (1 - cfg.beta1**t)
    v_hat = state.v / (1 - cfg.beta2**t)
    new = params * (1 - cfg.lr * cfg.weight_decay) - cfg.lr * m_hat / (
        np.sqrt(v_hat) + cfg.eps
    )
    return _finite(new, "adamw"), state


def sam_perturbation(grad: np.ndarray, rho: float) -> np.ndarray:
    norm = np.linalg.norm(grad)
    if norm == 0:
        return np.zeros_like(grad)
    return rho * grad / norm


def sam_step(state: OptimizerState, params, grad_fn: GradFn, cfg: OptimizerConfig):
    """Ascend to params + rho * g / |g|, then take the SGD step with the gradient there."""
    loss, grad = grad_fn(params)
    eps = sam_perturbation(grad, cfg.rho)
    if np.any(eps):
        _, grad = grad_fn(params + eps)
    new, state = sgd_momentum_step(state, params, grad, cfg)
    return new, state, loss


def step(state: OptimizerState, params, grad_fn: GradFn, cfg: OptimizerConfig):
    """One update of any configured optimizer; returns (params, state, loss)."""
    if cfg.kind == "sam-over-sgd":
        return sam_step(state, params, grad_fn, cfg)
    loss, grad = grad_fn(params)
    if cfg.kind == "adamw":
        new, state = adamw_step(state, params, grad, cfg)
    else:
        new, state = sgd_momentum_step(state, params, grad, cfg)
    return new, state, loss
