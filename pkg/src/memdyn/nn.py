"""A small ReLU multilayer perceptron in plain numpy.

Parameters live in one flat float64 vector so that optimizers, checkpoints
and Hessian solves all work on the same layout: for each layer the weight
matrix (fan_in x fan_out, row-major) followed by its bias.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np


@dataclasses.dataclass
class ModelParams:
    widths: tuple[int, ...]
    flat: np.ndarray

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"invalid layer widths {self.widths}")
        if self.flat.shape != (n_params(self.widths),):
            raise ValueError(
                f"flat vector has {self.flat.size} entries, widths need {n_params(self.widths)}"
            )

    def layers(self, flat: np.ndarray | None = None):
        """(W, b) views into ``flat`` (defaults to this model's parameters)."""
        return _split(self.widths, self.flat if flat is None else flat)

    def copy(self) -> "ModelParams":
        return ModelParams(self.widths, self.flat.copy())

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        return ModelParams(self.widths, flat)

    @property
    def n_classes(self) -> int:
        return self.widths[-1]


def n_params(widths) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def last_layer_slice(widths) -> slice:
    total = n_params(widths)
    return slice(total - (widths[-2] * widths[-1] + widths[-1]), total)


def _split(widths, flat):
    out, pos = [], 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        W = flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = flat[pos : pos + fan_out]
        pos += fan_out
        out.append((W, b))
    return out


def init_params(widths, rng: np.random.Generator) -> ModelParams:
    """He-uniform weights, zero biases."""
    flat = np.zeros(n_params(widths))
    params = ModelParams(tuple(widths), flat)
    for W, _ in params.layers():
        limit = np.sqrt(6.0 / W.shape[0])
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return params


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(params: ModelParams, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != params.widths[0]:
        raise ValueError(f"feature dim {X.shape[1]} != input width {params.widths[0]}")
    return X


def _forward(params: ModelParams, X: np.ndarray, flat=None):
    acts, pre = [X], []
    layers = params.layers(flat)
    a = X
    for k, (W, b) in enumerate(layers):
        z = a @ W + b
        pre.append(z)
        a = np.maximum(z, 0.0) if k < len(layers) - 1 else z
        acts.append(a)
    return acts, pre


def logits(params: ModelParams, X) -> np.ndarray:
    X = _check_input(params, X)
    return _forward(params, X)[0][-1]


def forward(params: ModelParams, X) -> np.ndarray:
    """Class probabilities, one row per input row."""
    return softmax(logits(params, X))


def _backward(params, acts, pre, delta, flat=None):
    """Parameter gradient given d(loss)/d(logits) for the whole batch."""
    layers = params.layers(flat)
    grad = np.empty(n_params(params.widths))
    gl = _split(params.widths, grad)
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        gl[k][0][...] = acts[k].T @ delta
        gl[k][1][...] = delta.sum(axis=0)
        if k:
            delta = (delta @ W.T) * (pre[k - 1] > 0)
    return grad


def _targets(y, C, n):
    Y = np.zeros((n, C))
    Y[np.arange(n), np.asarray(y, dtype=int)] = 1.0
    return Y


def loss_and_grad(params: ModelParams, X, y, flat=None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient."""
    X = _check_input(params, X)
    n = len(X)
    y = np.asarray(y, dtype=int)
    with np.errstate(all="ignore"):  # non-finite results are raised below
        acts, pre = _forward(params, X, flat)
        z = acts[-1]
        zmax = z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
        loss = float(np.mean(logsum - z[np.arange(n), y]))
        p = np.exp(z - logsum[:, None])
        delta = (p - _targets(y, params.n_classes, n)) / n
        grad = _backward(params, acts, pre, delta, flat)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise FloatingPointError(f"non-finite loss or gradient (loss={loss})")
    return loss, grad


def per_sample_gradient(params: ModelParams, x, y) -> np.ndarray:
    """Gradient of -log p_y for one sample, as a flat vector."""
    return loss_and_grad(params, np.atleast_2d(x), [int(y)])[1]


def per_sample_grad_norms(params: ModelParams, X, y) -> np.ndarray:
    """L2 norm of each sample's loss gradient, without materialising them.

    A dense layer's per-sample weight gradient is the outer product of its
    input and output deltas, so its squared norm factorises.
    """
    X = _check_input(params, X)
    n = len(X)
    acts, pre = _forward(params, X)
    p = softmax(acts[-1])
    delta = p - _targets(y, params.n_classes, n)
    sq = np.zeros(n)
    layers = params.layers()
    for k in range(len(layers) - 1, -1, -1):
        d2 = np.einsum("ij,ij->i", delta, delta)
        a2 = np.einsum("ij,ij->i", acts[k], acts[k])
        sq += d2 * (a2 + 1.0)
        if k:
            delta = (delta @ layers[k][0].T) * (pre[k - 1] > 0)
    return np.sqrt(sq)


def hvp(params: ModelParams, X, y, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product of the mean cross-entropy.

    Forward and backward passes are differentiated along ``v``
    (Pearlmutter's R-operator). ReLU has zero curvature almost everywhere,
    so only its gating mask enters.
    """
    X = _check_input(params, X)
    n = len(X)
    C = params.n_classes
    layers = params.layers()
    vlayers = params.layers(v)
    acts, pre = _forward(params, X)

    r_acts = [np.zeros_like(X)]
    r_a = r_acts[0]
    for k, ((W, _), (VW, Vb)) in enumerate(zip(layers, vlayers)):
        r_z = r_a @ W + acts[k] @ VW + Vb
        r_a = r_z * (pre[k] > 0) if k < len(layers) - 1 else r_z
        r_acts.append(r_a)

    p = softmax(acts[-1])
    r_zL = r_acts[-1]
    r_p = p * (r_zL - np.sum(p * r_zL, axis=1, keepdims=True))
    delta = (p - _targets(y, C, n)) / n
    r_delta = r_p / n

    out = np.empty(n_params(params.widths))
    ol = _split(params.widths, out)
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        VW, _ = vlayers[k]
        ol[k][0][...] = r_acts[k].T @ delta + acts[k].T @ r_delta
        ol[k][1][...] = r_delta.sum(axis=0)
        if k:
            mask = pre[k - 1] > 0
            r_delta = (r_delta @ W.T + delta @ VW.T) * mask
            delta = (delta @ W.T) * mask
    return out


_PARAMS_MAGIC = b"MDPR"


def save_params(params: ModelParams, path) -> None:
    """Shape header then the flat parameter vector as little-endian f32."""
    w = params.widths
    header = _PARAMS_MAGIC + struct.pack(f"<I{len(w)}I", len(w), *w)
    Path(path).write_bytes(header + params.flat.astype("<f4").tobytes())


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != _PARAMS_MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    (k,) = struct.unpack("<I", raw[4:8])
    widths = struct.unpack(f"<{k}I", raw[8 : 8 + 4 * k])
    flat = np.frombuffer(raw, dtype="<f4", offset=8 + 4 * k).astype(float)
    return ModelParams(widths, flat)
