"""Float64 numeric primitives shared by the toy model, the intervention engine and the probes.

Everything here is a pure function over 1-D (or 2-D, for ``matvec``) numpy arrays.
Shapes are checked explicitly; nothing relies on numpy broadcasting.
"""

from __future__ import annotations

import numpy as np

KL_EPS = 1e-12
LN_EPS = 1e-5


class NumericError(ValueError):
    """Raised on shape mismatches or non-finite inputs."""


def as_vector(v, name: str = "v") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise NumericError(f"{name}: expected a vector, got shape {arr.shape}")
    return arr


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise NumericError(f"{name}: non-finite entry at flat index {bad}")


def _check_same_length(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise NumericError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def softmax(v) -> np.ndarray:
    """Max-subtracted softmax of a finite, nonempty vector."""
    x = as_vector(v)
    if x.size == 0:
        raise NumericError("softmax: empty input")
    _check_finite(x, "softmax")
    z = np.exp(x - x.max())
    return z / z.sum()


def kl_divergence(p, q, eps: float = KL_EPS) -> float:
    """KL(p || q) in nats.

    Zero entries of ``q`` are replaced by ``eps`` (``p`` is left alone), so the
    result stays finite where ``q`` has no support and is exact everywhere
    else. Terms with ``p_i == 0`` contribute nothing.
    """
    p = as_vector(p, "p")
    q = as_vector(q, "q")
    _check_same_length(p, q, "kl_divergence")
    support = p > 0
    ps = p[support]
    return float(np.sum(ps * np.log(ps / np.where(q[support] > 0, q[support], eps))))


def cosine_similarity(u, v) -> float:
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    _check_same_length(u, v, "cosine_similarity")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise NumericError("cosine_similarity: zero-norm input")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    """x * sigmoid(x), elementwise. Scalars in, scalars out."""
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr, "silu")
    out = arr * sigmoid(arr)
    return float(out) if out.ndim == 0 else out


def layer_norm(v, gain, bias, eps: float = LN_EPS) -> np.ndarray:
    x = as_vector(v)
    gain = as_vector(gain, "gain")
    bias = as_vector(bias, "bias")
    _check_same_length(x, gain, "layer_norm")
    _check_same_length(x, bias, "layer_norm")
    mean = x.mean()
    centered = x - mean
    var = np.mean(centered * centered)
    return centered / np.sqrt(var + eps) * gain + bias


def matvec(m: np.ndarray, v: np.ndarray, name: str = "matvec") -> np.ndarray:
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise NumericError(f"{name}: cannot apply {m.shape} to {v.shape}")
    return m @ v


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)
