"""Dense float64 matrix kernels, each with a matching analytic backward pass.

All kernels operate on 2-D row-major float64 arrays and are pure functions.
Backward passes are vector-Jacobian products (VJPs): given the upstream
gradient of a scalar loss w.r.t. the kernel output, they return the gradient
w.r.t. the kernel input.  `central_diff_gradient` is the independent oracle
used to validate every VJP.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import DegenerateInputError, DimensionError, OracleError

LAYER_NORM_EPS = 1e-5

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def as_matrix(x, name: str = "input") -> np.ndarray:
    """Promote to a finite float64 2-D array, raising on NaN/Inf."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DegenerateInputError(f"{name} contains non-finite entries")
    return m


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting each row's maximum."""
    m = as_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_vjp(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """VJP of softmax_rows given its output `y`."""
    inner = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - inner)


def layer_norm_rows(m, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalize each row to zero mean and (near-)unit variance; no affine."""
    m = as_matrix(m)
    if m.shape[1] < 2:
        raise DimensionError("layer_norm_rows requires at least 2 columns")
    mu = m.mean(axis=1, keepdims=True)
    var = ((m - mu) ** 2).mean(axis=1, keepdims=True)
    return (m - mu) / np.sqrt(var + eps)


def layer_norm_rows_vjp(x: np.ndarray, dy: np.ndarray,
                        eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """VJP of layer_norm_rows given its input `x`."""
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    sigma = np.sqrt(var + eps)
    y = (x - mu) / sigma
    # dx_j = (dy_j - mean(dy) - y_j * mean(dy * y)) / sigma, per row
    mean_dy = dy.mean(axis=1, keepdims=True)
    mean_dyy = (dy * y).mean(axis=1, keepdims=True)
    return (dy - mean_dy - y * mean_dyy) / sigma


def sigmoid(m) -> np.ndarray:
    """Elementwise logistic function, computed without overflow."""
    m = as_matrix(m)
    out = np.empty_like(m)
    pos = m >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-m[pos]))
    e = np.exp(m[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_vjp(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


def gelu(m) -> np.ndarray:
    """GELU with the tanh approximation: x * 0.5 * (1 + tanh(c*(x + a*x^3)))."""
    m = as_matrix(m)
    inner = _GELU_C * (m + _GELU_A * m ** 3)
    return 0.5 * m * (1.0 + np.tanh(inner))


def gelu_vjp(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
    grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
    return dy * grad


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shapes incompatible: {a.shape} x {b.shape}")
    return a @ b


def matmul_vjp(a: np.ndarray, b: np.ndarray,
               dc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of c = a @ b w.r.t. both operands."""
    return dc @ b.T, a.T @ dc


def l2_normalize_rows(m) -> np.ndarray:
    """Scale every row to unit L2 norm."""
    m = as_matrix(m)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero row")
    return m / norms


def l2_normalize_rows_vjp(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    y = x / norms
    inner = (dy * y).sum(axis=1, keepdims=True)
    return (dy - y * inner) / norms


def l2_normalize_vec(v: np.ndarray) -> np.ndarray:
    """Vector form of l2_normalize_rows."""
    return l2_normalize_rows(v.reshape(1, -1))[0]


def l2_normalize_vec_vjp(v: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return l2_normalize_rows_vjp(v.reshape(1, -1), dy.reshape(1, -1))[0]


def central_diff_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                          h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function, coordinate-wise.

    Returns (f(x + h*e) - f(x - h*e)) / (2h) for every coordinate.  This is
    the independent oracle against which all analytic backward passes are
    checked; it must never share code with the paths it validates.
    """
    if h <= 0:
        raise OracleError("step size h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(x))
        flat[i] = orig - h
        f_minus = float(f(x))
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise OracleError(
                f"non-finite function value at coordinate {i}")
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max |analytic - numeric| normalized by the larger gradient magnitude.

    Zero when both gradients vanish, so parameters that do not participate
    in a given computation compare cleanly.
    """
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return diff / max(scale, 1e-12)
