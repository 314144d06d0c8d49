"""Dense kernels with hand-written backward passes.

All functions take and return numpy arrays in row-major layout and keep the
dtype of their inputs, so the same code runs in float32 (default) and float64
(verification) mode.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from chunktrain.errors import ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}


def dtype_for(precision: str) -> type:
    try:
        return DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}, expected one of {sorted(DTYPES)}") from None


# -- linear -----------------------------------------------------------------


def linear(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {W.shape}")
    return x @ W


def linear_backward(x: np.ndarray, W: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (dx, dW) for y = x @ W."""
    if dy.shape != (x.shape[0], W.shape[1]):
        raise ShapeError(f"linear_backward: dy {dy.shape} does not match {(x.shape[0], W.shape[1])}")
    return dy @ W.T, x.T @ dy


# -- softmax ----------------------------------------------------------------


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backward given the softmax output y."""
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


# -- rmsnorm ----------------------------------------------------------------


def rmsnorm(x: np.ndarray, g: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    if x.shape[-1] != g.shape[-1]:
        raise ShapeError(f"rmsnorm: feature dim {x.shape[-1]} != gain dim {g.shape[-1]}")
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * r * g


def rmsnorm_backward(
    x: np.ndarray, g: np.ndarray, dy: np.ndarray, eps: float = 1e-6
) -> tuple[np.ndarray, np.ndarray]:
    """Return (dx, dg)."""
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    dg = (dy * x * r).reshape(-1, x.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = r * (dxhat - x * (r * r) * (dxhat * x).mean(axis=-1, keepdims=True))
    return dx, dg


# -- rotary embedding -------------------------------------------------------


def rope(x: np.ndarray, positions: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """Rotate consecutive feature pairs (2i, 2i+1) of x[t, h, d] by position * base^(-2i/d).

    Positions are absolute token indices. Rotating by ``-positions`` inverts the
    map, which is also its backward pass since the rotation is orthogonal.
    """
    if x.ndim != 3:
        raise ShapeError(f"rope expects [t, h, d], got {x.shape}")
    t, _, d = x.shape
    if d % 2:
        raise ShapeError(f"rope needs an even head dim, got {d}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (t,):
        raise ShapeError(f"rope: {positions.shape[0] if positions.ndim else 0} positions for {t} rows")
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = positions[:, None] * inv_freq[None, :]
    cos = np.cos(ang).astype(x.dtype)[:, None, :]
    sin = np.sin(ang).astype(x.dtype)[:, None, :]
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope_backward(dy: np.ndarray, positions: np.ndarray, base: float = 10000.0) -> np.ndarray:
    return rope(dy, -np.asarray(positions, dtype=np.float64), base)


# -- activations ------------------------------------------------------------


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return dy * s * (1.0 + x * (1.0 - s))


# -- loss -------------------------------------------------------------------


def cross_entropy(
    logits: np.ndarray,
    targets: np.ndarray,
    ignore_index: int = -1,
    denom: float | None = None,
) -> tuple[float, np.ndarray]:
    """Summed next-token loss divided by ``denom`` (default: number of scored rows).

    Rows whose target equals ``ignore_index`` contribute neither loss nor gradient.
    Returns (loss, dlogits).
    """
    t, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (t,):
        raise ShapeError(f"cross_entropy: {targets.shape} targets for {t} rows")
    valid = targets != ignore_index
    bad = valid & ((targets < 0) | (targets >= V))
    if bad.any():
        raise ValueError(f"target out of range [0, {V}): {targets[bad][:4].tolist()}")
    if denom is None:
        denom = max(int(valid.sum()), 1)
    safe = np.where(valid, targets, 0)
    lse = logsumexp_rows(logits)
    picked = logits[np.arange(t), safe]
    loss = float(np.where(valid, lse - picked, 0.0).sum() / denom)
    p = softmax_rows(logits)
    p[np.arange(t), safe] -= 1.0
    dlogits = (p * valid[:, None] / denom).astype(logits.dtype)
    return loss, dlogits


# -- finite differences -----------------------------------------------------


def fd_grad(f: Callable[[np.ndarray], float], theta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    theta = np.array(theta, dtype=np.float64, copy=True)
    flat = theta.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(theta)
        flat[i] = old - eps
        fm = f(theta)
        flat[i] = old
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(theta.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float | None = None) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    The floor defaults to 1e-3 of the largest numeric magnitude so coordinates
    whose true gradient is ~0 are judged on an absolute scale.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"rel_error: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    if floor is None:
        floor = max(1e-3 * float(np.abs(n).max()), 1e-12)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / den).max())


def fd_gradcheck(
    f: Callable[[np.ndarray], float],
    theta: np.ndarray,
    analytic: np.ndarray,
    eps: float = 1e-6,
    floor: float | None = None,
) -> float:
    """Compare an analytic gradient to central differences; return the max relative error."""
    return rel_error(analytic, fd_grad(f, theta, eps), floor)
