"""Fused forward/backward kernels for the hot elementwise and row-wise ops.

Two interchangeable implementations live here: plain numpy, and numba
``@njit`` loops. ``PREFIXCOND_KERNELS`` picks one at import time
(``numba`` or ``numpy``); the default is numba when it imports cleanly.
Every kernel takes and returns C-contiguous float64 arrays. Row-wise
kernels operate on 2-D arrays; callers reshape.
"""

from __future__ import annotations

import math
import os

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def np_softmax_fwd(x, mask):
    # mask: bool array, True = keep; may be None
    if mask is None:
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
    else:
        xm = np.where(mask, x, -np.inf)
        m = xm.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x - m, 0.0)), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_bwd(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def np_layernorm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def np_layernorm_bwd(dy, xhat, rstd, gain):
    n = xhat.shape[1]
    dxhat = dy * gain
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dx = (rstd[:, None] / n) * (
        n * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    return dx, dgain, dbias


def np_gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x * x * x)))


def np_gelu_bwd(x, dy):
    inner = GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


NUMPY_KERNELS = {
    "softmax_fwd": np_softmax_fwd,
    "softmax_bwd": np_softmax_bwd,
    "layernorm_fwd": np_layernorm_fwd,
    "layernorm_bwd": np_layernorm_bwd,
    "gelu_fwd": np_gelu_fwd,
    "gelu_bwd": np_gelu_bwd,
}


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------


def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def softmax_fwd_masked(x, mask):
        rows, cols = x.shape
        out = np.zeros_like(x)
        for r in range(rows):
            m = -np.inf
            for c in range(cols):
                if mask[r, c] and x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(cols):
                if mask[r, c]:
                    e = math.exp(x[r, c] - m)
                    out[r, c] = e
                    s += e
            for c in range(cols):
                out[r, c] /= s
        return out

    @njit(cache=True)
    def softmax_fwd_dense(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for c in range(1, cols):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(cols):
                e = math.exp(x[r, c] - m)
                out[r, c] = e
                s += e
            for c in range(cols):
                out[r, c] /= s
        return out

    @njit(cache=True)
    def softmax_bwd(y, dy):
        rows, cols = y.shape
        dx = np.empty_like(y)
        for r in range(rows):
            acc = 0.0
            for c in range(cols):
                acc += dy[r, c] * y[r, c]
            for c in range(cols):
                dx[r, c] = y[r, c] * (dy[r, c] - acc)
        return dx

    @njit(cache=True)
    def layernorm_fwd(x, gain, bias, eps):
        rows, n = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows)
        for r in range(rows):
            mu = 0.0
            for c in range(n):
                mu += x[r, c]
            mu /= n
            var = 0.0
            for c in range(n):
                d = x[r, c] - mu
                var += d * d
            var /= n
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for c in range(n):
                h = (x[r, c] - mu) * rs
                xhat[r, c] = h
                y[r, c] = h * gain[c] + bias[c]
        return y, xhat, rstd

    @njit(cache=True)
    def layernorm_bwd(dy, xhat, rstd, gain):
        rows, n = xhat.shape
        dx = np.empty_like(xhat)
        dgain = np.zeros(n)
        dbias = np.zeros(n)
        for r in range(rows):
            s1 = 0.0
            s2 = 0.0
            for c in range(n):
                dh = dy[r, c] * gain[c]
                s1 += dh
                s2 += dh * xhat[r, c]
                dgain[c] += dy[r, c] * xhat[r, c]
                dbias[c] += dy[r, c]
            k = rstd[r] / n
            for c in range(n):
                dh = dy[r, c] * gain[c]
                dx[r, c] = k * (n * dh - s1 - xhat[r, c] * s2)
        return dx, dgain, dbias

    # tanh through exp lets LLVM use its fast exp; nnan/ninf stay strict
    fm = {"nsz", "arcp", "contract", "afn", "reassoc"}

    @njit(cache=True, fastmath=fm)
    def gelu_fwd(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            z = GELU_C * (v + 0.044715 * v * v * v)
            t = 1.0 - 2.0 / (1.0 + math.exp(2.0 * z))
            out[i] = 0.5 * v * (1.0 + t)
        return out.reshape(x.shape)

    @njit(cache=True, fastmath=fm)
    def gelu_bwd(x, dy):
        fx = x.ravel()
        fd = dy.ravel()
        out = np.empty_like(fx)
        for i in range(fx.size):
            v = fx[i]
            z = GELU_C * (v + 0.044715 * v * v * v)
            t = 1.0 - 2.0 / (1.0 + math.exp(2.0 * z))
            dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
            out[i] = fd[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
        return out.reshape(x.shape)

    def softmax_fwd(x, mask):
        if mask is None:
            return softmax_fwd_dense(x)
        return softmax_fwd_masked(x, mask)

    return {
        "softmax_fwd": softmax_fwd,
        "softmax_bwd": softmax_bwd,
        "layernorm_fwd": layernorm_fwd,
        "layernorm_bwd": layernorm_bwd,
        "gelu_fwd": gelu_fwd,
        "gelu_bwd": gelu_bwd,
    }


def _load_numba():
    try:
        return _build_numba_kernels()
    except ImportError:
        return None


NUMBA_KERNELS = _load_numba()

_requested = os.environ.get("PREFIXCOND_KERNELS", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"PREFIXCOND_KERNELS must be 'numba' or 'numpy', got {_requested!r}")

if _requested == "numba" and NUMBA_KERNELS is not None:
    BACKEND = "numba"
    _active = NUMBA_KERNELS
else:
    BACKEND = "numpy"
    _active = NUMPY_KERNELS

softmax_fwd = _active["softmax_fwd"]
softmax_bwd = _active["softmax_bwd"]
layernorm_fwd = _active["layernorm_fwd"]
layernorm_bwd = _active["layernorm_bwd"]
gelu_fwd = _active["gelu_fwd"]
gelu_bwd = _active["gelu_bwd"]


def get_kernels(name: str) -> dict:
    """Return the kernel table for ``"numpy"`` or ``"numba"``."""
    if name == "numpy":
        return NUMPY_KERNELS
    if name == "numba":
        if NUMBA_KERNELS is None:
            raise RuntimeError("numba is not available")
        return NUMBA_KERNELS
    raise ValueError(f"unknown kernel backend {name!r}")
