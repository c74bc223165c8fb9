"""Symmetric contrastive losses over L2-normalized text/image embeddings.

``clip_loss`` is the symmetric N-pair loss; ``unicl_loss`` generalizes it to
multiple positives per anchor (all samples sharing a label), averaging the
per-positive log-softmax terms outside the log. With all-distinct labels the
two coincide exactly.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .model import temperature
from .numerics import Tensor, as_tensor, log_softmax, matmul, mul, scale, sum_, transpose

__all__ = ["clip_loss", "unicl_loss", "positive_mask", "similarity", "temperature", "NotNormalizedError"]

NORM_TOL = 1e-9


class NotNormalizedError(ValueError):
    pass


def _check_inputs(U: Tensor, V: Tensor) -> None:
    if U.ndim != 2 or U.shape != V.shape:
        raise ValueError(f"U and V must be matching (B, d) matrices, got {U.shape} and {V.shape}")
    if U.shape[0] < 2:
        raise ValueError("contrastive loss needs at least 2 samples")
    for name, M in (("U", U), ("V", V)):
        norms = np.sqrt((M.data * M.data).sum(axis=1))
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if bad.size:
            raise NotNormalizedError(f"{name} row {bad[0]} has norm {norms[bad[0]]:.12f}, expected 1")


def similarity(U: Tensor, V: Tensor) -> Tensor:
    """S[i, j] = u_i . v_j."""
    return matmul(U, transpose(V))


def positive_mask(labels: Sequence[int]) -> np.ndarray:
    labels = np.asarray(labels)
    return labels[:, None] == labels[None, :]


def _scaled(S: Tensor, tau) -> Tensor:
    if isinstance(tau, Tensor):
        return mul(S, tau)
    return scale(S, float(tau))


def _directional(logits: Tensor, weights: np.ndarray) -> Tensor:
    B = logits.shape[0]
    return scale(sum_(mul(log_softmax(logits, axis=-1), weights)), -1.0 / B)


def unicl_loss(U, V, labels: Sequence[int], tau) -> Tensor:
    """Multi-positive symmetric contrastive loss; samples with equal labels are positives."""
    U, V = as_tensor(U), as_tensor(V)
    _check_inputs(U, V)
    if len(labels) != U.shape[0]:
        raise ValueError(f"{len(labels)} labels for a batch of {U.shape[0]}")
    P = positive_mask(labels).astype(np.float64)
    W = P / P.sum(axis=1, keepdims=True)
    logits = _scaled(similarity(U, V), tau)
    t2i = _directional(logits, W)
    i2t = _directional(transpose(logits), W.T.copy())
    return t2i + i2t


def clip_loss(U, V, tau) -> Tensor:
    """L_t2i + L_i2t with exactly one positive (the diagonal) per anchor."""
    U = as_tensor(U)
    return unicl_loss(U, V, list(range(U.shape[0])), tau)
