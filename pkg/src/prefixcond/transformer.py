"""Pre-norm transformer block shared by the text and image encoders.

Parameters live in a flat ``name -> Tensor`` dict; a block is addressed by
its name prefix, e.g. ``text.blocks.0``.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import Tensor, gelu, layer_norm, matmul, reshape, scale, softmax, transpose, truncated_normal
from .numerics.tensor import _result


def init_block(rng: np.random.Generator, prefix: str, width: int, mlp_ratio: int) -> dict[str, Tensor]:
    hidden = width * mlp_ratio

    def w(*shape):
        return Tensor(truncated_normal(rng, shape), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n), requires_grad=True)

    return {
        f"{prefix}.ln1.g": ones(width),
        f"{prefix}.ln1.b": zeros(width),
        f"{prefix}.attn.qkv.w": w(width, 3 * width),
        f"{prefix}.attn.qkv.b": zeros(3 * width),
        f"{prefix}.attn.out.w": w(width, width),
        f"{prefix}.attn.out.b": zeros(width),
        f"{prefix}.ln2.g": ones(width),
        f"{prefix}.ln2.b": zeros(width),
        f"{prefix}.mlp.fc1.w": w(width, hidden),
        f"{prefix}.mlp.fc1.b": zeros(hidden),
        f"{prefix}.mlp.fc2.w": w(hidden, width),
        f"{prefix}.mlp.fc2.b": zeros(width),
    }


def _split_qkv(qkv: Tensor, index: int) -> Tensor:
    # qkv: (3, B, H, T, Dh) -> (B, H, T, Dh)
    out = qkv.data[index]

    def bw(g):
        full = np.zeros_like(qkv.data)
        full[index] = g
        return (full,)

    return _result(out.copy(), (qkv,), bw, "split_qkv")


def block_forward(
    p: dict[str, Tensor],
    prefix: str,
    x: Tensor,
    heads: int,
    mask: np.ndarray | None,
    trace: list | None = None,
) -> Tensor:
    """x: (B, T, D). ``mask`` is bool, broadcastable to (B, H, T, T), True = attend."""
    B, T, D = x.shape
    dh = D // heads

    h = layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    qkv = matmul(h, p[f"{prefix}.attn.qkv.w"]) + p[f"{prefix}.attn.qkv.b"]
    qkv = transpose(reshape(qkv, (B, T, 3, heads, dh)), (2, 0, 3, 1, 4))
    q = _split_qkv(qkv, 0)
    k = _split_qkv(qkv, 1)
    v = _split_qkv(qkv, 2)
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(dh))
    att = softmax(scores, mask)
    if trace is not None:
        trace.append(att.data.copy())
    ctx = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (B, T, D))
    x = x + (matmul(ctx, p[f"{prefix}.attn.out.w"]) + p[f"{prefix}.attn.out.b"])

    h = layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = gelu(matmul(h, p[f"{prefix}.mlp.fc1.w"]) + p[f"{prefix}.mlp.fc1.b"])
    x = x + (matmul(h, p[f"{prefix}.mlp.fc2.w"]) + p[f"{prefix}.mlp.fc2.b"])
    return x
