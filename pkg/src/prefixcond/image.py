"""Patch-embedding transformer image encoder and the binary tensor file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Tensor, as_tensor, layer_norm, matmul, mean, reshape, transpose, truncated_normal
from .transformer import block_forward, init_block


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W, C) in [0, 1]
    source: str  # "label" | "caption"
    class_id: int = -1
    domain_style: str = "clean"

    def __post_init__(self):
        if self.source not in ("label", "caption"):
            raise ValueError(f"unknown source {self.source!r}")
        px = self.pixels
        if px.ndim != 3 or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixels must be an (H, W, C) array with values in [0, 1]")
        if self.source == "label" and self.class_id < 0:
            raise ValueError("label-source samples need a class id")


@dataclass(frozen=True)
class ImageEncoderConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    layers: int = 2
    heads: int = 2
    width: int = 32
    mlp_ratio: int = 4
    embed_dim: int = 32

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def init_image_params(rng: np.random.Generator, cfg: ImageEncoderConfig) -> dict[str, Tensor]:
    p = {
        "image.patch.w": Tensor(truncated_normal(rng, (cfg.patch_dim, cfg.width)), requires_grad=True),
        "image.patch.b": Tensor(np.zeros(cfg.width), requires_grad=True),
        "image.pos_emb": Tensor(truncated_normal(rng, (cfg.num_patches, cfg.width)), requires_grad=True),
    }
    for i in range(cfg.layers):
        p.update(init_block(rng, f"image.blocks.{i}", cfg.width, cfg.mlp_ratio))
    p["image.ln_f.g"] = Tensor(np.ones(cfg.width), requires_grad=True)
    p["image.ln_f.b"] = Tensor(np.zeros(cfg.width), requires_grad=True)
    p["image.proj"] = Tensor(truncated_normal(rng, (cfg.width, cfg.embed_dim)), requires_grad=True)
    return p


def encode_images(params: dict[str, Tensor], cfg: ImageEncoderConfig, pixels) -> Tensor:
    """pixels: (B, H, W, C) array or Tensor -> unnormalized (B, embed_dim)."""
    x = as_tensor(pixels)
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"image batch shape {x.shape} does not match expected (B, {', '.join(map(str, expected))})")
    B = x.shape[0]
    g = cfg.image_size // cfg.patch_size
    ps = cfg.patch_size
    x = reshape(x, (B, g, ps, g, ps, cfg.channels))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    x = reshape(x, (B, g * g, cfg.patch_dim))
    x = matmul(x, params["image.patch.w"]) + params["image.patch.b"] + params["image.pos_emb"]
    for i in range(cfg.layers):
        x = block_forward(params, f"image.blocks.{i}", x, cfg.heads, None)
    x = layer_norm(x, params["image.ln_f.g"], params["image.ln_f.b"])
    x = mean(x, axis=1)
    return matmul(x, params["image.proj"])


def random_crop(pixels: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Pad each image by ``pad`` (edge replicate) and crop back at a random offset."""
    B, H, W, C = pixels.shape
    padded = np.pad(pixels, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")
    offs = rng.integers(0, 2 * pad + 1, size=(B, 2))
    out = np.empty_like(pixels)
    for i in range(B):
        dy, dx = offs[i]
        out[i] = padded[i, dy : dy + H, dx : dx + W]
    return out


# ---------------------------------------------------------------------------
# binary tensor files: magic, uint32 ndim, uint64 dims, little-endian float64 body
# ---------------------------------------------------------------------------

TENSOR_MAGIC = b"PCTENSR1"


class TensorFileError(ValueError):
    pass


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != TENSOR_MAGIC:
        raise TensorFileError(f"{path}: bad magic")
    try:
        (ndim,) = struct.unpack_from("<I", raw, 8)
        dims = struct.unpack_from(f"<{ndim}Q", raw, 12)
    except struct.error as exc:
        raise TensorFileError(f"{path}: truncated header") from exc
    offset = 12 + 8 * ndim
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - offset != 8 * count:
        raise TensorFileError(f"{path}: body holds {len(raw) - offset} bytes, header implies {8 * count}")
    return np.frombuffer(raw, dtype="<f8", offset=offset).reshape(dims).astype(np.float64)
