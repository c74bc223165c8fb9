"""Dual encoder container: text params, image params and learnable log-temperature."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .image import ImageEncoderConfig, encode_images, init_image_params
from .numerics import Tensor, clamp_max, exp, l2_normalize, no_grad
from .text import TextEncoderConfig, TokenSequence, Vocabulary, encode_texts, init_text_params

TAU_INIT = 1.0 / 0.07
TAU_MAX = 100.0


@dataclass
class DualEncoderModel:
    text_cfg: TextEncoderConfig
    image_cfg: ImageEncoderConfig
    vocab: Vocabulary
    params: dict[str, Tensor]
    trained_with_prefix: bool = False
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        vocab: Vocabulary,
        text_cfg: TextEncoderConfig | None = None,
        image_cfg: ImageEncoderConfig | None = None,
        trained_with_prefix: bool = False,
    ) -> "DualEncoderModel":
        text_cfg = text_cfg or TextEncoderConfig()
        image_cfg = image_cfg or ImageEncoderConfig()
        if text_cfg.embed_dim != image_cfg.embed_dim:
            raise ValueError("text and image embed_dim must agree")
        params = init_text_params(rng, text_cfg, len(vocab))
        params.update(init_image_params(rng, image_cfg))
        params["log_tau"] = Tensor(np.array(math.log(TAU_INIT)), requires_grad=True)
        return cls(text_cfg, image_cfg, vocab, params, trained_with_prefix)

    @property
    def embed_dim(self) -> int:
        return self.text_cfg.embed_dim

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def no_decay_names(self) -> frozenset[str]:
        """Layer-norm gains, biases and the temperature skip weight decay."""
        return frozenset(
            n for n in self.params if n.endswith(".b") or n.endswith(".g") or n == "log_tau"
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def encode_text(self, seqs: Sequence[TokenSequence], capture_attention: bool = False):
        return encode_texts(self.params, self.text_cfg, seqs, capture_attention)

    def encode_image(self, pixels) -> Tensor:
        return encode_images(self.params, self.image_cfg, pixels)

    def text_features(self, seqs: Sequence[TokenSequence], batch_size: int = 256) -> np.ndarray:
        """L2-normalized text embeddings as a plain array (no graph)."""
        out = []
        with no_grad():
            for i in range(0, len(seqs), batch_size):
                emb, _ = self.encode_text(seqs[i : i + batch_size])
                out.append(l2_normalize(emb).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.embed_dim))

    def image_features(self, pixels: np.ndarray, batch_size: int = 256, normalize: bool = True) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(pixels), batch_size):
                emb = self.encode_image(pixels[i : i + batch_size])
                out.append(l2_normalize(emb).data if normalize else emb.data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.embed_dim))


def temperature(model: DualEncoderModel) -> Tensor:
    """tau = exp(log_tau), clamped to at most 100."""
    return clamp_max(exp(model.params["log_tau"]), TAU_MAX)
