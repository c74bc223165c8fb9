"""Training loop, configuration and bitwise-exact checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .datagen import (
    ClassCatalog,
    DataSizes,
    PromptTemplateSet,
    Sampler,
    SamplerConfig,
    StyleParams,
    SyntheticData,
    default_vocabulary,
    generate_datasets,
    planned_iterations,
)
from .image import ImageEncoderConfig, random_crop
from .model import DualEncoderModel, temperature
from .numerics import AdamWState, LrSchedule, NonFiniteError, adamw_step, backward, l2_normalize, lr_at, make_rng
from .numerics.rng import get_state, set_state
from .objectives import clip_loss, unicl_loss
from .text import PREFIX_CAPTION, PREFIX_PROMPT, TextEncoderConfig, Vocabulary

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PFXCKPT1"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, lr: float, loss: float):
        self.step = step
        self.lr = lr
        self.loss = loss
        super().__init__(f"non-finite loss at step {step} (lr={lr:.3e}, loss={loss})")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "clip"  # "clip" | "unicl"
    prefix_mode: bool = True
    strategy: str = "DS"  # "DS" | "ES"
    batch_size: int = 32
    source_ratio: float = 0.5
    lr_base: float = 1e-3
    weight_decay: float = 0.1
    warmup_steps: int | None = None  # None: max(100, 2% of total), capped at total
    epochs: int = 6
    max_steps: int | None = None  # optional hard cap below the planned count
    seed: int = 0
    log_every: int = 10
    augment: bool = True
    # data
    label_train_per_class: int = 200
    label_test_per_class: int = 25
    caption_train: int = 4000
    caption_test: int = 200
    zeroshot_test_per_class: int = 25
    shifted_test_per_class: int = 25
    synonym_prob: float = 0.15
    style_prob: float = 0.25
    opener_prob: float = 0.3
    lexicon_path: str | None = None
    catalog_path: str | None = None
    templates_path: str | None = None
    # encoders
    text_layers: int = 2
    text_heads: int = 2
    text_width: int = 32
    text_mlp_ratio: int = 4
    max_len: int = 32
    image_patch_size: int = 4
    image_layers: int = 2
    image_heads: int = 2
    image_width: int = 32
    image_mlp_ratio: int = 4
    embed_dim: int = 32

    def __post_init__(self):
        if self.objective not in ("clip", "unicl"):
            raise ConfigError(f"objective must be 'clip' or 'unicl', got {self.objective!r}")
        if self.strategy not in ("DS", "ES"):
            raise ConfigError(f"strategy must be 'DS' or 'ES', got {self.strategy!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        for name in ("lexicon_path", "catalog_path", "templates_path"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{name}: file {path!r} does not exist")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a flat JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def text_config(self) -> TextEncoderConfig:
        return TextEncoderConfig(
            self.text_layers, self.text_heads, self.text_width, self.text_mlp_ratio, self.max_len, self.embed_dim
        )

    def image_config(self) -> ImageEncoderConfig:
        return ImageEncoderConfig(
            patch_size=self.image_patch_size,
            layers=self.image_layers,
            heads=self.image_heads,
            width=self.image_width,
            mlp_ratio=self.image_mlp_ratio,
            embed_dim=self.embed_dim,
        )

    def data_sizes(self) -> DataSizes:
        return DataSizes(
            self.label_train_per_class,
            self.label_test_per_class,
            self.caption_train,
            self.caption_test,
            self.zeroshot_test_per_class,
            self.shifted_test_per_class,
        )

    def style_params(self) -> StyleParams:
        return StyleParams(synonym_prob=self.synonym_prob, style_prob=self.style_prob, opener_prob=self.opener_prob)

    def data_key(self) -> tuple:
        """Fields that determine the generated data (for sharing across variants)."""
        return (
            self.seed,
            self.data_sizes(),
            self.style_params(),
            self.lexicon_path,
            self.catalog_path,
            self.templates_path,
            self.max_len,
        )


def build_data(cfg: TrainConfig) -> SyntheticData:
    vocab = Vocabulary.from_file(cfg.lexicon_path) if cfg.lexicon_path else default_vocabulary()
    return generate_datasets(
        catalog=ClassCatalog.from_csv(cfg.catalog_path),
        sizes=cfg.data_sizes(),
        style_params=cfg.style_params(),
        seed=cfg.seed,
        templates=PromptTemplateSet.from_file(cfg.templates_path),
        vocab=vocab,
        max_len=cfg.max_len,
    )


def total_steps(cfg: TrainConfig) -> int:
    n_label = cfg.label_train_per_class * len(ClassCatalog.from_csv(cfg.catalog_path).seen_ids)
    steps = planned_iterations(n_label, cfg.batch_size, cfg.epochs)
    if cfg.max_steps is not None:
        steps = min(steps, cfg.max_steps)
    return steps


def warmup_for(cfg: TrainConfig, total: int) -> int:
    if cfg.warmup_steps is not None:
        return min(cfg.warmup_steps, total)
    return min(max(100, math.ceil(0.02 * total)), total)


@dataclass
class MetricsLog:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


class Trainer:
    """Owns one model, its optimizer state and the random streams."""

    def __init__(self, cfg: TrainConfig, data: SyntheticData | None = None):
        self.cfg = cfg
        self.data = data if data is not None else build_data(cfg)
        self.total_steps = total_steps(cfg)
        self.schedule = LrSchedule(cfg.lr_base, warmup_for(cfg, self.total_steps), self.total_steps)
        init_rng = make_rng(cfg.seed, "init")
        self.model = DualEncoderModel.create(
            init_rng, self.data.vocab, cfg.text_config(), cfg.image_config(), trained_with_prefix=cfg.prefix_mode
        )
        self.model.meta["config_hash"] = cfg.config_hash()
        self.opt = AdamWState(
            lr_base=cfg.lr_base, weight_decay=cfg.weight_decay, no_decay=self.model.no_decay_names()
        )
        self.sampler_rng = make_rng(cfg.seed, "sampler")
        self.augment_rng = make_rng(cfg.seed, "augment")
        self.sampler = Sampler(
            SamplerConfig(cfg.strategy, cfg.batch_size, cfg.source_ratio, cfg.seed),
            self.data,
            cfg.prefix_mode,
            self.sampler_rng,
        )
        self.step = 0
        self.log = MetricsLog()
        self.grad_seen: dict[str, int] = {}  # parameter -> last step with nonzero grad
        self.grad_norm_sum: dict[str, float] = {}
        self.prefix_grad_sum = np.zeros(2)  # cumulative grad norm of the Prompt / Caption rows

    def loss_fn(self, U, V, labels):
        tau = temperature(self.model)
        if self.cfg.objective == "unicl":
            return unicl_loss(U, V, labels, tau)
        return clip_loss(U, V, tau)

    def train_step(self) -> float:
        batch = self.sampler.next_batch()
        pixels = random_crop(batch.pixels, self.augment_rng) if self.cfg.augment else batch.pixels
        lr = lr_at(self.schedule, self.step + 1)
        try:
            text_emb, _ = self.model.encode_text(batch.seqs)
            image_emb = self.model.encode_image(pixels)
            loss = self.loss_fn(l2_normalize(text_emb), l2_normalize(image_emb), batch.labels)
        except NonFiniteError:
            raise TrainingDiverged(self.step, lr, float("nan")) from None
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(self.step, lr, value)
        try:
            backward(loss)
        except NonFiniteError:
            raise TrainingDiverged(self.step, lr, value) from None
        for name, p in self.model.params.items():
            n = float(np.sqrt((p.grad * p.grad).sum()))
            if n > 0.0:
                self.grad_seen[name] = self.step
            self.grad_norm_sum[name] = self.grad_norm_sum.get(name, 0.0) + n
        g = self.model.params["text.tok_emb"].grad[[PREFIX_PROMPT, PREFIX_CAPTION]]
        self.prefix_grad_sum += np.sqrt((g * g).sum(axis=1))
        adamw_step(self.model.params, self.opt, lr)
        tau = float(temperature(self.model).data)
        if self.step % self.cfg.log_every == 0 or self.step == self.total_steps - 1:
            self.log.append({"step": self.step, "loss": value, "tau": tau, "lr": lr})
        self.step += 1
        return value

    def dead_parameters(self, window: int = 100) -> list[str]:
        """Parameters with no nonzero gradient during the last ``window`` steps."""
        if self.step < window:
            return []
        cutoff = self.step - window
        return [n for n in self.model.params if self.grad_seen.get(n, -1) < cutoff]

    def run(self, n_steps: int | None = None) -> MetricsLog:
        end = self.total_steps if n_steps is None else min(self.total_steps, self.step + n_steps)
        while self.step < end:
            self.train_step()
        return self.log

    # -- checkpoints ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path: str | Path, data: SyntheticData | None = None) -> "Trainer":
        return load_checkpoint(path, data)


def train(cfg: TrainConfig, data: SyntheticData | None = None) -> tuple[DualEncoderModel, MetricsLog]:
    trainer = Trainer(cfg, data)
    trainer.run()
    return trainer.model, trainer.log


# ---------------------------------------------------------------------------
# checkpoint format: magic, u64 header length, JSON header, float64 LE body
# ---------------------------------------------------------------------------


def _rng_state_json(rng: np.random.Generator) -> dict:
    st = get_state(rng)
    return json.loads(json.dumps(st, default=lambda o: o.tolist() if hasattr(o, "tolist") else int(o)))


def _rng_state_restore(rng: np.random.Generator, st: dict) -> None:
    st = dict(st)
    inner = dict(st["state"])
    inner["counter"] = np.array(inner["counter"], dtype=np.uint64)
    inner["key"] = np.array(inner["key"], dtype=np.uint64)
    st["state"] = inner
    st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
    set_state(rng, st)


def save_checkpoint(trainer: Trainer, path: str | Path) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for name, p in trainer.model.params.items():
        arrays.append((f"param/{name}", p.data))
    for name in trainer.model.params:
        if name in trainer.opt.first_moment:
            arrays.append((f"m/{name}", trainer.opt.first_moment[name]))
            arrays.append((f"v/{name}", trainer.opt.second_moment[name]))
    index, offset = [], 0
    for key, arr in arrays:
        index.append({"key": key, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "version": CHECKPOINT_VERSION,
        "config": trainer.cfg.to_dict(),
        "config_hash": trainer.cfg.config_hash(),
        "step": trainer.step,
        "opt_step_count": trainer.opt.step_count,
        "rng": {
            "sampler": _rng_state_json(trainer.sampler_rng),
            "augment": _rng_state_json(trainer.augment_rng),
        },
        "trained_with_prefix": trainer.model.trained_with_prefix,
        "vocab": trainer.model.vocab.words,
        "log": trainer.log.records,
        "index": index,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(body)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and validate a checkpoint file into (header, arrays)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        (hlen,) = struct.unpack_from("<Q", raw, 8)
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header ({exc})") from None
    if not isinstance(header, dict) or "version" not in header or "index" not in header:
        raise CheckpointError(f"{path}: corrupted header (missing fields)")
    if header["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header['version']} != supported {CHECKPOINT_VERSION}")
    try:
        cfg = TrainConfig.from_dict(header["config"])
    except ConfigError as exc:
        raise CheckpointError(f"{path}: stored config invalid ({exc})") from None
    if cfg.config_hash() != header.get("config_hash"):
        raise CheckpointError(f"{path}: config hash mismatch")
    body = np.frombuffer(raw, dtype="<f8", offset=16 + hlen)
    arrays = {}
    for ent in header["index"]:
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        chunk = body[ent["offset"] : ent["offset"] + n]
        if chunk.size != n:
            raise CheckpointError(f"{path}: truncated body at {ent['key']}")
        arrays[ent["key"]] = chunk.reshape(ent["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(
    path: str | Path, data: SyntheticData | None = None, expected_config: TrainConfig | None = None
) -> Trainer:
    """Rebuild a :class:`Trainer` exactly as it was saved."""
    header, arrays = read_checkpoint(path)
    cfg = TrainConfig.from_dict(header["config"])
    if expected_config is not None and expected_config.config_hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint config hash {header['config_hash']} != expected")
    trainer = Trainer(cfg, data)
    if trainer.model.vocab.words != header["vocab"]:
        raise CheckpointError(f"{path}: vocabulary differs from the configured lexicon")
    for name, p in trainer.model.params.items():
        key = f"param/{name}"
        if key not in arrays or arrays[key].shape != p.data.shape:
            raise CheckpointError(f"{path}: missing or misshapen parameter {name}")
        p.data = arrays[key].copy()
    for name in trainer.model.params:
        if f"m/{name}" in arrays:
            trainer.opt.first_moment[name] = arrays[f"m/{name}"].copy()
            trainer.opt.second_moment[name] = arrays[f"v/{name}"].copy()
    trainer.opt.step_count = header["opt_step_count"]
    trainer.step = header["step"]
    _rng_state_restore(trainer.sampler_rng, header["rng"]["sampler"])
    _rng_state_restore(trainer.augment_rng, header["rng"]["augment"])
    trainer.log.records = list(header["log"])
    return trainer


def load_model(path: str | Path) -> tuple[DualEncoderModel, TrainConfig]:
    """Model and config from a checkpoint, without building a trainer."""
    header, arrays = read_checkpoint(path)
    cfg = TrainConfig.from_dict(header["config"])
    vocab = Vocabulary(header["vocab"])
    model = DualEncoderModel.create(
        make_rng(cfg.seed, "init"), vocab, cfg.text_config(), cfg.image_config(), header["trained_with_prefix"]
    )
    for name, p in model.params.items():
        key = f"param/{name}"
        if key not in arrays or arrays[key].shape != p.data.shape:
            raise CheckpointError(f"{path}: missing or misshapen parameter {name}")
        p.data = arrays[key].copy()
    model.meta["config_hash"] = header["config_hash"]
    return model, cfg
