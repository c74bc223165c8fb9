"""Tokenizer, prefix conditioning and the causal transformer text encoder."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import Tensor, embedding, layer_norm, matmul, take, truncated_normal
from .transformer import block_forward, init_block

PAD, BOS, EOS, PREFIX_PROMPT, PREFIX_CAPTION = 0, 1, 2, 3, 4
RESERVED = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", PREFIX_PROMPT: "<prompt>", PREFIX_CAPTION: "<caption>"}
FIRST_CONTENT_ID = 5


class Prefix(enum.Enum):
    PROMPT = "prompt"
    CAPTION = "caption"

    @property
    def token_id(self) -> int:
        return PREFIX_PROMPT if self is Prefix.PROMPT else PREFIX_CAPTION

    @classmethod
    def parse(cls, value) -> "Prefix | None":
        if value is None or isinstance(value, Prefix):
            return value
        value = str(value).lower()
        if value in ("none", "", "off"):
            return None
        return cls(value)


class TokenizeError(ValueError):
    pass


class PrefixError(ValueError):
    pass


class Vocabulary:
    """Closed word -> id map; ids 0-4 are reserved, content starts at 5."""

    def __init__(self, words: Iterable[str]):
        self.words: list[str] = []
        self.word_to_id: dict[str, int] = {}
        for w in words:
            w = w.strip().lower()
            if not w or w in self.word_to_id:
                continue
            if w in RESERVED.values():
                raise ValueError(f"word {w!r} collides with a reserved token")
            self.word_to_id[w] = FIRST_CONTENT_ID + len(self.words)
            self.words.append(w)

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocabulary":
        words = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                words.append(line)
        return cls(words)

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return FIRST_CONTENT_ID + len(self.words)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.word_to_id

    def id_of(self, word: str) -> int:
        try:
            return self.word_to_id[word.lower()]
        except KeyError:
            raise TokenizeError(f"unknown word {word!r}") from None

    def token_str(self, idx: int) -> str:
        if idx in RESERVED:
            return RESERVED[idx]
        return self.words[idx - FIRST_CONTENT_ID]


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    prefix: Prefix | None = None

    def __post_init__(self):
        ids = self.ids
        if len(ids) < 2 or ids[0] != BOS:
            raise TokenizeError("sequence must start with BOS")
        if ids.count(EOS) != 1:
            raise TokenizeError("sequence must contain exactly one EOS")
        e = ids.index(EOS)
        if any(t != PAD for t in ids[e + 1 :]):
            raise TokenizeError("only PAD may follow EOS")
        if self.prefix is not None and (len(ids) < 3 or ids[1] != self.prefix.token_id):
            raise TokenizeError("prefix flag does not match token at position 1")

    @property
    def eos_index(self) -> int:
        return self.ids.index(EOS)

    @property
    def max_len(self) -> int:
        return len(self.ids)

    def content_ids(self) -> tuple[int, ...]:
        start = 1 if self.prefix is None else 2
        return self.ids[start : self.eos_index]


def tokenize(text: str, vocab: Vocabulary, max_len: int = 32) -> TokenSequence:
    """Whitespace + lowercase tokenization into ``[BOS, words..., EOS, PAD...]``."""
    words = text.lower().split()
    if not words:
        raise TokenizeError("empty text")
    ids = [vocab.id_of(w) for w in words][: max_len - 2]
    seq = [BOS, *ids, EOS]
    seq += [PAD] * (max_len - len(seq))
    return TokenSequence(tuple(seq))


def prepend_prefix(seq: TokenSequence, kind: Prefix) -> TokenSequence:
    """Insert the prefix token right after BOS, dropping the last content
    word when the sequence is already full."""
    if seq.prefix is not None:
        raise PrefixError(f"sequence already carries prefix {seq.prefix.value!r}")
    kind = Prefix.parse(kind)
    content = list(seq.ids[1 : seq.eos_index])
    if len(content) + 3 > seq.max_len:
        content = content[:-1]
    ids = [BOS, kind.token_id, *content, EOS]
    ids += [PAD] * (seq.max_len - len(ids))
    return TokenSequence(tuple(ids), prefix=kind)


def condition(seq: TokenSequence, kind: Prefix | None) -> TokenSequence:
    return seq if kind is None else prepend_prefix(seq, kind)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TextEncoderConfig:
    layers: int = 2
    heads: int = 2
    width: int = 32
    mlp_ratio: int = 4
    max_len: int = 32
    embed_dim: int = 32

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if not 4 <= self.max_len <= 64:
            raise ValueError("max_len must lie in [4, 64]")


def init_text_params(rng: np.random.Generator, cfg: TextEncoderConfig, vocab_size: int) -> dict[str, Tensor]:
    p = {
        "text.tok_emb": Tensor(truncated_normal(rng, (vocab_size, cfg.width)), requires_grad=True),
        "text.pos_emb": Tensor(truncated_normal(rng, (cfg.max_len, cfg.width)), requires_grad=True),
    }
    for i in range(cfg.layers):
        p.update(init_block(rng, f"text.blocks.{i}", cfg.width, cfg.mlp_ratio))
    p["text.ln_f.g"] = Tensor(np.ones(cfg.width), requires_grad=True)
    p["text.ln_f.b"] = Tensor(np.zeros(cfg.width), requires_grad=True)
    p["text.proj"] = Tensor(truncated_normal(rng, (cfg.width, cfg.embed_dim)), requires_grad=True)
    return p


@dataclass
class AttentionTrace:
    """Softmax weights per layer, each (B, heads, T, T), plus the EOS rows."""

    layers: list[np.ndarray]
    ids: np.ndarray  # (B, T) token ids the trace was captured on
    eos_index: np.ndarray  # (B,)
    eos_rows: list[np.ndarray] = field(default_factory=list)  # per layer (B, heads, T)


def _stack_ids(seqs: Sequence[TokenSequence], max_len: int) -> np.ndarray:
    for s in seqs:
        if s.max_len > max_len:
            raise ValueError(f"sequence length {s.max_len} exceeds max_len {max_len}")
    ids = np.zeros((len(seqs), max_len), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : s.max_len] = s.ids
    return ids


def encode_texts(
    params: dict[str, Tensor],
    cfg: TextEncoderConfig,
    seqs: Sequence[TokenSequence],
    capture_attention: bool = False,
) -> tuple[Tensor, AttentionTrace | None]:
    """Batched text encoder; returns unnormalized (B, embed_dim) features."""
    ids = _stack_ids(seqs, cfg.max_len)
    eos = np.array([s.eos_index for s in seqs], dtype=np.int64)
    # causal masking makes everything after the last EOS irrelevant
    T = int(eos.max()) + 1
    ids = ids[:, :T]
    B = ids.shape[0]

    x = embedding(params["text.tok_emb"], ids) + take(params["text.pos_emb"], slice(0, T))
    causal = np.tril(np.ones((T, T), dtype=bool))
    mask = (causal[None, :, :] & (ids != PAD)[:, None, :])[:, None, :, :]

    layers: list[np.ndarray] | None = [] if capture_attention else None
    for i in range(cfg.layers):
        x = block_forward(params, f"text.blocks.{i}", x, cfg.heads, mask, layers)
    h = take(x, (np.arange(B), eos))
    h = layer_norm(h, params["text.ln_f.g"], params["text.ln_f.b"])
    out = matmul(h, params["text.proj"])

    trace = None
    if capture_attention:
        rows = [att[np.arange(B), :, eos, :] for att in layers]
        trace = AttentionTrace(layers=layers, ids=ids, eos_index=eos, eos_rows=rows)
    return out, trace


def end_token_attention(trace: AttentionTrace, vocab: Vocabulary, index: int = 0) -> list[list[tuple[str, float]]]:
    """Head-averaged EOS attention per layer for sequence ``index``,
    aligned to token strings with PAD removed and rows renormalized."""
    ids = trace.ids[index]
    keep = np.flatnonzero(ids != PAD)
    table = []
    for att in trace.layers:
        row = att[index, :, trace.eos_index[index], :].mean(axis=0)[keep]
        row = row / row.sum()
        table.append([(vocab.token_str(int(ids[k])), float(w)) for k, w in zip(keep, row)])
    return table


def write_attention_csv(
    path: str | Path, table: list[list[tuple[str, float]]], label: str = "", append: bool = False
) -> None:
    """Columns: condition, layer, position, token, weight. ``append`` adds rows to an existing file."""
    fresh = not (append and Path(path).exists())
    with open(path, "w" if fresh else "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(["condition", "layer", "position", "token", "weight"])
        for layer, row in enumerate(table):
            for pos, (tok, weight) in enumerate(row):
                w.writerow([label, layer, pos, tok, repr(weight)])
