"""Procedural label-style and caption-style datasets, prompts and batch samplers.

The label source renders one large, centered object on a clean light
background and pairs it with a filled prompt template. The caption source
renders a small off-center object in clutter next to a context object,
sometimes with a style transform, and pairs it with a grammar-generated
caption that names the class (or its synonym), an attribute, a relation
and the context object. The two sources differ in image domain,
vocabulary and sentence shape, which is the bias the prefix token is
meant to absorb.
"""

from __future__ import annotations

import colorsys
import csv
import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .image import ImageSample, read_tensor, write_tensor
from .numerics import make_rng
from .text import Prefix, TokenSequence, Vocabulary, condition, tokenize

IMAGE_SIZE = 16
SHAPE_SIZE = 5

ARTICLES = ("a", "the")
ATTRIBUTES = ("dark", "bright", "pale", "faded")
RELATIONS = ("near", "beside", "above", "below")
CONTEXTS = ("tree", "house", "fence", "cloud", "wall", "table")
OPENERS = ("a photo of", "a picture of", "a drawing of")
STYLES = ("noise", "invert", "sketch")
EXTRA_WORDS = ("an",)


def resource_path(name: str) -> Path:
    return Path(str(resources.files("prefixcond") / "resources" / name))


# ---------------------------------------------------------------------------
# catalog and templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassInfo:
    class_id: int
    name: str
    synonym: str
    seen_in_labels: bool
    color: tuple[float, float, float]
    shape: np.ndarray = field(repr=False, compare=False)


class ClassCatalog:
    """Classes with canonical names, synonyms and deterministic appearance."""

    def __init__(self, rows: Sequence[tuple[int, str, str, bool]], pattern_seed: int = 0):
        rows = sorted(rows, key=lambda r: r[0])
        if [r[0] for r in rows] != list(range(len(rows))):
            raise ValueError("class ids must be dense and start at 0")
        words = [r[1] for r in rows] + [r[2] for r in rows if r[2] != r[1]]
        if len(set(words)) != len(words):
            raise ValueError("class names and synonyms must be distinct words")
        shapes = _distinct_shapes(len(rows), make_rng(pattern_seed, "catalog", "shapes"))
        self.pattern_seed = pattern_seed
        self.classes: list[ClassInfo] = []
        for (cid, name, syn, seen), shape in zip(rows, shapes):
            hue = (cid * 0.618033988749895) % 1.0
            color = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
            self.classes.append(ClassInfo(cid, name, syn, bool(seen), tuple(color), shape))

    @classmethod
    def from_csv(cls, path: str | Path | None = None, pattern_seed: int = 0) -> "ClassCatalog":
        path = path or resource_path("catalog.csv")
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                seen = rec["seen_in_labels"].strip().lower() in ("1", "true", "yes")
                rows.append((int(rec["class_id"]), rec["name"].strip().lower(), rec["synonym"].strip().lower(), seen))
        return cls(rows, pattern_seed)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class_id", "name", "synonym", "seen_in_labels"])
            for c in self.classes:
                w.writerow([c.class_id, c.name, c.synonym, str(c.seen_in_labels).lower()])

    def __len__(self) -> int:
        return len(self.classes)

    def __getitem__(self, cid: int) -> ClassInfo:
        return self.classes[cid]

    @property
    def seen_ids(self) -> list[int]:
        return [c.class_id for c in self.classes if c.seen_in_labels]

    @property
    def caption_only_ids(self) -> list[int]:
        return [c.class_id for c in self.classes if not c.seen_in_labels]

    def with_identity_synonyms(self) -> "ClassCatalog":
        """Copy whose synonym equals the canonical name for every class."""
        out = ClassCatalog.__new__(ClassCatalog)
        out.pattern_seed = self.pattern_seed
        out.classes = [ClassInfo(c.class_id, c.name, c.name, c.seen_in_labels, c.color, c.shape) for c in self.classes]
        return out


def _distinct_shapes(n: int, rng: np.random.Generator) -> list[np.ndarray]:
    shapes: list[np.ndarray] = []
    seen: set[bytes] = set()
    while len(shapes) < n:
        m = rng.random((SHAPE_SIZE, SHAPE_SIZE)) < 0.55
        if not 10 <= m.sum() <= 18 or not m.any(axis=0).all() or not m.any(axis=1).all():
            continue
        key = m.tobytes()
        if key in seen:
            continue
        seen.add(key)
        shapes.append(m)
    return shapes


class PromptTemplateSet:
    def __init__(self, templates: Sequence[str]):
        templates = [t.strip() for t in templates if t.strip()]
        for t in templates:
            if t.count("{}") != 1:
                raise ValueError(f"template {t!r} must contain exactly one '{{}}'")
        if not templates:
            raise ValueError("no templates")
        self.templates = list(templates)

    @classmethod
    def from_file(cls, path: str | Path | None = None) -> "PromptTemplateSet":
        path = path or resource_path("templates.txt")
        lines = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip() and not line.lstrip().startswith("#"):
                lines.append(line)
        return cls(lines)

    def __len__(self) -> int:
        return len(self.templates)

    def fill(self, index: int, word: str) -> str:
        return self.templates[index].replace("{}", word)


def default_lexicon(catalog: ClassCatalog, templates: PromptTemplateSet) -> list[str]:
    words: list[str] = []
    for t in templates.templates:
        words += [w for w in t.replace("{}", " ").split()]
    for c in catalog.classes:
        words += [c.name, c.synonym]
    for group in (ARTICLES, ATTRIBUTES, RELATIONS, CONTEXTS, EXTRA_WORDS):
        words += list(group)
    for o in OPENERS:
        words += o.split()
    return list(dict.fromkeys(w.lower() for w in words))


def default_vocabulary() -> Vocabulary:
    return Vocabulary.from_file(resource_path("lexicon.txt"))


def build_prompts(catalog: ClassCatalog, templates: PromptTemplateSet, use_synonyms: bool = False) -> list[list[str]]:
    """Per-class list of filled templates (canonical name or synonym)."""
    out = []
    for c in catalog.classes:
        word = c.synonym if use_synonyms else c.name
        out.append([templates.fill(i, word) for i in range(len(templates))])
    return out


def planned_iterations(n_label_samples: int, batch_size: int, epochs: int) -> int:
    """Iterations for ``epochs`` passes over the label source, doubled for the caption source."""
    if min(n_label_samples, batch_size, epochs) <= 0:
        raise ValueError("all arguments must be positive")
    return math.ceil(n_label_samples / batch_size) * 2 * epochs


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StyleParams:
    label_background: float = 0.85
    label_noise: float = 0.02
    label_scale: int = 2
    caption_background: tuple[float, float] = (0.05, 0.45)
    caption_noise: float = 0.04
    clutter: int = 1
    caption_scale: int = 2
    style_prob: float = 0.25
    synonym_prob: float = 0.15
    opener_prob: float = 0.3


def _paint(canvas: np.ndarray, mask: np.ndarray, color, top: int, left: int) -> None:
    h, w = mask.shape
    H, W, _ = canvas.shape
    sub = canvas[max(top, 0) : min(top + h, H), max(left, 0) : min(left + w, W)]
    m = mask[max(-top, 0) : max(-top, 0) + sub.shape[0], max(-left, 0) : max(-left, 0) + sub.shape[1]]
    sub[m] = color


def _apply_attribute(color: np.ndarray, attribute: str) -> np.ndarray:
    if attribute == "dark":
        return color * 0.45
    if attribute == "bright":
        return 0.5 * color + 0.5
    if attribute == "pale":
        return 0.5 * color + 0.25
    if attribute == "faded":
        return 0.7 * color + 0.3 * color.mean()
    return color


def apply_style(img: np.ndarray, style: str, rng: np.random.Generator) -> np.ndarray:
    if style == "noise":
        img = img + rng.normal(0.0, 0.15, img.shape)
    elif style == "invert":
        img = 1.0 - img
    elif style == "sketch":
        gray = img.mean(axis=2)
        gy, gx = np.gradient(gray)
        edges = np.clip(np.hypot(gx, gy) * 3.0, 0.0, 1.0)
        img = np.repeat((1.0 - edges)[:, :, None], 3, axis=2)
    elif style != "clean":
        raise ValueError(f"unknown style {style!r}")
    return np.clip(img, 0.0, 1.0)


def _context_shapes() -> dict[str, tuple[np.ndarray, tuple[float, float, float]]]:
    rng = make_rng(7, "contexts")
    out = {}
    for i, word in enumerate(CONTEXTS):
        m = rng.random((4, 4)) < 0.6
        m[1:3, 1:3] = True
        gray = 0.35 + 0.1 * i
        out[word] = (m, (gray, 0.9 - 0.1 * i, 0.5))
    return out


_CONTEXT_SHAPES = _context_shapes()


def render_label_image(info: ClassInfo, style: StyleParams, rng: np.random.Generator) -> np.ndarray:
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), style.label_background)
    img += rng.normal(0.0, style.label_noise, img.shape)
    mask = np.kron(info.shape, np.ones((style.label_scale, style.label_scale), dtype=bool))
    size = mask.shape[0]
    base = (IMAGE_SIZE - size) // 2
    top, left = base + rng.integers(-1, 2, size=2)
    _paint(img, mask, np.asarray(info.color), int(top), int(left))
    return np.clip(img, 0.0, 1.0)


def render_caption_image(
    info: ClassInfo, attribute: str, relation: str, context: str, styled: str, style: StyleParams, rng: np.random.Generator
) -> np.ndarray:
    lo, hi = style.caption_background
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3))
    img[:] = rng.uniform(lo, hi, 3)
    img += rng.normal(0.0, style.caption_noise, img.shape)
    for _ in range(style.clutter):
        h, w = rng.integers(2, 4, size=2)
        t, l = rng.integers(0, IMAGE_SIZE - 2, size=2)
        img[t : t + h, l : l + w] = rng.uniform(0.0, 1.0, 3)

    # object position, then the context object placed by the relation
    mask = np.kron(info.shape, np.ones((style.caption_scale, style.caption_scale), dtype=bool))
    size = mask.shape[0]
    top, left = (int(v) for v in rng.integers(0, IMAGE_SIZE - size + 1, size=2))
    cmask, ccolor = _CONTEXT_SHAPES[context]
    if relation == "above":
        ct, cl = top - 3, left + int(rng.integers(0, size - 3))
    elif relation == "below":
        ct, cl = top + size - 1, left + int(rng.integers(0, size - 3))
    elif relation == "beside":
        ct, cl = top + int(rng.integers(0, size - 3)), left + size - 1
    else:
        ct, cl = top + int(rng.integers(0, size - 3)), left - 3
    _paint(img, cmask, np.asarray(ccolor), ct, cl)
    color = _apply_attribute(np.asarray(info.color), attribute)
    _paint(img, mask, color, top, left)
    return apply_style(np.clip(img, 0.0, 1.0), styled, rng)


def make_caption(info: ClassInfo, attribute: str, relation: str, context: str, style: StyleParams, rng) -> str:
    word = info.synonym if rng.random() < style.synonym_prob else info.name
    a1, a2 = (ARTICLES[i] for i in rng.integers(0, len(ARTICLES), size=2))
    text = f"{a1} {attribute} {word} {relation} {a2} {context}"
    if rng.random() < style.opener_prob:
        text = f"{OPENERS[int(rng.integers(0, len(OPENERS)))]} {text}"
    return text


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class ImageSet:
    """Columnar set of images with their texts and provenance."""

    name: str
    source: str  # "label" | "caption"
    pixels: np.ndarray  # (N, H, W, C)
    class_ids: np.ndarray  # (N,)
    texts: list[str]
    styles: list[str]
    tokens: list[TokenSequence] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.class_ids)

    def sample(self, i: int) -> ImageSample:
        return ImageSample(self.pixels[i], self.source, int(self.class_ids[i]), self.styles[i])

    def content_hashes(self) -> set[str]:
        return {hashlib.sha1(self.pixels[i].tobytes()).hexdigest() for i in range(len(self))}


@dataclass(frozen=True)
class DataSizes:
    label_train_per_class: int = 200
    label_test_per_class: int = 25
    caption_train: int = 4000
    caption_test: int = 200
    zeroshot_test_per_class: int = 25
    shifted_test_per_class: int = 25


@dataclass
class SyntheticData:
    catalog: ClassCatalog
    templates: PromptTemplateSet
    vocab: Vocabulary
    style: StyleParams
    seed: int
    label_train: ImageSet
    label_test: ImageSet  # seen classes, clean label-style
    caption_train: ImageSet
    caption_test: ImageSet  # held-out caption pairs (retrieval)
    zeroshot_test: ImageSet  # caption-only classes, caption-style images
    shifted_test: ImageSet  # seen classes, caption-style scenes under a style transform
    shifted_label_test: ImageSet  # seen classes, label-style framing under a style transform
    max_len: int = 32

    @property
    def S_L(self) -> ImageSet:
        return self.label_train

    @property
    def S_C(self) -> ImageSet:
        return self.caption_train


class VocabularyError(ValueError):
    pass


def _check_vocab(catalog: ClassCatalog, templates: PromptTemplateSet, vocab: Vocabulary) -> None:
    for c in catalog.classes:
        for w in (c.name, c.synonym):
            if w not in vocab:
                raise VocabularyError(f"class word {w!r} (class {c.class_id}) missing from vocabulary")
    for t in templates.templates:
        for w in t.replace("{}", " ").split():
            if w not in vocab:
                raise VocabularyError(f"template word {w!r} missing from vocabulary")
    for group in (ARTICLES, ATTRIBUTES, RELATIONS, CONTEXTS):
        for w in group:
            if w not in vocab:
                raise VocabularyError(f"caption grammar word {w!r} missing from vocabulary")


def _label_set(name, catalog, templates, class_ids, per_class, style, seed, styles=("clean",)) -> ImageSet:
    pix, cids, texts, tags = [], [], [], []
    idx = 0
    for cid in class_ids:
        info = catalog[cid]
        for _ in range(per_class):
            rng = make_rng(seed, name, idx)
            img = render_label_image(info, style, rng)
            tag = styles[idx % len(styles)]
            if tag != "clean":
                img = apply_style(img, tag, rng)
            pix.append(img)
            cids.append(cid)
            texts.append(templates.fill(int(rng.integers(0, len(templates))), info.name))
            tags.append(tag)
            idx += 1
    return ImageSet(name, "label", np.stack(pix), np.array(cids, dtype=np.int64), texts, tags)


def _caption_set(name, catalog, class_ids, count, style, seed, unique_texts=False, styles=None) -> ImageSet:
    pix, cids, texts, tags = [], [], [], []
    used: set[str] = set()
    idx = 0
    attempts = 0
    while len(cids) < count:
        rng = make_rng(seed, name, idx)
        idx += 1
        cid = class_ids[int(rng.integers(0, len(class_ids)))]
        info = catalog[cid]
        attribute = ATTRIBUTES[int(rng.integers(0, len(ATTRIBUTES)))]
        relation = RELATIONS[int(rng.integers(0, len(RELATIONS)))]
        context = CONTEXTS[int(rng.integers(0, len(CONTEXTS)))]
        if styles is not None:
            styled = styles[len(cids) % len(styles)]
        else:
            styled = STYLES[int(rng.integers(0, len(STYLES)))] if rng.random() < style.style_prob else "clean"
        text = make_caption(info, attribute, relation, context, style, rng)
        if unique_texts and text in used:
            attempts += 1
            if attempts > 100 * count:
                raise RuntimeError("could not draw enough distinct captions")
            continue
        used.add(text)
        pix.append(render_caption_image(info, attribute, relation, context, styled, style, rng))
        cids.append(cid)
        texts.append(text)
        tags.append(styled)
    return ImageSet(name, "caption", np.stack(pix), np.array(cids, dtype=np.int64), texts, tags)


def _caption_set_per_class(name, catalog, class_ids, per_class, style, seed, styles=None) -> ImageSet:
    parts = [_caption_set(f"{name}/{cid}", catalog, [cid], per_class, style, seed, styles=styles) for cid in class_ids]
    return ImageSet(
        name,
        "caption",
        np.concatenate([p.pixels for p in parts]),
        np.concatenate([p.class_ids for p in parts]),
        [t for p in parts for t in p.texts],
        [s for p in parts for s in p.styles],
    )


def generate_datasets(
    catalog: ClassCatalog | None = None,
    sizes: DataSizes | None = None,
    style_params: StyleParams | None = None,
    seed: int = 0,
    templates: PromptTemplateSet | None = None,
    vocab: Vocabulary | None = None,
    max_len: int = 32,
) -> SyntheticData:
    """Render every split. Each sample is a pure function of (seed, split, index)."""
    catalog = catalog or ClassCatalog.from_csv()
    sizes = sizes or DataSizes()
    style = style_params or StyleParams()
    templates = templates or PromptTemplateSet.from_file()
    vocab = vocab or default_vocabulary()
    _check_vocab(catalog, templates, vocab)
    if sizes.label_train_per_class < 10:
        raise ValueError("need at least 10 label images per class")

    seen, unseen = catalog.seen_ids, catalog.caption_only_ids
    all_ids = list(range(len(catalog)))
    data = SyntheticData(
        catalog=catalog,
        templates=templates,
        vocab=vocab,
        style=style,
        seed=seed,
        label_train=_label_set("label_train", catalog, templates, seen, sizes.label_train_per_class, style, seed),
        label_test=_label_set("label_test", catalog, templates, seen, sizes.label_test_per_class, style, seed),
        caption_train=_caption_set("caption_train", catalog, all_ids, sizes.caption_train, style, seed),
        caption_test=_caption_set("caption_test", catalog, all_ids, sizes.caption_test, style, seed, unique_texts=True),
        zeroshot_test=_caption_set_per_class("zeroshot_test", catalog, unseen, sizes.zeroshot_test_per_class, style, seed),
        shifted_test=_caption_set_per_class(
            "shifted_test", catalog, seen, sizes.shifted_test_per_class, style, seed, styles=STYLES
        ),
        shifted_label_test=_label_set(
            "shifted_label_test", catalog, templates, seen, sizes.shifted_test_per_class, style, seed, styles=STYLES
        ),
        max_len=max_len,
    )
    for s in (data.caption_train, data.caption_test):
        s.tokens = [tokenize(t, vocab, max_len) for t in s.texts]
    return data


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "DS"  # "DS" (one source per batch) | "ES" (per-slot mixing)
    batch_size: int = 32
    source_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("DS", "ES"):
            raise ValueError(f"strategy must be 'DS' or 'ES', got {self.strategy!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.0 < self.source_ratio < 1.0:
            raise ValueError("source_ratio must lie in (0, 1)")


@dataclass(frozen=True)
class Batch:
    pixels: np.ndarray
    seqs: tuple[TokenSequence, ...]
    labels: np.ndarray  # loss labels: class id for label samples, fresh unique ids for captions
    class_ids: np.ndarray
    is_label: np.ndarray  # bool per slot
    with_replacement: bool = False

    def __len__(self) -> int:
        return len(self.seqs)


class Sampler:
    """Stateful single-consumer batch iterator over the two training sources."""

    def __init__(self, cfg: SamplerConfig, data: SyntheticData, prefix_mode: bool, rng: np.random.Generator):
        if len(data.label_train) == 0 or len(data.caption_train) == 0:
            raise ValueError("both sources must be nonempty")
        self.cfg = cfg
        self.data = data
        self.prefix_mode = prefix_mode
        self.rng = rng
        self._n_classes = len(data.catalog)
        lp = Prefix.PROMPT if prefix_mode else None
        cp = Prefix.CAPTION if prefix_mode else None
        # label texts: one tokenized prompt per (template, class), drawn per use
        self._prompt_tokens = [
            [condition(tokenize(data.templates.fill(t, c.name), data.vocab, data.max_len), lp) for c in data.catalog.classes]
            for t in range(len(data.templates))
        ]
        self._caption_tokens = [condition(s, cp) for s in data.caption_train.tokens]

    def _draw(self, n: int, size: int) -> tuple[np.ndarray, bool]:
        if n > size:
            return self.rng.integers(0, size, size=n), True
        return self.rng.choice(size, size=n, replace=False), False

    def next_batch(self) -> Batch:
        B = self.cfg.batch_size
        if self.cfg.strategy == "DS":
            from_label = bool(self.rng.random() < 0.5)
            is_label = np.full(B, from_label)
        else:
            is_label = self.rng.random(B) < self.cfg.source_ratio
        n_label = int(is_label.sum())
        L, C = self.data.label_train, self.data.caption_train
        li, rep_l = self._draw(n_label, len(L))
        ci, rep_c = self._draw(B - n_label, len(C))
        tmpl = self.rng.integers(0, len(self.data.templates), size=n_label)

        pixels = np.empty((B,) + L.pixels.shape[1:])
        seqs: list[TokenSequence] = [None] * B  # type: ignore[list-item]
        labels = np.empty(B, dtype=np.int64)
        class_ids = np.empty(B, dtype=np.int64)
        slots_l = np.flatnonzero(is_label)
        slots_c = np.flatnonzero(~is_label)
        for k, (slot, i) in enumerate(zip(slots_l, li)):
            cid = int(L.class_ids[i])
            pixels[slot] = L.pixels[i]
            seqs[slot] = self._prompt_tokens[int(tmpl[k])][cid]
            labels[slot] = cid
            class_ids[slot] = cid
        for slot, i in zip(slots_c, ci):
            pixels[slot] = C.pixels[i]
            seqs[slot] = self._caption_tokens[int(i)]
            labels[slot] = self._n_classes + slot
            class_ids[slot] = C.class_ids[i]
        return Batch(pixels, tuple(seqs), labels, class_ids, is_label, rep_l or rep_c)


# ---------------------------------------------------------------------------
# dump / load: binary tensor file + CSV manifest
# ---------------------------------------------------------------------------


def dump_imageset(s: ImageSet, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / f"{s.name.replace('/', '_')}.pct", s.pixels)
    with open(d / f"{s.name.replace('/', '_')}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "source", "class_id", "domain_style", "text"])
        for i in range(len(s)):
            w.writerow([i, s.source, int(s.class_ids[i]), s.styles[i], s.texts[i]])


def load_imageset(name: str, directory: str | Path, vocab: Vocabulary | None = None, max_len: int = 32) -> ImageSet:
    d = Path(directory)
    stem = name.replace("/", "_")
    pixels = read_tensor(d / f"{stem}.pct")
    cids, texts, styles, sources = [], [], [], set()
    with open(d / f"{stem}.csv", newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            cids.append(int(rec["class_id"]))
            texts.append(rec["text"])
            styles.append(rec["domain_style"])
            sources.add(rec["source"])
    if len(cids) != len(pixels):
        raise ValueError(f"manifest lists {len(cids)} rows but tensor holds {len(pixels)} images")
    if len(sources) > 1:
        raise ValueError("manifest mixes sources")
    s = ImageSet(name, sources.pop() if sources else "label", pixels, np.array(cids, dtype=np.int64), texts, styles)
    if vocab is not None and s.source == "caption":
        s.tokens = [tokenize(t, vocab, max_len) for t in s.texts]
    return s
