"""Evaluation battery over frozen dual-encoder models."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import ClassCatalog, ImageSet, PromptTemplateSet, build_prompts
from .model import DualEncoderModel
from .text import Prefix, condition, end_token_attention, tokenize, write_attention_csv


class SuiteMismatchError(ValueError):
    """The requested evaluation does not apply to this model."""


class ReportError(ValueError):
    pass


@dataclass
class EvalReport:
    metrics: dict[str, float]
    config_hash: str = ""
    split: str = ""
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        for k, v in self.metrics.items():
            if ("acc" in k or k.startswith("R@") or "/R@" in k) and not 0.0 <= v <= 1.0:
                raise ReportError(f"metric {k}={v} outside [0, 1]")
        _check_recall_monotone(self.metrics)

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "config_hash": self.config_hash,
            "split": self.split,
            "per_class": self.per_class,
            "notes": self.notes,
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["metrics"], d.get("config_hash", ""), d.get("split", ""), d.get("per_class", {}), d.get("notes", []))


def _check_recall_monotone(metrics: dict[str, float]) -> None:
    groups: dict[str, list[tuple[int, float]]] = {}
    for k, v in metrics.items():
        if "R@" in k:
            head, _, kk = k.rpartition("R@")
            groups.setdefault(head, []).append((int(kk), v))
    for head, pts in groups.items():
        vals = [v for _, v in sorted(pts)]
        if any(b < a for a, b in zip(vals, vals[1:])):
            raise ReportError(f"recall not monotone in K for {head!r}: {sorted(pts)}")


# ---------------------------------------------------------------------------
# class embedding banks and zero-shot classification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassEmbeddingBank:
    """One unit vector per class: normalize, average over templates, renormalize."""

    rows: np.ndarray  # (K, d)
    class_ids: tuple[int, ...]
    prefix: Prefix | None

    def __post_init__(self):
        if self.rows.ndim != 2 or len(self.class_ids) != self.rows.shape[0]:
            raise ValueError("bank rows and class ids disagree")

    @staticmethod
    def from_template_embeddings(per_class: Sequence[np.ndarray], class_ids, prefix=None) -> "ClassEmbeddingBank":
        rows = []
        for emb in per_class:
            e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
            m = e.mean(axis=0)
            rows.append(m / np.linalg.norm(m))
        return ClassEmbeddingBank(np.stack(rows), tuple(int(c) for c in class_ids), prefix)

    @classmethod
    def build(
        cls,
        model: DualEncoderModel,
        catalog: ClassCatalog,
        templates: PromptTemplateSet,
        prefix: Prefix | None,
        class_ids: Sequence[int] | None = None,
        use_synonyms: bool = False,
        max_len: int = 32,
    ) -> "ClassEmbeddingBank":
        ids = list(range(len(catalog))) if class_ids is None else list(class_ids)
        prompts = build_prompts(catalog, templates, use_synonyms)
        seqs = [condition(tokenize(p, model.vocab, max_len), prefix) for cid in ids for p in prompts[cid]]
        feats = model.text_features(seqs)
        T = len(templates)
        per_class = [feats[k * T : (k + 1) * T] for k in range(len(ids))]
        return cls.from_template_embeddings(per_class, ids, prefix)


def predict(bank: ClassEmbeddingBank, image_features: np.ndarray) -> np.ndarray:
    """Class id per image; ties resolve to the lowest bank index."""
    if image_features.shape[1] != bank.rows.shape[1]:
        raise ValueError(f"image feature dim {image_features.shape[1]} != bank dim {bank.rows.shape[1]}")
    feats = image_features / np.linalg.norm(image_features, axis=1, keepdims=True)
    sims = feats @ bank.rows.T
    return np.asarray(bank.class_ids)[np.argmax(sims, axis=1)]


def accuracy_report(pred, truth, name: str, config_hash: str, split: str) -> EvalReport:
    truth = np.asarray(truth)
    per = {}
    for c in np.unique(truth):
        sel = truth == c
        per[str(int(c))] = {name: float((pred[sel] == c).mean())}
    acc = float((pred == truth).mean()) if len(truth) else 0.0
    return EvalReport({name: acc}, config_hash, split, per)


def zero_shot_classify(
    model: DualEncoderModel, bank: ClassEmbeddingBank, images: ImageSet | np.ndarray, labels=None
) -> EvalReport:
    if isinstance(images, ImageSet):
        pixels, labels, split = images.pixels, images.class_ids, images.name
    else:
        pixels, split = images, ""
        if labels is None:
            raise ValueError("labels are required with raw pixel arrays")
    feats = model.image_features(pixels)
    pred = predict(bank, feats)
    return accuracy_report(pred, labels, "top1_acc", model.meta.get("config_hash", ""), split)


def test_time_prefix_sweep(
    model: DualEncoderModel,
    images: ImageSet,
    catalog: ClassCatalog,
    templates: PromptTemplateSet,
    class_ids: Sequence[int] | None = None,
) -> EvalReport:
    """Zero-shot accuracy under the Prompt and Caption test-time prefixes."""
    if not model.trained_with_prefix:
        raise SuiteMismatchError(
            "model was trained without prefixes; use zero-shot classification with prefix=None instead"
        )
    feats = model.image_features(images.pixels)
    metrics, per = {}, {}
    for p in (Prefix.PROMPT, Prefix.CAPTION):
        bank = ClassEmbeddingBank.build(model, catalog, templates, p, class_ids)
        r = accuracy_report(predict(bank, feats), images.class_ids, "acc", "", images.name)
        metrics[f"{p.value}/acc"] = r.metrics["acc"]
        per[p.value] = {k: v["acc"] for k, v in r.per_class.items()}
    metrics["caption_minus_prompt"] = metrics["caption/acc"] - metrics["prompt/acc"]
    return EvalReport(metrics, model.meta.get("config_hash", ""), images.name, per)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------


def _fit_logreg(X, y, K, lam, steps=300, lr=None):
    n, d = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    W = np.zeros((d + 1, K))
    Y = np.eye(K)[y]
    if lr is None:
        # step size from the smoothness bound of softmax cross-entropy
        lr = 1.0 / (0.5 * np.linalg.norm(Xb, 2) ** 2 / n + lam)
    for _ in range(steps):
        Z = Xb @ W
        Z -= Z.max(axis=1, keepdims=True)
        P = np.exp(Z)
        P /= P.sum(axis=1, keepdims=True)
        G = Xb.T @ (P - Y) / n
        G[:-1] += lam * W[:-1]
        W -= lr * G
    return W


def _logreg_predict(W, X):
    Xb = np.hstack([X, np.ones((len(X), 1))])
    return np.argmax(Xb @ W, axis=1)


def linear_probe(
    train_features: np.ndarray,
    train_labels,
    test_features: np.ndarray,
    test_labels,
    lambdas: Sequence[float] = (1e-4, 1e-2, 1.0),
    val_fraction: float = 0.2,
    steps: int = 300,
    seed: int = 0,
) -> EvalReport:
    """Multinomial logistic regression on frozen features, L2 strength picked on a validation fold."""
    y_tr = np.asarray(train_labels)
    classes = np.unique(y_tr)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes")
    remap = {int(c): i for i, c in enumerate(classes)}
    yi = np.array([remap[int(c)] for c in y_tr])
    K = len(classes)
    mu = train_features.mean(axis=0)
    sd = train_features.std(axis=0) + 1e-8
    Xtr = (train_features - mu) / sd
    Xte = (test_features - mu) / sd

    perm = np.random.default_rng(seed).permutation(len(yi))
    n_val = max(1, int(round(val_fraction * len(yi))))
    val, fit = perm[:n_val], perm[n_val:]
    val_acc = {}
    for lam in lambdas:
        W = _fit_logreg(Xtr[fit], yi[fit], K, lam, steps)
        val_acc[lam] = float((_logreg_predict(W, Xtr[val]) == yi[val]).mean())
    best = max(lambdas, key=lambda l: (val_acc[l], l))
    W = _fit_logreg(Xtr, yi, K, best, steps)
    train_acc = float((_logreg_predict(W, Xtr) == yi).mean())
    pred = classes[_logreg_predict(W, Xte)]
    y_te = np.asarray(test_labels)
    metrics = {"test_acc": float((pred == y_te).mean()), "train_acc": train_acc, "lambda": float(best)}
    for lam in lambdas:
        metrics[f"val_acc@{lam:g}"] = val_acc[lam]
    return EvalReport(metrics, split="linear-probe")


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


def recall_at_k(sim: np.ndarray, ks: Sequence[int] = (1, 5, 10)) -> dict[str, float]:
    """Both directions; ground truth is the diagonal. Ties rank the true item last."""
    n = sim.shape[0]
    if sim.shape != (n, n):
        raise ValueError("similarity matrix must be square")
    if n < max(ks):
        raise ValueError(f"need at least {max(ks)} pairs, got {n}")
    out = {}
    for name, M in (("i2t", sim), ("t2i", sim.T)):
        diag = np.diag(M)
        rank = (M >= diag[:, None]).sum(axis=1) - 1  # others scoring at least as high
        for k in ks:
            out[f"{name}/R@{k}"] = float((rank < k).mean())
    return out


def retrieval_eval(
    model: DualEncoderModel, pairs: ImageSet, ks: Sequence[int] = (1, 5, 10), prefix: Prefix | None | str = "auto"
) -> EvalReport:
    if prefix == "auto":
        prefix = Prefix.CAPTION if model.trained_with_prefix else None
    notes = []
    seen: dict[str, int] = {}
    dups = 0
    for t in pairs.texts:
        seen[t] = seen.get(t, 0) + 1
    dups = sum(c - 1 for c in seen.values() if c > 1)
    if dups:
        notes.append(f"{dups} duplicate captions: ground truth is ambiguous for them")
    seqs = [condition(s, prefix) for s in (pairs.tokens or [tokenize(t, model.vocab) for t in pairs.texts])]
    T = model.text_features(seqs)
    V = model.image_features(pairs.pixels)
    m = recall_at_k(V @ T.T, ks)
    m["duplicate_captions"] = float(dups)
    return EvalReport(m, model.meta.get("config_hash", ""), pairs.name, notes=notes)


# ---------------------------------------------------------------------------
# class-name shift
# ---------------------------------------------------------------------------


def class_name_shift_eval(
    model: DualEncoderModel,
    catalog: ClassCatalog,
    images: ImageSet,
    templates: PromptTemplateSet,
    class_ids: Sequence[int] | None = None,
) -> EvalReport:
    """Accuracy with canonical names vs synonyms, per test-time prefix."""
    prefixes = [Prefix.PROMPT, Prefix.CAPTION] if model.trained_with_prefix else [None]
    feats = model.image_features(images.pixels)
    metrics = {}
    for p in prefixes:
        tag = p.value if p else "none"
        for syn in (False, True):
            bank = ClassEmbeddingBank.build(model, catalog, templates, p, class_ids, use_synonyms=syn)
            acc = float((predict(bank, feats) == images.class_ids).mean())
            metrics[f"{tag}/{'synonym' if syn else 'canonical'}_acc"] = acc
        metrics[f"{tag}/degradation"] = metrics[f"{tag}/canonical_acc"] - metrics[f"{tag}/synonym_acc"]
    return EvalReport(metrics, model.meta.get("config_hash", ""), images.name)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def pca_2d(X: np.ndarray) -> np.ndarray:
    if len(X) < 3:
        raise ValueError("PCA projection needs at least 3 samples")
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    Z = Xc @ vt[:2].T
    if Z.shape[1] < 2:
        Z = np.hstack([Z, np.zeros((len(Z), 2 - Z.shape[1]))])
    return Z - Z.mean(axis=0)


@dataclass
class FeatureRow:
    sample_id: str
    source: str
    class_id: int
    prefix: str


def export_features(rows: Sequence[FeatureRow], features: np.ndarray, path: str | Path) -> np.ndarray:
    """Write features plus their 2-D PCA coordinates; returns the coordinates."""
    if len(rows) != len(features):
        raise ValueError("one metadata row per feature vector is required")
    coords = pca_2d(features)
    d = features.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "source", "class_id", "prefix"] + [f"f{i}" for i in range(d)] + ["pca_x", "pca_y"])
        for r, f, c in zip(rows, features, coords):
            w.writerow([r.sample_id, r.source, r.class_id, r.prefix] + [repr(float(v)) for v in f] + [repr(float(c[0])), repr(float(c[1]))])
    return coords


def read_features(path: str | Path) -> tuple[list[FeatureRow], np.ndarray, np.ndarray]:
    rows, feats, coords = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = len(header) - 6
        for rec in reader:
            rows.append(FeatureRow(rec[0], rec[1], int(rec[2]), rec[3]))
            feats.append([float(v) for v in rec[4 : 4 + d]])
            coords.append([float(rec[-2]), float(rec[-1])])
    return rows, np.array(feats), np.array(coords)


def text_feature_rows(model: DualEncoderModel, texts: Sequence[str], prefix: Prefix | None, source: str, class_ids=None):
    seqs = [condition(tokenize(t, model.vocab), prefix) for t in texts]
    feats = model.text_features(seqs)
    tag = prefix.value if prefix else "none"
    cids = class_ids if class_ids is not None else [-1] * len(texts)
    rows = [FeatureRow(f"{source}-{i}", source, int(c), tag) for i, c in enumerate(cids)]
    return rows, feats


def silhouette(X: np.ndarray, labels) -> float:
    """Mean silhouette coefficient under cosine distance."""
    labels = np.asarray(labels)
    Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    D = 1.0 - Xn @ Xn.T
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("silhouette needs two clusters")
    s = np.zeros(len(X))
    for i in range(len(X)):
        own = labels == labels[i]
        n_own = own.sum() - 1
        a = D[i, own].sum() / n_own if n_own > 0 else 0.0
        b = min(D[i, labels == u].mean() for u in uniq if u != labels[i])
        s[i] = 0.0 if n_own == 0 else (b - a) / max(a, b, 1e-12)
    return float(s.mean())


def prefix_separation(model: DualEncoderModel, texts: Sequence[str]) -> float:
    """Silhouette of Prompt- vs Caption-prefixed embeddings of the same sentences.

    For an unconditioned model both copies are identical inputs, so the
    split carries no signal and the score is that of a random bipartition.
    """
    a = condition if model.trained_with_prefix else (lambda s, p: s)
    seqs = [tokenize(t, model.vocab) for t in texts]
    fp = model.text_features([a(s, Prefix.PROMPT) for s in seqs])
    fc = model.text_features([a(s, Prefix.CAPTION) for s in seqs])
    return silhouette(np.vstack([fp, fc]), [0] * len(texts) + [1] * len(texts))


def export_attention(model: DualEncoderModel, sentence: str, path: str | Path) -> list:
    """End-token attention tables for the sentence under each applicable prefix."""
    prefixes = [Prefix.PROMPT, Prefix.CAPTION] if model.trained_with_prefix else [None]
    tables = []
    for k, p in enumerate(prefixes):
        seq = condition(tokenize(sentence, model.vocab), p)
        _, trace = model.encode_text([seq], capture_attention=True)
        table = end_token_attention(trace, model.vocab, 0)
        write_attention_csv(path, table, p.value if p else "none", append=k > 0)
        tables.append((p, table))
    return tables
