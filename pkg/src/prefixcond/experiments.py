"""Seed-replicated comparison grids over trained variants.

Every (variant, seed) pair is trained once per process and memoized, so
experiments that share variants reuse the same models. Each trained model
gets the full metric set; experiments only choose which rows and columns
to tabulate.
"""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datagen import SyntheticData
from .evalsuite import (
    ClassEmbeddingBank,
    class_name_shift_eval,
    linear_probe,
    predict,
    prefix_separation,
    retrieval_eval,
)
from .model import DualEncoderModel
from .text import Prefix
from .trainer import TrainConfig, Trainer, build_data

# Sampling strategy for every experiment except the sampling ablation.
MAIN_STRATEGY = "ES"


@dataclass(frozen=True)
class Variant:
    objective: str
    prefix_mode: bool
    strategy: str = MAIN_STRATEGY

    @property
    def name(self) -> str:
        obj = "CLIP" if self.objective == "clip" else "UniCL"
        return f"{obj} {'+prefix' if self.prefix_mode else 'no-prefix'} [{self.strategy}]"

    def config(self, base: TrainConfig, seed: int) -> TrainConfig:
        return base.replace(objective=self.objective, prefix_mode=self.prefix_mode, strategy=self.strategy, seed=seed)


EXPERIMENTS: dict[str, tuple[Variant, ...]] = {
    "main": (
        Variant("clip", True),
        Variant("clip", False),
        Variant("unicl", True),
        Variant("unicl", False),
    ),
    "sampling": tuple(Variant("clip", p, s) for s in ("DS", "ES") for p in (True, False)),
    "prefix": (Variant("clip", True),),
    "name-shift": (Variant("clip", True), Variant("clip", False)),
    "retrieval": (Variant("clip", True), Variant("clip", False)),
}

# DS spends half its batches on each source and its caption side converges
# slowly at this scale, so the sampling grid trains both arms twice as long.
EPOCH_SCALE: dict[str, int] = {"sampling": 2}

# (column label, metric key) per experiment
COLUMNS: dict[str, tuple[tuple[str, str], ...]] = {
    "main": (("seen-acc", "seen_acc"), ("zero-shot-acc", "zeroshot_acc")),
    "sampling": (
        ("converged", "converged"),
        ("loss-ratio", "loss_ratio"),
        ("seen-acc", "seen_acc"),
        ("zero-shot-acc", "zeroshot_acc"),
    ),
    "prefix": (
        ("zs/prompt", "zeroshot/prompt"),
        ("zs/caption", "zeroshot/caption"),
        ("shifted/prompt", "shifted/prompt"),
        ("shifted/caption", "shifted/caption"),
        ("shifted-label/prompt", "shifted_label/prompt"),
        ("shifted-label/caption", "shifted_label/caption"),
        ("seen/prompt", "seen/prompt"),
        ("seen/caption", "seen/caption"),
    ),
    "name-shift": (
        ("prompt-degradation", "prompt/degradation"),
        ("caption-degradation", "caption/degradation"),
        ("none-degradation", "none/degradation"),
    ),
    "retrieval": (
        ("i2t R@1", "i2t/R@1"),
        ("i2t R@5", "i2t/R@5"),
        ("i2t R@10", "i2t/R@10"),
        ("t2i R@1", "t2i/R@1"),
        ("t2i R@5", "t2i/R@5"),
        ("t2i R@10", "t2i/R@10"),
    ),
}


# ---------------------------------------------------------------------------
# evaluation of one trained model
# ---------------------------------------------------------------------------


def _bank_accuracy(model, data: SyntheticData, feats, labels, prefix, class_ids) -> float:
    bank = ClassEmbeddingBank.build(model, data.catalog, data.templates, prefix, class_ids)
    return float((predict(bank, feats) == labels).mean())


def convergence(losses: Sequence[float], batch_size: int) -> tuple[float, bool]:
    """Ratio of the late-training loss to the chance-level loss, and whether it fell below 0.75."""
    tail = losses[-max(1, len(losses) // 10) :]
    ratio = float(np.mean(tail)) / (2.0 * math.log(batch_size))
    return ratio, ratio < 0.75


def evaluate_model(model: DualEncoderModel, data: SyntheticData, probe: bool = True) -> dict[str, float]:
    """Full metric set for one model.

    Zero-shot accuracy is measured on caption-only-class images with every
    catalog class as a candidate. A prefix model reads seen-class label
    images through its Prompt bank and everything else through its Caption
    bank; an unconditioned model has a single bank.
    """
    cat = data.catalog
    prefixes = [Prefix.PROMPT, Prefix.CAPTION] if model.trained_with_prefix else [None]
    splits = {
        "zeroshot": (data.zeroshot_test, None),
        "zeroshot_unseen_only": (data.zeroshot_test, cat.caption_only_ids),
        "seen": (data.label_test, cat.seen_ids),
        "shifted": (data.shifted_test, cat.seen_ids),
        "shifted_label": (data.shifted_label_test, cat.seen_ids),
    }
    out: dict[str, float] = {}
    for split, (images, ids) in splits.items():
        feats = model.image_features(images.pixels)
        for p in prefixes:
            tag = p.value if p else "none"
            out[f"{split}/{tag}"] = _bank_accuracy(model, data, feats, images.class_ids, p, ids)
    seen_tag, other_tag = ("prompt", "caption") if model.trained_with_prefix else ("none", "none")
    out["seen_acc"] = out[f"seen/{seen_tag}"]
    out["zeroshot_acc"] = out[f"zeroshot/{other_tag}"]
    out["shifted_acc"] = out[f"shifted/{other_tag}"]

    out.update(retrieval_eval(model, data.caption_test).metrics)
    names = class_name_shift_eval(model, cat, data.label_test, data.templates, cat.seen_ids).metrics
    out.update(names)

    if probe:
        tr = model.image_features(data.label_train.pixels, normalize=False)
        te = model.image_features(data.label_test.pixels, normalize=False)
        out["probe_acc"] = linear_probe(tr, data.label_train.class_ids, te, data.label_test.class_ids).metrics["test_acc"]
        sents = data.caption_test.texts[:40] + [t for t in data.label_test.texts[:40]]
        out["prefix_silhouette"] = prefix_separation(model, sents)
    return out


# ---------------------------------------------------------------------------
# training runs
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    variant: Variant
    seed: int
    config_hash: str
    metrics: dict[str, float]
    seconds: float


_DATA_CACHE: dict[tuple, SyntheticData] = {}
_RUN_CACHE: dict[str, RunResult] = {}


def _data_for(cfg: TrainConfig) -> SyntheticData:
    key = cfg.data_key()
    if key not in _DATA_CACHE:
        _DATA_CACHE.clear()  # one seed's data at a time keeps memory flat
        _DATA_CACHE[key] = build_data(cfg)
    return _DATA_CACHE[key]


def run_one(variant: Variant, base: TrainConfig, seed: int, checkpoint_dir: str | Path | None = None) -> RunResult:
    cfg = variant.config(base, seed)
    h = cfg.config_hash()
    if h in _RUN_CACHE:
        return _RUN_CACHE[h]
    t0 = time.perf_counter()
    data = _data_for(cfg)
    trainer = Trainer(cfg, data)
    trainer.run()
    metrics = evaluate_model(trainer.model, data)
    losses = [r["loss"] for r in trainer.log.records]
    metrics["loss_ratio"], ok = convergence(losses, cfg.batch_size)
    metrics["converged"] = float(ok)
    if checkpoint_dir is not None:
        trainer.save(Path(checkpoint_dir) / f"{h}.ckpt")
    res = RunResult(variant, seed, h, metrics, time.perf_counter() - t0)
    _RUN_CACHE[h] = res
    return res


def _run_job(args):
    return run_one(*args)


def run_grid(
    variants: Iterable[Variant],
    seeds: Sequence[int],
    base: TrainConfig | None = None,
    workers: int = 1,
    checkpoint_dir: str | Path | None = None,
    progress=None,
) -> list[RunResult]:
    """Train and evaluate every (variant, seed), seed-major so data is generated once per seed."""
    base = base or TrainConfig()
    jobs = [(v, base, s, checkpoint_dir) for s in seeds for v in variants]
    if workers <= 1:
        out = []
        for job in jobs:
            r = run_one(*job)
            if progress:
                progress(r)
            out.append(r)
        return out
    todo = [j for j in jobs if j[0].config(base, j[2]).config_hash() not in _RUN_CACHE]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for r in pool.map(_run_job, todo):
            _RUN_CACHE[r.config_hash] = r
            if progress:
                progress(r)
    return [run_one(*j) for j in jobs]


# ---------------------------------------------------------------------------
# aggregation and output
# ---------------------------------------------------------------------------


@dataclass
class Cell:
    values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else 0.0


@dataclass
class ComparisonTable:
    experiment: str
    rows: list[str]
    columns: list[str]
    cells: dict[tuple[str, str], Cell]

    def mean(self, row: str, col: str) -> float:
        return self.cells[(row, col)].mean

    def std(self, row: str, col: str) -> float:
        return self.cells[(row, col)].std

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["experiment", "variant", "metric", "mean", "std", "n", "values"])
            for r in self.rows:
                for c in self.columns:
                    cell = self.cells.get((r, c))
                    if cell is None:
                        continue
                    vals = ";".join(repr(v) for v in cell.values)
                    w.writerow([self.experiment, r, c, repr(cell.mean), repr(cell.std), len(cell.values), vals])

    def render(self) -> str:
        width = max(len(r) for r in self.rows) + 2
        colw = max(16, max(len(c) for c in self.columns) + 2)
        lines = [f"{self.experiment}".upper(), " " * width + "".join(f"{c:>{colw}}" for c in self.columns)]
        for r in self.rows:
            parts = []
            for c in self.columns:
                cell = self.cells.get((r, c))
                parts.append(f"{'-':>{colw}}" if cell is None else f"{cell.mean:>{colw - 8}.3f} ± {cell.std:.3f}")
            lines.append(f"{r:<{width}}" + "".join(parts))
        return "\n".join(lines)


def tabulate(experiment: str, results: Sequence[RunResult]) -> ComparisonTable:
    cols = COLUMNS[experiment]
    rows: list[str] = []
    cells: dict[tuple[str, str], Cell] = {}
    for v in EXPERIMENTS[experiment]:
        rows.append(v.name)
        mine = [r for r in results if r.variant == v]
        for label, key in cols:
            vals = [r.metrics[key] for r in mine if key in r.metrics]
            if vals:
                cells[(v.name, label)] = Cell(vals)
    return ComparisonTable(experiment, rows, [c for c, _ in cols], cells)


def run_experiment(
    experiment: str,
    seeds: int | Sequence[int] = 5,
    base: TrainConfig | None = None,
    workers: int = 1,
    checkpoint_dir: str | Path | None = None,
    progress=None,
) -> tuple[ComparisonTable, list[RunResult]]:
    if experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {experiment!r}; choose from {sorted(EXPERIMENTS)}")
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    base = base or TrainConfig()
    if experiment in EPOCH_SCALE:
        base = base.replace(epochs=base.epochs * EPOCH_SCALE[experiment])
    results = run_grid(EXPERIMENTS[experiment], seed_list, base, workers, checkpoint_dir, progress)
    return tabulate(experiment, results), results


def pooled_std(a: Cell, b: Cell) -> float:
    return math.sqrt((a.std**2 + b.std**2) / 2.0)


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
