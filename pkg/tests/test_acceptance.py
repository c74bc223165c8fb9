"""Acceptance criteria, one test each.

Every test appends a single verdict line to the terminal summary, so a
plain ``pytest tests/test_acceptance.py`` shows which criteria hold. The
model-training criteria share one memoized grid per session.
"""

import math
import time

import numpy as np
import pytest

from conftest import gradcheck
from op_cases import OP_CASES
from prefixcond import experiments as ex
from prefixcond.datagen import planned_iterations
from prefixcond.objectives import clip_loss, unicl_loss
from prefixcond.text import PAD, Prefix, condition, tokenize
from prefixcond.trainer import TrainConfig, Trainer, build_data

pytestmark = pytest.mark.slow

SEEDS = 5

# reduced data for the mechanics and determinism checks
QUICK = dict(
    label_train_per_class=20,
    label_test_per_class=2,
    caption_train=320,
    caption_test=20,
    zeroshot_test_per_class=2,
    shifted_test_per_class=2,
    warmup_steps=10,
    log_every=1,
)


def verdict(log, n, ok, detail):
    line = f"[{n:>2}] {'PASS' if ok else 'FAIL'}  {detail}"
    log.append(line)
    print(line)
    return ok


@pytest.fixture(scope="session")
def grids():
    """Train each experiment's grid once; main goes first so its wall clock is honest."""
    out = {}
    for name in ("main", "prefix", "name-shift", "retrieval", "sampling"):
        t0 = time.perf_counter()
        table, results = ex.run_experiment(name, SEEDS, workers=ex.default_workers())
        out[name] = (table, results, time.perf_counter() - t0)
    return out


def _gap(table, col, a, b):
    ca, cb = table.cells[(a, col)], table.cells[(b, col)]
    return ca.mean - cb.mean, ex.pooled_std(ca, cb)


def test_c01_gradient_oracle(acceptance_log):
    t0 = time.perf_counter()
    worst = {}
    for name, case in OP_CASES.items():
        worst[name] = max(gradcheck(fn, *inp) for inp, fn in (case(np.random.default_rng([t, 77])) for t in range(20)))
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and elapsed < 30.0 and {"clip_loss", "unicl_loss"} <= set(worst)
    detail = f"gradient oracle: {len(worst)} ops x 20 trials, worst {top} {worst[top]:.1e}, {elapsed:.1f}s"
    assert verdict(acceptance_log, 1, ok, detail)


def reference_clip(u, v, tau):
    """Plain numpy symmetric cross-entropy with diagonal targets."""
    s = tau * u @ v.T
    rows = np.log(np.exp(s - s.max(1, keepdims=True)).sum(1)) + s.max(1) - np.diag(s)
    cols = np.log(np.exp(s - s.max(0, keepdims=True)).sum(0)) + s.max(0) - np.diag(s)
    return rows.mean() + cols.mean()


def test_c02_loss_identities(acceptance_log):
    ident = []
    for b in (2, 4, 8):
        u = np.tile(np.random.default_rng(b).normal(size=(1, 6)), (b, 1))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        ident.append(abs(float(clip_loss(u, u, 14.0).data) - 2 * math.log(b)))
    rng = np.random.default_rng(2024)
    diffs = []
    for _ in range(100):
        b = int(rng.integers(2, 17))
        u, v = rng.normal(size=(b, 8)), rng.normal(size=(b, 8))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        tau = float(rng.uniform(1.0, 50.0))
        labels = rng.permutation(1000)[:b].tolist()
        uni = float(unicl_loss(u, v, labels, tau).data)
        diffs.append(max(abs(uni - float(clip_loss(u, v, tau).data)), abs(uni - reference_clip(u, v, tau))))
    ok = max(ident) < 1e-9 and max(diffs) < 1e-12
    detail = f"loss identities: |clip - 2 ln B| max {max(ident):.1e}; |unicl - clip| max {max(diffs):.1e} over 100 batches (library and numpy reference)"
    assert verdict(acceptance_log, 2, ok, detail)


def _trace_checks(model, texts, vocab):
    """PAD invariance and attention-row sums over every captured trace."""
    pad_err, row_err = 0.0, 0.0
    partner = condition(tokenize(" ".join(["a"] * 28), vocab), Prefix.CAPTION)
    for text in texts:
        for p in (Prefix.PROMPT, Prefix.CAPTION):
            seq = condition(tokenize(text, vocab), p)
            alone = model.text_features([seq])
            padded = model.text_features([seq, partner])[:1]
            pad_err = max(pad_err, float(np.abs(alone - padded).max()))
            _, trace = model.encode_text([seq, partner], capture_attention=True)
            real = trace.ids != PAD
            for att in trace.layers:
                sums = att.sum(axis=-1)
                q = np.broadcast_to(real[:, None, :], sums.shape)
                row_err = max(row_err, float(np.abs(sums[q] - 1.0).max()))
                assert (att[np.broadcast_to(~real[:, None, None, :], att.shape)] == 0.0).all()
    return pad_err, row_err


def test_c03_prefix_mechanics(acceptance_log):
    cfg = TrainConfig(**QUICK, max_steps=100)
    data = build_data(cfg)
    off = Trainer(cfg.replace(prefix_mode=False), data)
    off.run()
    on = Trainer(cfg, data)
    on.run()
    texts = data.caption_test.texts[:10] + data.label_test.texts[:10]
    pad_err, row_err = _trace_checks(on.model, texts, data.vocab)
    ok = (off.prefix_grad_sum == 0).all() and (on.prefix_grad_sum > 0).all() and pad_err <= 1e-12 and row_err <= 1e-9
    detail = (
        f"prefix mechanics: off-run grad {off.prefix_grad_sum.tolist()}, on-run grad "
        f"[{on.prefix_grad_sum[0]:.2e}, {on.prefix_grad_sum[1]:.2e}] after {on.step} steps; "
        f"PAD err {pad_err:.1e}, row-sum err {row_err:.1e}"
    )
    assert verdict(acceptance_log, 3, ok, detail)


def test_c04_main_reproduction(grids, acceptance_log):
    table, _, seconds = grids["main"]
    parts, ok = [], seconds < 600.0
    for obj in ("CLIP", "UniCL"):
        gap, sd = _gap(table, "zero-shot-acc", f"{obj} +prefix [ES]", f"{obj} no-prefix [ES]")
        ok &= gap > sd
        parts.append(f"{obj} gap {gap:+.3f} vs pooled std {sd:.3f}")
    detail = f"main reproduction: {'; '.join(parts)}; {SEEDS} seeds in {seconds:.0f}s"
    assert verdict(acceptance_log, 4, ok, detail)


def test_c05_test_time_prefix(grids, acceptance_log):
    table, _, _ = grids["prefix"]
    row = "CLIP +prefix [ES]"
    m = {c: table.mean(row, c) for c in table.columns}
    ok = (
        m["zs/caption"] > m["zs/prompt"]
        and m["shifted/caption"] > m["shifted/prompt"]
        and m["seen/prompt"] >= m["seen/caption"] - 0.02
    )
    detail = (
        f"test-time prefix: zero-shot caption {m['zs/caption']:.3f} vs prompt {m['zs/prompt']:.3f}; "
        f"shifted caption {m['shifted/caption']:.3f} vs prompt {m['shifted/prompt']:.3f}; "
        f"seen prompt {m['seen/prompt']:.3f} vs caption {m['seen/caption']:.3f}"
    )
    assert verdict(acceptance_log, 5, ok, detail)


def test_c06_sampling_ablation(grids, acceptance_log):
    table, _, _ = grids["sampling"]
    print(table.render())
    ok, parts = True, []
    for s in ("DS", "ES"):
        conv = all(table.mean(f"CLIP {p} [{s}]", "converged") == 1.0 for p in ("+prefix", "no-prefix"))
        gap = table.mean(f"CLIP +prefix [{s}]", "zero-shot-acc") - table.mean(f"CLIP no-prefix [{s}]", "zero-shot-acc")
        ok &= conv and gap > 0
        parts.append(f"{s} converged={conv} prefix gain {gap:+.3f}")
    assert verdict(acceptance_log, 6, ok, "sampling ablation: " + "; ".join(parts))


def test_c07_class_name_shift(grids, acceptance_log):
    table, _, _ = grids["name-shift"]
    row = "CLIP +prefix [ES]"
    p, c = table.mean(row, "prompt-degradation"), table.mean(row, "caption-degradation")
    assert verdict(acceptance_log, 7, p > c, f"class-name shift: prompt degradation {p:.3f} vs caption {c:.3f}")


def test_c08_retrieval(grids, acceptance_log):
    table, results, _ = grids["retrieval"]
    monotone = all(
        r.metrics[f"{d}/R@1"] <= r.metrics[f"{d}/R@5"] <= r.metrics[f"{d}/R@10"] for r in results for d in ("i2t", "t2i")
    )
    ok, parts = monotone, []
    for col in ("i2t R@1", "t2i R@1"):
        a, b = table.mean("CLIP +prefix [ES]", col), table.mean("CLIP no-prefix [ES]", col)
        ok &= a >= b
        parts.append(f"{col} {a:.3f} vs {b:.3f}")
    assert verdict(acceptance_log, 8, ok, f"retrieval: {'; '.join(parts)}; monotone in K={monotone}")


def test_c09_determinism(tmp_path, acceptance_log):
    cfg = TrainConfig(**QUICK, max_steps=40, strategy="ES")
    blobs = []
    for name in ("a", "b"):
        t = Trainer(cfg, build_data(cfg))
        t.run()
        t.log.to_jsonl(tmp_path / f"{name}.jsonl")
        t.save(tmp_path / f"{name}.ckpt")
        blobs.append(((tmp_path / f"{name}.jsonl").read_bytes(), (tmp_path / f"{name}.ckpt").read_bytes()))
    ok = blobs[0] == blobs[1]
    assert verdict(acceptance_log, 9, ok, f"determinism: logs and checkpoints bitwise equal={ok}")


def test_c10_epoch_accounting(acceptance_log):
    got = planned_iterations(1_024_000, 1024, 15)
    assert verdict(acceptance_log, 10, got == 30_000, f"epoch accounting: planned_iterations = {got}")


def test_probe_and_prefix_separation(grids, acceptance_log):
    """Side checks beyond the numbered list: probe parity and prefix clustering."""
    _, results, _ = grids["main"]

    def mean(obj, pm, key):
        return float(np.mean([r.metrics[key] for r in results if r.variant == ex.Variant(obj, pm)]))

    probe_gap = mean("clip", True, "probe_acc") - mean("clip", False, "probe_acc")
    sep_on, sep_off = mean("clip", True, "prefix_silhouette"), mean("clip", False, "prefix_silhouette")
    ok = abs(probe_gap) < 0.05 and sep_on > sep_off
    detail = f"probe gap {probe_gap:+.3f}, prefix silhouette {sep_on:.3f} vs {sep_off:.3f}"
    acceptance_log.append(f"[--] {'PASS' if ok else 'FAIL'}  extra: {detail}")
    assert ok, detail
