import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import silhouette_score

from prefixcond.datagen import ClassCatalog, DataSizes, PromptTemplateSet, default_vocabulary, generate_datasets
from prefixcond.evalsuite import (
    ClassEmbeddingBank,
    EvalReport,
    FeatureRow,
    ReportError,
    SuiteMismatchError,
    class_name_shift_eval,
    export_attention,
    export_features,
    linear_probe,
    pca_2d,
    predict,
    prefix_separation,
    read_features,
    recall_at_k,
    retrieval_eval,
    silhouette,
    test_time_prefix_sweep as prefix_sweep,
    zero_shot_classify,
)
from prefixcond.model import DualEncoderModel
from prefixcond.numerics import make_rng


@pytest.fixture(scope="module")
def data():
    return generate_datasets(sizes=DataSizes(10, 3, 40, 20, 3, 3), seed=0)


@pytest.fixture(scope="module")
def prefix_model():
    return DualEncoderModel.create(make_rng(0, "init"), default_vocabulary(), trained_with_prefix=True)


@pytest.fixture(scope="module")
def plain_model():
    return DualEncoderModel.create(make_rng(0, "init"), default_vocabulary(), trained_with_prefix=False)


# -- banks and zero-shot ------------------------------------------------------


def test_basis_bank_predicts_matching_axis():
    bank = ClassEmbeddingBank(np.eye(4), (0, 1, 2, 3), None)
    assert predict(bank, np.array([[0.0, 0.0, 1.0, 0.0]]))[0] == 2


def test_ties_go_to_lowest_class():
    bank = ClassEmbeddingBank(np.tile([[1.0, 0.0]], (3, 1)), (0, 1, 2), None)
    assert predict(bank, np.array([[1.0, 0.0], [0.0, 1.0]])).tolist() == [0, 0]


def test_dimension_mismatch():
    bank = ClassEmbeddingBank(np.eye(3), (0, 1, 2), None)
    with pytest.raises(ValueError, match="dim"):
        predict(bank, np.ones((2, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bank_invariant_to_template_order(seed):
    rng = np.random.default_rng(seed)
    per_class = [rng.normal(size=(8, 5)) * rng.uniform(0.1, 10, size=(8, 1)) for _ in range(4)]
    a = ClassEmbeddingBank.from_template_embeddings(per_class, range(4))
    b = ClassEmbeddingBank.from_template_embeddings([e[rng.permutation(8)] for e in per_class], range(4))
    np.testing.assert_allclose(a.rows, b.rows, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(a.rows, axis=1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_prediction_invariant_to_positive_rescaling(seed, scale):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(6, 5))
    bank = ClassEmbeddingBank(rows / np.linalg.norm(rows, axis=1, keepdims=True), tuple(range(6)), None)
    feats = rng.normal(size=(20, 5))
    per_row = rng.uniform(0.1, 10, size=(20, 1))
    np.testing.assert_array_equal(predict(bank, feats), predict(bank, feats * scale * per_row))


def test_built_bank_shape(prefix_model, data):
    from prefixcond.text import Prefix

    bank = ClassEmbeddingBank.build(prefix_model, data.catalog, data.templates, Prefix.CAPTION)
    assert bank.rows.shape == (24, prefix_model.embed_dim)
    np.testing.assert_allclose(np.linalg.norm(bank.rows, axis=1), 1.0, atol=1e-12)


def test_zero_shot_report(prefix_model, data):
    from prefixcond.text import Prefix

    bank = ClassEmbeddingBank.build(prefix_model, data.catalog, data.templates, Prefix.CAPTION)
    rep = zero_shot_classify(prefix_model, bank, data.label_test)
    assert 0.0 <= rep.metrics["top1_acc"] <= 1.0
    assert set(rep.per_class) == {str(c) for c in data.catalog.seen_ids}


def test_sweep_refuses_unconditioned_model(plain_model, data):
    with pytest.raises(SuiteMismatchError, match="prefix=None"):
        prefix_sweep(plain_model, data.label_test, data.catalog, data.templates)


def test_sweep_reports_both_prefixes(prefix_model, data):
    rep = prefix_sweep(prefix_model, data.label_test, data.catalog, data.templates)
    gap = rep.metrics["caption/acc"] - rep.metrics["prompt/acc"]
    assert rep.metrics["caption_minus_prompt"] == pytest.approx(gap)


# -- reports ------------------------------------------------------------------


def test_report_rejects_out_of_range_accuracy():
    with pytest.raises(ReportError):
        EvalReport({"top1_acc": 1.2})


def test_report_rejects_non_monotone_recall():
    with pytest.raises(ReportError, match="monotone"):
        EvalReport({"i2t/R@1": 0.5, "i2t/R@5": 0.4})


def test_report_json_round_trip(tmp_path):
    rep = EvalReport({"acc": 0.5, "i2t/R@1": 0.1, "i2t/R@5": 0.3}, "abc", "split", {"0": {"acc": 1.0}}, ["n"])
    rep.to_json(tmp_path / "r.json")
    back = EvalReport.from_json(tmp_path / "r.json")
    assert back.to_dict() == rep.to_dict()


# -- retrieval ----------------------------------------------------------------


def test_identity_similarity_full_recall():
    r = recall_at_k(np.eye(10), (1, 5, 10))
    assert r["i2t/R@1"] == 1.0 and r["t2i/R@1"] == 1.0


def test_reversed_identity():
    r = recall_at_k(np.fliplr(np.eye(10)), (1, 5, 10))
    assert r["i2t/R@1"] == 0.0 and r["t2i/R@1"] == 0.0
    assert r["i2t/R@10"] == 1.0 and r["t2i/R@10"] == 1.0


def test_recall_ties_count_against_truth():
    assert recall_at_k(np.ones((10, 10)), (1, 10))["i2t/R@1"] == 0.0


def test_recall_needs_enough_pairs():
    with pytest.raises(ValueError):
        recall_at_k(np.eye(4), (1, 5))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_recall_monotone_on_random_scores(seed):
    r = recall_at_k(np.random.default_rng(seed).normal(size=(12, 12)), (1, 2, 5, 10))
    EvalReport(r)  # constructor enforces monotonicity
    for d in ("i2t", "t2i"):
        vals = [r[f"{d}/R@{k}"] for k in (1, 2, 5, 10)]
        assert vals == sorted(vals)


def test_retrieval_flags_duplicates(plain_model, data):
    pairs = data.caption_test
    rep = retrieval_eval(plain_model, pairs)
    assert rep.metrics["duplicate_captions"] == 0 and not rep.notes
    dup = type(pairs)(pairs.name, pairs.source, pairs.pixels, pairs.class_ids, [pairs.texts[0]] + pairs.texts[:-1], pairs.styles)
    rep = retrieval_eval(plain_model, dup)
    assert rep.metrics["duplicate_captions"] == 1 and "duplicate" in rep.notes[0]


# -- class-name shift ---------------------------------------------------------


def test_identity_synonyms_zero_degradation(prefix_model, data):
    cat = data.catalog.with_identity_synonyms()
    rep = class_name_shift_eval(prefix_model, cat, data.label_test, data.templates, cat.seen_ids)
    assert rep.metrics["prompt/degradation"] == 0.0 and rep.metrics["caption/degradation"] == 0.0


def test_name_shift_unconditioned_uses_none(plain_model, data):
    rep = class_name_shift_eval(plain_model, data.catalog, data.label_test, data.templates)
    assert set(rep.metrics) == {"none/canonical_acc", "none/synonym_acc", "none/degradation"}


# -- linear probe -------------------------------------------------------------


def test_probe_separable_two_class():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(-3, 1, size=(50, 4)), rng.normal(3, 1, size=(50, 4))])
    y = np.array([0] * 50 + [1] * 50)
    rep = linear_probe(X, y, X, y)
    assert rep.metrics["train_acc"] == 1.0


def test_probe_shuffled_labels_at_chance():
    rng = np.random.default_rng(1)
    K = 4
    X = rng.normal(size=(800, 16))
    y = rng.integers(0, K, size=800)
    rep = linear_probe(X[:400], y[:400], X[400:], rng.permutation(y[400:]))
    assert abs(rep.metrics["test_acc"] - 1 / K) <= 0.1


def test_probe_single_class_rejected():
    with pytest.raises(ValueError):
        linear_probe(np.ones((5, 2)), [1] * 5, np.ones((2, 2)), [1, 1])


# -- exports ------------------------------------------------------------------


def test_pca_zero_mean_and_minimum_size():
    X = np.random.default_rng(0).normal(size=(30, 6)) + 5
    Z = pca_2d(X)
    assert Z.shape == (30, 2)
    np.testing.assert_allclose(Z.mean(axis=0), 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        pca_2d(X[:2])


def test_pca_matches_svd_variance():
    X = np.random.default_rng(1).normal(size=(50, 5)) * [5, 3, 1, 0.5, 0.1]
    Z = pca_2d(X)
    s = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    np.testing.assert_allclose(np.linalg.norm(Z, axis=0), s[:2], rtol=1e-10)


def test_export_features_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(2)
    F = rng.normal(size=(7, 4)) * 1e-3
    rows = [FeatureRow(f"s{i}", "caption", i % 3, "caption") for i in range(7)]
    coords = export_features(rows, F, tmp_path / "f.csv")
    back_rows, back_F, back_c = read_features(tmp_path / "f.csv")
    assert back_rows == rows
    assert back_F.tobytes() == F.tobytes()
    assert back_c.tobytes() == coords.tobytes()


@pytest.mark.parametrize("seed", range(3))
def test_silhouette_matches_reference(seed):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(1, 1, size=(15, 4)), rng.normal(-1, 1, size=(10, 4))])
    labels = [0] * 15 + [1] * 10
    assert silhouette(X, labels) == pytest.approx(silhouette_score(X, labels, metric="cosine"), abs=1e-10)


def test_unconditioned_prefix_separation_has_no_signal(plain_model):
    texts = ["a photo of a cat", "a dark cup beside a tree", "a drawing of the kitty"]
    assert prefix_separation(plain_model, texts) <= 0.0


def test_export_attention_rows_sum_to_one(tmp_path, prefix_model):
    export_attention(prefix_model, "a photo of a cat", tmp_path / "a.csv")
    sums = {}
    with open(tmp_path / "a.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (rec["condition"], rec["layer"])
            sums[key] = sums.get(key, 0.0) + float(rec["weight"])
    assert {c for c, _ in sums} == {"prompt", "caption"}
    assert len(sums) == 2 * prefix_model.text_cfg.layers
    for v in sums.values():
        assert abs(v - 1.0) <= 1e-9
