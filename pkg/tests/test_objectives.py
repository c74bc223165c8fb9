import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefixcond.datagen import default_vocabulary
from prefixcond.model import TAU_MAX, DualEncoderModel
from prefixcond.numerics import Tensor, make_rng
from prefixcond.objectives import NotNormalizedError, clip_loss, positive_mask, temperature, unicl_loss


def unit_rows(rng, n, d):
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def loop_unicl(U, V, labels, tau):
    """Direct transcription with explicit loops; the reference for the vectorized loss."""
    n = len(U)
    S = [[tau * float(np.dot(U[i], V[j])) for j in range(n)] for i in range(n)]

    def direction(M):
        total = 0.0
        for i in range(n):
            lse = math.log(sum(math.exp(M[i][k]) for k in range(n)))
            pos = [j for j in range(n) if labels[j] == labels[i]]
            total += -sum(M[i][j] - lse for j in pos) / len(pos)
        return total / n

    St = [[S[j][i] for j in range(n)] for i in range(n)]
    return direction(S) + direction(St)


# -- examples -----------------------------------------------------------------


def test_orthogonal_pairs_tau_one():
    U = np.eye(2)
    assert float(clip_loss(U, U, 1.0).data) == pytest.approx(2 * math.log(1 + math.exp(-1)), abs=1e-12)
    assert 2 * math.log(1 + math.exp(-1)) == pytest.approx(0.626523, abs=1e-6)


@pytest.mark.parametrize("B", [2, 4, 8])
def test_identical_embeddings_give_two_log_b(B):
    U = np.tile([[0.6, 0.8]], (B, 1))
    assert abs(float(clip_loss(U, U, 14.0).data) - 2 * math.log(B)) < 1e-9


def test_identity_similarity_high_tau_vanishes():
    U = np.eye(2)
    assert float(clip_loss(U, U, 100.0).data) < 1e-40


def test_unicl_two_same_class_identical():
    U = np.tile([[1.0, 0.0, 0.0]], (2, 1))
    for tau in (0.5, 14.0, 90.0):
        assert float(unicl_loss(U, U, [0, 0], tau).data) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_rejects_unnormalized_rows():
    U = np.array([[1.0, 0.0], [0.0, 1.01]])
    with pytest.raises(NotNormalizedError, match="row 1"):
        clip_loss(U, np.eye(2), 1.0)


def test_rejects_single_sample():
    with pytest.raises(ValueError):
        clip_loss(np.eye(1), np.eye(1), 1.0)


def test_label_count_must_match():
    with pytest.raises(ValueError):
        unicl_loss(np.eye(3), np.eye(3), [0, 1], 1.0)


# -- oracle -------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    U, V = unit_rows(rng, n, 5), unit_rows(rng, n, 5)
    labels = list(rng.integers(0, 3, size=n))
    tau = float(rng.uniform(1, 20))
    assert float(unicl_loss(U, V, labels, tau).data) == pytest.approx(loop_unicl(U, V, labels, tau), rel=1e-12, abs=1e-12)
    assert float(clip_loss(U, V, tau).data) == pytest.approx(loop_unicl(U, V, list(range(n)), tau), rel=1e-12)


# -- properties ---------------------------------------------------------------

batches = st.tuples(st.integers(2, 8), st.integers(2, 6), st.integers(0, 2**31 - 1), st.floats(1.0, 100.0))


@settings(max_examples=100, deadline=None)
@given(batches)
def test_unicl_reduces_to_clip_with_unique_labels(b):
    n, d, seed, tau = b
    rng = np.random.default_rng(seed)
    U, V = unit_rows(rng, n, d), unit_rows(rng, n, d)
    labels = list(rng.permutation(1000)[:n])
    assert abs(float(unicl_loss(U, V, labels, tau).data) - float(clip_loss(U, V, tau).data)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(batches)
def test_clip_symmetric_in_modalities(b):
    n, d, seed, tau = b
    rng = np.random.default_rng(seed)
    U, V = unit_rows(rng, n, d), unit_rows(rng, n, d)
    assert float(clip_loss(U, V, tau).data) == pytest.approx(float(clip_loss(V, U, tau).data), rel=1e-12, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(batches)
def test_clip_permutation_invariant(b):
    n, d, seed, tau = b
    rng = np.random.default_rng(seed)
    U, V = unit_rows(rng, n, d), unit_rows(rng, n, d)
    p = rng.permutation(n)
    assert float(clip_loss(U[p], V[p], tau).data) == pytest.approx(float(clip_loss(U, V, tau).data), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(batches)
def test_unicl_relabeling_invariant(b):
    n, d, seed, tau = b
    rng = np.random.default_rng(seed)
    U, V = unit_rows(rng, n, d), unit_rows(rng, n, d)
    labels = rng.integers(0, 3, size=n)
    relabel = {0: 17, 1: -4, 2: 99}
    other = [relabel[int(x)] for x in labels]
    a = float(unicl_loss(U, V, list(labels), tau).data)
    assert float(unicl_loss(U, V, other, tau).data) == pytest.approx(a, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(batches)
def test_clip_finite_lower_bound(b):
    n, d, seed, tau = b
    rng = np.random.default_rng(seed)
    U, V = unit_rows(rng, n, d), unit_rows(rng, n, d)
    assert float(clip_loss(U, V, tau).data) >= 2 * math.log(n) - 2 * tau * 2


def test_aligned_orthonormal_loss_decreases_in_tau():
    U = np.eye(4)
    losses = [float(clip_loss(U, U, t).data) for t in np.linspace(1, 100, 60)]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_positive_mask_structure():
    # classes 0/1 from the label source, then two captions with fresh ids
    P = positive_mask([0, 1, 0, 100, 101])
    assert P.diagonal().all()
    assert (P == P.T).all()
    assert P[3].sum() == 1 and P[4].sum() == 1
    assert P[0, 2]


# -- temperature --------------------------------------------------------------


def test_temperature_init_and_clamp():
    m = DualEncoderModel.create(make_rng(0, "init"), default_vocabulary())
    assert float(temperature(m).data) == pytest.approx(1 / 0.07, abs=1e-6)
    m.params["log_tau"] = Tensor(np.array(math.log(200.0)), requires_grad=True)
    assert float(temperature(m).data) == TAU_MAX
