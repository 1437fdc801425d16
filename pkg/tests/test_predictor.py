import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from selctl.numerics import SeededRng
from selctl.predictor import Prototypes, fit, score, score_query

vec2 = st.lists(
    st.floats(min_value=-20, max_value=20, allow_nan=False), min_size=2, max_size=2
)


# ---------------------------------------------------------------------------
# fit


def test_fit_means_per_class():
    emb = np.array([[2.0, 0.0], [4.0, 2.0], [0.0, -6.0]])
    protos = fit(emb, [1, 1, 0])
    assert np.array_equal(protos.p, [3.0, 1.0])
    assert np.array_equal(protos.n, [0.0, -6.0])
    assert protos.has_p and protos.has_n


def test_fit_single_class_sets_flag():
    protos = fit([[1.0, 2.0], [3.0, 4.0]], [1, 1])
    assert protos.has_p and not protos.has_n
    assert np.array_equal(protos.n, [0.0, 0.0])
    protos = fit([[1.0, 2.0]], [0])
    assert not protos.has_p and protos.has_n


def test_fit_matches_independent_mean():
    rng = SeededRng(41)
    emb = rng.normal(size=(10, 6)) * 5.0
    labels = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1, 0])
    protos = fit(emb, labels)
    # independent oracle: sorted compensated accumulation per column
    for proto, cls in ((protos.p, 1), (protos.n, 0)):
        rows = emb[labels == cls]
        expect = [math.fsum(sorted(rows[:, j])) / rows.shape[0] for j in range(6)]
        assert proto == pytest.approx(expect, abs=1e-12)


def test_fit_permutation_invariant():
    rng = SeededRng(43)
    emb = rng.normal(size=(12, 4))
    labels = (rng.uniforms(12) < 0.5).astype(int)
    labels[0], labels[1] = 1, 0
    base = fit(emb, labels)
    for i in range(5):
        perm = rng.child("perm", i).permutation(12)
        shuffled = fit(emb[perm], labels[perm])
        # fsum gives the correctly rounded sum, so order cannot matter at all
        assert np.array_equal(shuffled.p, base.p)
        assert np.array_equal(shuffled.n, base.n)


def test_fit_rejects_bad_shapes():
    with pytest.raises(ValueError):
        fit([[1.0, 2.0]], [1, 0])
    with pytest.raises(ValueError):
        fit([1.0, 2.0], [1, 0])
    with pytest.raises(ValueError):
        fit(np.zeros((0, 3)), [])


# ---------------------------------------------------------------------------
# score


def test_score_known_geometry():
    protos = Prototypes(p=np.array([1.0, 0.0]), n=np.array([0.0, 1.0]), has_p=True, has_n=True)
    assert score(protos, [1.0, 0.0]) == 1.0
    s = 1.0 / math.sqrt(2.0)
    assert score(protos, [s, s]) == pytest.approx(0.0, abs=1e-15)
    assert score(protos, [0.0, 1.0]) == -1.0


def test_score_equal_prototypes_cancel():
    v = np.array([0.3, -0.8, 1.1])
    protos = Prototypes(p=v, n=v.copy(), has_p=True, has_n=True)
    rng = SeededRng(47)
    for _ in range(10):
        assert score(protos, rng.normal(size=3)) == 0.0


def test_score_missing_class_contributes_zero():
    p = np.array([1.0, 0.0])
    only_p = Prototypes(p=p, n=np.zeros(2), has_p=True, has_n=False)
    only_n = Prototypes(p=np.zeros(2), n=p, has_p=False, has_n=True)
    x = np.array([2.0, 0.0])
    assert score(only_p, x) == 1.0
    assert score(only_n, x) == -1.0


def test_score_dimension_mismatch():
    protos = fit([[1.0, 2.0], [0.0, 1.0]], [1, 0])
    with pytest.raises(ValueError):
        score(protos, [1.0, 2.0, 3.0])


@given(vec2, st.floats(min_value=1e-3, max_value=1e3))
def test_score_scale_invariant(x, c):
    protos = Prototypes(
        p=np.array([2.0, 1.0]), n=np.array([-1.0, 3.0]), has_p=True, has_n=True
    )
    x = np.asarray(x)
    # dot(x, x) underflows to exact 0 below norm ~1e-162, flipping the
    # zero-norm guard between x and c*x; stay well above that floor
    assume(float(np.dot(x, x)) > 1e-250 or not np.any(x))
    assert score(protos, c * x) == pytest.approx(score(protos, x), abs=1e-12)


def test_label_flip_negates_scores():
    rng = SeededRng(53)
    emb = rng.normal(size=(8, 5))
    labels = np.array([1, 0, 1, 0, 1, 0, 0, 1])
    a = fit(emb, labels)
    b = fit(emb, 1 - labels)
    query = rng.normal(size=(20, 5))
    assert np.array_equal(score_query(b, query), -score_query(a, query))


# ---------------------------------------------------------------------------
# score_query


def test_score_query_elementwise():
    rng = SeededRng(59)
    protos = fit(rng.normal(size=(6, 4)), [1, 1, 0, 0, 1, 0])
    query = rng.normal(size=(100, 4))
    got = score_query(protos, query)
    assert got.shape == (100,)
    for i in range(100):
        assert got[i] == score(protos, query[i])


def test_score_query_order_equivariant():
    rng = SeededRng(61)
    protos = fit(rng.normal(size=(4, 3)), [1, 0, 1, 0])
    query = rng.normal(size=(15, 3))
    perm = rng.permutation(15)
    assert np.array_equal(score_query(protos, query[perm]), score_query(protos, query)[perm])


def test_score_query_singleton_and_shape():
    protos = fit([[1.0, 0.0], [0.0, 1.0]], [1, 0])
    assert score_query(protos, [[1.0, 0.0]]).shape == (1,)
    with pytest.raises(ValueError):
        score_query(protos, [1.0, 0.0])


def test_scores_bounded():
    rng = SeededRng(67)
    for i in range(20):
        r = rng.child("case", i)
        emb = r.normal(size=(10, 4)) * 10.0
        labels = (r.uniforms(10) < 0.5).astype(int)
        labels[0], labels[1] = 1, 0
        s = score_query(fit(emb, labels), r.normal(size=(30, 4)))
        assert np.all(s >= -2.0) and np.all(s <= 2.0)
