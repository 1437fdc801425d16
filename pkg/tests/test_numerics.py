import json
import math
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selctl.numerics import (
    SeededRng,
    cosine,
    finite_diff_grad,
    log_softmax,
    logsumexp,
    sample_without_replacement,
    softmax,
)

DATA = os.path.join(os.path.dirname(__file__), "data")

finite_vecs = st.lists(
    st.floats(min_value=-50, max_value=50, allow_nan=False), min_size=1, max_size=12
)


# ---------------------------------------------------------------------------
# cosine


def test_cosine_known_value():
    # 32 / sqrt(14 * 77), evaluated in exact rational arithmetic then rounded
    assert cosine([1, 2, 3], [4, 5, 6]) == pytest.approx(0.9746318461970762, abs=1e-15)


def test_cosine_edge_cases():
    v = np.array([0.3, -0.7, 2.0])
    assert cosine(v, v) == 1.0
    assert cosine(v, -v) == -1.0
    assert cosine(np.zeros(3), v) == 0.0
    assert cosine(v, np.zeros(3)) == 0.0
    with pytest.raises(ValueError):
        cosine(np.ones(3), np.ones(4))


@given(finite_vecs, finite_vecs, st.floats(min_value=0.5, max_value=100))
def test_cosine_properties(a, b, scale):
    n = min(len(a), len(b))
    a, b = np.asarray(a[:n]), np.asarray(b[:n])
    c = cosine(a, b)
    assert -1.0 <= c <= 1.0
    assert c == cosine(b, a)
    assert cosine(scale * a, b) == pytest.approx(c, abs=1e-12)


# ---------------------------------------------------------------------------
# logsumexp / softmax


def test_logsumexp_matches_direct_sum():
    x = np.array([0.1, -2.0, 1.3, 0.0, 3.7])
    direct = math.log(math.fsum(math.exp(v) for v in x))
    assert logsumexp(x) == pytest.approx(direct, abs=1e-12)


def test_logsumexp_large_values_stable():
    assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2.0), abs=1e-12)
    assert logsumexp([-1e300, 5.0]) == pytest.approx(5.0, abs=1e-12)


def test_logsumexp_empty_rejected():
    with pytest.raises(ValueError):
        logsumexp([])


@given(finite_vecs, st.floats(min_value=-100, max_value=100, allow_nan=False))
def test_logsumexp_shift(x, c):
    assert logsumexp(np.asarray(x) + c) == pytest.approx(logsumexp(x) + c, abs=1e-9)


def test_softmax_matches_direct_normalization():
    x = np.array([0.5, -1.2, 2.0, 0.0])
    exps = [math.exp(v) for v in x]
    z = math.fsum(exps)
    expected = np.array([e / z for e in exps])
    np.testing.assert_allclose(softmax(x), expected, atol=1e-15)
    assert math.fsum(softmax(x).tolist()) == pytest.approx(1.0, abs=1e-12)


@given(finite_vecs)
def test_log_softmax_consistent(x):
    ls = log_softmax(np.asarray(x))
    np.testing.assert_allclose(np.exp(ls), softmax(x), atol=1e-12)
    np.testing.assert_allclose(ls, np.asarray(x) - logsumexp(x), atol=1e-9)


# ---------------------------------------------------------------------------
# SeededRng


def test_rng_same_path_same_stream():
    a = SeededRng(7).child("x", 3, "y").uniforms(16)
    b = SeededRng(7).child("x", 3, "y").uniforms(16)
    np.testing.assert_array_equal(a, b)


def test_rng_streams_differ():
    base = SeededRng(7)
    draws = {
        "root": base.uniforms(8).tobytes(),
        "a": base.child("a").uniforms(8).tobytes(),
        "b": base.child("b").uniforms(8).tobytes(),
        "a/b": base.child("a", "b").uniforms(8).tobytes(),
        "int0": base.child(0).uniforms(8).tobytes(),
        "str0": base.child("0").uniforms(8).tobytes(),
        "seed8": SeededRng(8).uniforms(8).tobytes(),
    }
    assert len(set(draws.values())) == len(draws)


def test_rng_child_of_child_equals_full_path():
    a = SeededRng(3).child("u").child("v", 2).uniforms(4)
    b = SeededRng(3).child("u", "v", 2).uniforms(4)
    np.testing.assert_array_equal(a, b)


def test_rng_rejects_bad_seeds_and_tags():
    with pytest.raises(ValueError):
        SeededRng(-1)
    with pytest.raises(TypeError):
        SeededRng("7")
    with pytest.raises(ValueError):
        SeededRng(0).child()
    with pytest.raises(ValueError):
        SeededRng(0).child(-3)
    with pytest.raises(TypeError):
        SeededRng(0).child(1.5)


def test_rng_golden_draws():
    """Frozen draws guard against accidental changes to the seeding scheme."""
    with open(os.path.join(DATA, "golden_rng_seed42.json")) as f:
        golden = json.load(f)
    root = SeededRng(42)
    assert root.uniforms(8).tolist() == golden["root_uniform"]
    assert root.child("init").normal(size=8).tolist() == golden["init_normal"]
    assert root.child("episode", 1, "t3").integers(0, 1000, size=8).tolist() == golden[
        "episode_integers"
    ]
    assert root.child("shuffle", 0).permutation(10).tolist() == golden["shuffle_perm"]


# ---------------------------------------------------------------------------
# sampling without replacement


def test_uniform_full_draw_chain():
    """k = n over uniform probabilities: draw t has probability 1/(n-t)."""
    rng = SeededRng(0).child("draw")
    out = sample_without_replacement(np.full(4, 0.25), 4, rng)
    assert sorted(out.indices.tolist()) == [0, 1, 2, 3]
    expected = [math.log(1 / 4), math.log(1 / 3), math.log(1 / 2), 0.0]
    np.testing.assert_allclose(out.per_draw_logp, expected, atol=1e-12)
    assert out.total_logp == pytest.approx(-math.log(24.0), abs=1e-12)


def test_total_logp_is_sum_of_per_draw():
    rng = SeededRng(5)
    for trial in range(50):
        p = rng.child("p", trial).uniforms(7) + 1e-3
        p = p / p.sum()
        out = sample_without_replacement(p, 4, rng.child("s", trial))
        assert out.total_logp == pytest.approx(math.fsum(out.per_draw_logp.tolist()), abs=1e-12)
        assert len(set(out.indices.tolist())) == 4
        assert np.all(out.per_draw_logp <= 1e-12)


def test_sampled_set_frequencies_match_enumeration():
    """Empirical set frequencies vs. the exact chain probabilities.

    For p = (1/2, 3/10, 1/5) and k = 2, summing the two draw orders:
      P({0,1}) = 1/2 * 3/5 + 3/10 * 5/7 = 18/35
      P({0,2}) = 1/2 * 2/5 + 1/5 * 5/8  = 13/40
      P({1,2}) = 3/10 * 2/7 + 1/5 * 3/8 = 9/56
    """
    probs = np.array([0.5, 0.3, 0.2])
    exact = {(0, 1): 18 / 35, (0, 2): 13 / 40, (1, 2): 9 / 56}
    n_draws = 60_000
    rng = SeededRng(2024)
    counts = {key: 0 for key in exact}
    for i in range(n_draws):
        out = sample_without_replacement(probs, 2, rng.child(i))
        counts[tuple(sorted(out.indices.tolist()))] += 1
    for key, p_set in exact.items():
        sigma = math.sqrt(p_set * (1 - p_set) / n_draws)
        assert abs(counts[key] / n_draws - p_set) < 3.5 * sigma


def test_zero_probability_items_never_drawn():
    probs = np.array([0.5, 0.0, 0.5])
    rng = SeededRng(9)
    for i in range(200):
        out = sample_without_replacement(probs, 2, rng.child(i))
        assert 1 not in out.indices


def test_sampling_validation():
    rng = SeededRng(0)
    with pytest.raises(ValueError):
        sample_without_replacement(np.array([0.5, -0.1, 0.6]), 1, rng)
    with pytest.raises(ValueError):
        sample_without_replacement(np.array([0.5, 0.6]), 1, rng)
    with pytest.raises(ValueError):
        sample_without_replacement(np.array([0.5, np.nan]), 1, rng)
    with pytest.raises(ValueError):
        sample_without_replacement(np.array([0.5, 0.5]), 3, rng)
    with pytest.raises(ValueError):
        sample_without_replacement(np.array([0.5, 0.5]), 0, rng)
    with pytest.raises(ValueError):
        sample_without_replacement(np.array([1.0, 0.0]), 2, rng)
    with pytest.raises(ValueError):
        sample_without_replacement(np.eye(2), 1, rng)


# ---------------------------------------------------------------------------
# finite differences


def test_finite_diff_grad_quadratic():
    a = np.array([1.0, -2.0, 0.5])
    b = np.array([0.3, 0.0, -1.1])

    def f(x):
        return float(np.sum(a * x * x) + np.dot(b, x))

    x0 = np.array([0.7, -0.2, 1.5])
    g = finite_diff_grad(f, x0)
    np.testing.assert_allclose(g, 2 * a * x0 + b, atol=1e-8)


def test_finite_diff_grad_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda x: float("nan"), np.zeros(2))
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: 0.0, np.zeros((2, 2)))
