import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpg.numerics import AdamState, RngStream, adam_step, cosine_sim, softmax

finite_floats = st.floats(min_value=-50, max_value=50, allow_nan=False)


def test_softmax_symmetry():
    assert np.array_equal(softmax([0.0, 0.0]), [0.5, 0.5])


def test_softmax_direct_value():
    p = softmax([math.log(2.0), 0.0])
    assert abs(p[0] - 2.0 / 3.0) < 1e-12
    assert abs(p[1] - 1.0 / 3.0) < 1e-12


def test_softmax_shift_invariance_exact():
    assert np.array_equal(softmax([5.0, 5.0]), softmax([0.0, 0.0]))


@pytest.mark.parametrize("bad", [[np.nan, 0.0], [np.inf, 1.0], []])
def test_softmax_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        softmax(bad)


@settings(deadline=None, derandomize=True)
@given(st.lists(finite_floats, min_size=1, max_size=32))
def test_softmax_sums_to_one(logits):
    p = softmax(logits)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p > 0.0) and np.all(p < 1.0 + 1e-15)


def test_cosine_examples():
    assert cosine_sim([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert abs(cosine_sim([1.0, 0.0], [2.0, 0.0]) - 1.0) < 1e-12
    v = np.array([1.0, 1.0]) / math.sqrt(2.0)
    assert abs(cosine_sim([1.0, 0.0], v) - 0.70710678118654752) < 1e-9


def test_cosine_zero_vector_rejected():
    with pytest.raises(ValueError):
        cosine_sim([0.0, 0.0], [1.0, 0.0])


@settings(deadline=None, derandomize=True)
@given(st.lists(finite_floats, min_size=2, max_size=8),
       st.lists(finite_floats, min_size=2, max_size=8),
       st.floats(min_value=0.01, max_value=100.0))
def test_cosine_properties(a, b, c):
    n = min(len(a), len(b))
    a, b = np.array(a[:n]) + 0.25, np.array(b[:n]) - 0.25  # keep away from zero vectors
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    s = cosine_sim(a, b)
    assert abs(s) <= 1.0 + 1e-12
    assert s == cosine_sim(b, a)
    assert abs(cosine_sim(c * a, b) - s) <= 1e-9


def test_adam_first_step_closed_form():
    lr = 8e-5
    state = AdamState.zeros_like(np.zeros(1), lr=lr, weight_decay=0.0)
    params = adam_step(state, np.zeros(1), np.array([0.5]))
    # first step: m_hat = g, sqrt(v_hat) = |g|
    expected = -lr * 0.5 / (math.sqrt(0.25) + state.eps)
    assert abs(params[0] - expected) < 1e-18
    assert state.t == 1


def test_adam_zero_gradient_is_identity():
    state = AdamState.zeros_like(np.zeros(3), lr=1e-3, weight_decay=0.0)
    before = np.array([1.0, -2.0, 3.0])
    after = adam_step(state, before, np.zeros(3))
    assert np.array_equal(after, before)


def test_adam_lr_zero_is_identity():
    state = AdamState.zeros_like(np.zeros(3), lr=0.0, weight_decay=0.5)
    before = np.array([1.0, -2.0, 3.0])
    after = adam_step(state, before, np.array([0.3, -0.1, 0.9]))
    assert np.array_equal(after, before)


def test_adam_deterministic():
    def run():
        state = AdamState.zeros_like(np.zeros(4), lr=1e-3, weight_decay=1e-2)
        p = np.linspace(-1, 1, 4)
        for k in range(5):
            p = adam_step(state, p, np.sin(p + k))
        return p

    assert np.array_equal(run(), run())


def test_adam_shape_mismatch():
    state = AdamState.zeros_like(np.zeros(3), lr=1e-3, weight_decay=0.0)
    with pytest.raises(ValueError):
        adam_step(state, np.zeros(3), np.zeros(4))


def test_adam_moments_stay_valid():
    state = AdamState.zeros_like(np.zeros(2), lr=1e-3, weight_decay=0.0)
    p = np.zeros(2)
    for k in range(10):
        p = adam_step(state, p, np.array([(-1.0) ** k, 2.0]))
        assert np.all(state.v >= 0.0)
    assert state.t == 10


def test_rng_same_seed_same_sequence():
    a = RngStream.from_seed(1)
    b = RngStream.from_seed(1)
    assert [a.next_u64() for _ in range(20)] == [b.next_u64() for _ in range(20)]
    assert RngStream.from_seed(1).gaussian() == RngStream.from_seed(1).gaussian()


def test_rng_tags_give_independent_streams():
    a = RngStream.from_seed(1, "train")
    b = RngStream.from_seed(1, "model-init")
    assert [a.next_u64() for _ in range(4)] != [b.next_u64() for _ in range(4)]


def test_gaussian_consumes_exactly_two_draws():
    s = RngStream.from_seed(9)
    for _ in range(5):
        before = s.draws
        s.gaussian()
        assert s.draws == before + 2


def test_uniform_range_and_counter():
    s = RngStream.from_seed(3)
    vals = [s.uniform() for _ in range(1000)]
    assert all(0.0 <= v < 1.0 for v in vals)
    assert s.draws == 1000


def test_next_below_bounds():
    s = RngStream.from_seed(5)
    assert s.next_below(1) == 0
    vals = [s.next_below(7) for _ in range(500)]
    assert set(vals) <= set(range(7))
    with pytest.raises(ValueError):
        s.next_below(0)


def test_permutation_is_permutation():
    s = RngStream.from_seed(6)
    p = s.permutation(100)
    assert sorted(p.tolist()) == list(range(100))
    assert RngStream.from_seed(6).permutation(100).tolist() == p.tolist()


def test_state_roundtrip():
    s = RngStream.from_seed(8)
    for _ in range(13):
        s.next_u64()
    clone = RngStream(s.state(), s.draws)
    assert clone.next_u64() == s.next_u64()
    assert clone.draws == s.draws


def test_gaussian_moments():
    # law-of-large-numbers check on one million draws
    s = RngStream.from_seed(1)
    n = 1_000_000
    total = 0.0
    total_sq = 0.0
    for _ in range(n):
        x = s.gaussian()
        total += x
        total_sq += x * x
    mean = total / n
    var = total_sq / n - mean * mean
    assert abs(mean) < 0.01
    assert abs(var - 1.0) < 0.01
