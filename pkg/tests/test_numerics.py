import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from macpf.numerics import (RngStream, log_softmax, log_sum_exp, sample_categorical,
                            sample_categorical_rows, softmax)

# reference values computed once with mpmath at 40 digits
LSE_12_AT_HALF = 2.063464005521486248
LN4 = 1.3862943611198906
ROW_A_TAIL = 4.7808928838854690813e-25  # softmax([8,-20,-20,-20] / 0.5), entries 2..4

finite = st.floats(-1e3, 1e3, allow_nan=False)
temps = st.floats(1e-2, 1e2)


def test_frozen_values():
    assert log_sum_exp([1.0, 2.0], 0.5) == pytest.approx(LSE_12_AT_HALF, rel=1e-15)
    assert log_sum_exp(np.zeros(4)) == pytest.approx(LN4, rel=1e-15)
    p = softmax([8.0, -20.0, -20.0, -20.0], 0.5)
    assert p[0] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(p[1:], ROW_A_TAIL, rtol=1e-10)


def test_no_overflow_on_large_logits():
    assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000.0 + np.log(2))
    assert np.isfinite(softmax([1e4, -1e4], 0.01)).all()


@given(arrays(np.float64, st.integers(1, 8), elements=finite), temps)
def test_lse_bounds(v, t):
    out = log_sum_exp(v, t)
    assert v.max() - 1e-9 <= out <= v.max() + t * np.log(v.size) + 1e-9


@given(arrays(np.float64, st.integers(1, 8), elements=finite), temps, finite)
def test_shift_invariance(v, t, c):
    np.testing.assert_allclose(softmax(v + c, t), softmax(v, t), atol=1e-9)
    assert log_sum_exp(v + c, t) == pytest.approx(log_sum_exp(v, t) + c, abs=1e-7)


@given(arrays(np.float64, st.integers(1, 8), elements=finite), temps)
def test_softmax_is_distribution(v, t):
    p = softmax(v, t)
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(np.exp(log_softmax(v, t)), p, atol=1e-12)


def test_axis_reduction():
    m = np.array([[0.0, 0.0], [1.0, 3.0]])
    np.testing.assert_allclose(log_sum_exp(m, axis=1), [np.log(2), 3 + np.log(1 + np.exp(-2))])


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan")])
def test_rejects_bad_temperature(bad):
    with pytest.raises(ValueError):
        softmax([1.0, 2.0], bad)
    with pytest.raises(ValueError):
        log_sum_exp([1.0], bad)


def test_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        log_sum_exp([])
    with pytest.raises(ValueError):
        softmax([np.inf, 0.0])


def test_sampling_frequency():
    rng = RngStream(3)
    draws = [sample_categorical([0.5, 0.5], rng) for _ in range(100_000)]
    assert abs(np.mean(draws) - 0.5) < 0.01


def test_row_sampling_matches_probabilities():
    probs = np.tile([0.2, 0.0, 0.8], (50_000, 1))
    idx = sample_categorical_rows(probs, RngStream(1))
    assert not np.any(idx == 1)
    assert abs(np.mean(idx == 2) - 0.8) < 0.01


def test_sampling_never_picks_zero_mass():
    rng = RngStream(0)
    assert all(sample_categorical([0.0, 1.0, 0.0], rng) == 1 for _ in range(1000))


def test_rejects_invalid_distribution():
    with pytest.raises(ValueError):
        sample_categorical([0.5, 0.6], RngStream(0))
    with pytest.raises(ValueError):
        sample_categorical([-0.1, 1.1], RngStream(0))


def test_streams_are_deterministic_and_independent():
    a = RngStream(7).split("env").random(5)
    root = RngStream(7)
    root.split("other").random(100)
    np.testing.assert_array_equal(root.split("env").random(5), a)
    assert not np.allclose(RngStream(7).split("policy").random(5), a)


@settings(max_examples=20)
@given(st.integers(0, 2**64 - 1))
def test_any_64bit_seed(seed):
    RngStream(seed).random()


def test_rejects_out_of_range_seed():
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(2**64)
