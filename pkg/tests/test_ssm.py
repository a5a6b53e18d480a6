import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from s6la.harness.verify import scan_case
from s6la.ssm import (DiscretizedSsm, SsmParams, default_a, discretize, discretize_exact,
                      recurrent_scan, unrolled_oracle)
from s6la.tensor import as_tensor, finite_difference_check


def const(abar, bbar):
    return DiscretizedSsm(as_tensor(np.atleast_1d(np.asarray(abar, float))),
                          as_tensor(np.atleast_1d(np.asarray(bbar, float))))


def test_params_reject_nonnegative():
    with pytest.raises(ValueError):
        SsmParams(np.array([-1.0, 0.0]))
    assert SsmParams.default(4).n == 4
    np.testing.assert_array_equal(default_a(3), [-1.0, -2.0, -3.0])


def test_discretize_zero_interval():
    d = discretize(0.0, SsmParams(np.array([-1.0, -2.0])), np.array([3.0, 4.0]))
    np.testing.assert_array_equal(d.abar.data, [1.0, 1.0])
    np.testing.assert_array_equal(d.bbar.data, [0.0, 0.0])


def test_discretize_scalar_closed_forms():
    d = discretize(0.1, SsmParams(np.array([-1.0])), np.array([1.0]))
    assert d.abar.data[0] == pytest.approx(math.exp(-0.1), abs=1e-15)
    assert d.abar.data[0] == pytest.approx(0.904837, abs=1e-6)
    assert d.bbar.data[0] == pytest.approx(0.1, abs=1e-15)
    d = discretize(1.0, SsmParams(np.array([-math.log(2)])), np.array([2.0]))
    assert d.abar.data[0] == pytest.approx(0.5, abs=1e-15)
    assert d.bbar.data[0] == pytest.approx(2.0, abs=1e-15)


def test_discretize_rejects_negative_delta():
    with pytest.raises(ValueError):
        discretize(-0.1, SsmParams(np.array([-1.0])), np.array([1.0]))


def test_exact_closed_forms():
    d = discretize_exact(0.1, SsmParams(np.array([-1.0])), np.array([1.0]))
    assert d.bbar.data[0] == pytest.approx((math.exp(-0.1) - 1) / -1.0, abs=1e-15)
    assert d.bbar.data[0] == pytest.approx(0.0951626, abs=1e-7)
    assert 0.1 - d.bbar.data[0] == pytest.approx(4.8374e-3, abs=1e-6)
    d = discretize_exact(1.0, SsmParams(np.array([-math.log(2)])), np.array([1.0]))
    assert d.bbar.data[0] == pytest.approx(0.5 / math.log(2), abs=1e-12)
    assert d.bbar.data[0] == pytest.approx(0.721348, abs=1e-6)


def test_exact_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        discretize_exact(0.0, SsmParams(np.array([-1.0])), np.array([1.0]))


def test_taylor_gap_is_second_order():
    a = -np.array([0.5, 1.0, 2.0, 4.0])
    b = np.array([1.0, -2.0, 0.5, 3.0])
    deltas = [0.1, 0.05, 0.025, 0.0125, 0.00625]
    gaps = []
    for dl in deltas:
        exact = discretize_exact(dl, SsmParams(a), b).bbar.data
        taylor = discretize(dl, SsmParams(a), b).bbar.data
        gaps.append(np.abs(exact - taylor))
    # leading term of dl*b - expm1(dl*a)/a is -a*b*dl^2/2
    c = np.abs(a * b) / 2 * (1 + np.abs(a) * 0.1)
    for dl, g in zip(deltas, gaps):
        assert np.all(g <= c * dl ** 2)
    ratios = gaps[0] / gaps[1]
    assert np.all((ratios > 3.5) & (ratios < 4.5))


def test_scan_zero_input_zero_state():
    states = recurrent_scan(np.zeros(5), const([0.3, 0.7], [1.0, 2.0]), np.zeros(2))
    assert all(np.all(s.data == 0) for s in states)


def test_scan_hand_unroll():
    states = recurrent_scan(np.array([1.0, 0.0, 0.0]), const(0.5, 1.0), np.zeros(1))
    np.testing.assert_array_equal([s.data[0] for s in states], [1.0, 0.5, 0.25])


def test_scan_length_mismatch():
    with pytest.raises(ValueError):
        recurrent_scan(np.ones(3), [const(0.5, 1.0)] * 2, np.zeros(1))


def test_unrolled_oracle_cases():
    assert unrolled_oracle(np.array([2.0]), const(0.3, 1.5))[0] == pytest.approx(3.0, abs=1e-15)
    x = np.array([1.0, -2.0, 4.0, 0.5])
    assert unrolled_oracle(x, const(1.0, 1.0))[0] == pytest.approx(x.sum(), abs=1e-15)
    assert unrolled_oracle(np.ones(3), const(0.5, 1.0))[0] == pytest.approx(1.75, abs=1e-15)


def test_scan_matches_oracle_large():
    rng = np.random.default_rng(0)
    disc = const(rng.uniform(0, 1, 32), rng.normal(size=32))
    x = rng.normal(size=64)
    final = recurrent_scan(x, disc, np.zeros(32))[-1].data
    assert np.abs(final - unrolled_oracle(x, disc)).max() < 1e-10


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.integers(1, 32), st.integers(0, 2**31))
def test_scan_unroll_property(T, n, seed):
    rng = np.random.default_rng(seed)
    disc = const(rng.uniform(0, 1, n), rng.normal(size=n))
    x = rng.normal(size=T)
    final = recurrent_scan(x, disc, np.zeros(n))[-1].data
    assert np.abs(final - unrolled_oracle(x, disc)).max() < 1e-10


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(1, 8), st.integers(0, 2**31))
def test_states_bounded(T, n, seed):
    rng = np.random.default_rng(seed)
    a = -rng.uniform(0.1, 3.0, n)
    delta = rng.uniform(0.01, 1.0)
    disc = discretize(delta, SsmParams(a), rng.normal(size=n))
    x = rng.uniform(-1, 1, T)
    h0 = rng.normal(size=n)
    bound = (np.abs(x).max() * np.abs(disc.bbar.data).max() / (1 - disc.abar.data.max())
             + np.abs(h0).max())
    for s in recurrent_scan(x, disc, h0):
        assert np.abs(s.data).max() <= bound + 1e-12


def test_scan_gradients():
    loss, params = scan_case(np.random.default_rng(4))
    for p in params:
        assert finite_difference_check(loss, p) < 1e-4
