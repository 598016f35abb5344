import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asllt_lab.correlation import (VARIANTS, bound_shape, brute_force_joint, check_hypotheses,
                                   correlation_Y, correlation_Y_direct, grid_maxima, grid_pairs,
                                   grid_sweep, joint_probability, quadratic_form_check,
                                   segment_probability, variance_Y, verify_bound,
                                   write_reports_csv)
from asllt_lab.errors import HypothesisViolated, IndexOrder, InvalidArgument, TooLarge
from asllt_lab.lattice import fair_coin, prefix_chain
from asllt_lab.models import (block_uniform_model, cramer_model, iid_model, kappa_from_offsets,
                              kappa_sequence)

COIN = iid_model(fair_coin())


def _coin(offsets):
    k = kappa_from_offsets(COIN, offsets)
    return prefix_chain(COIN, len(offsets)), k


def test_worked_covariance():
    ch, k = _coin([0, 0])
    ref = 0.5 * 0.5 * math.sqrt(0.5) * (0.5 - 0.25)
    assert correlation_Y(ch, k, 1, 2) == pytest.approx(ref, rel=1e-14)
    assert correlation_Y(ch, k, 1, 2) == pytest.approx(0.04419, abs=1e-5)
    assert correlation_Y_direct(ch, k, 1, 2) == pytest.approx(ref, rel=1e-14)


def test_zero_covariance_cases():
    ch, k = _coin([0, 1])
    assert correlation_Y(ch, k, 1, 2) == 0.0
    ch, k = _coin([5, 5, 5])  # unreachable at step 1
    assert correlation_Y(ch, k, 1, 3) == 0.0
    assert variance_Y(ch, k, 1) == 0.0


def test_variance_Y():
    ch, k = _coin([0])
    assert variance_Y(ch, k, 1) == 0.0625
    ch, k = _coin([0, 0])
    # P{S_2 = 0} = 1/4 < 1, and a point mass would give zero
    assert variance_Y(ch, k, 2) == pytest.approx(0.5 * 0.25 * 0.75)


def test_brute_force_joint():
    ch, k = _coin([0, 0])
    assert brute_force_joint(COIN, k, 1, 2) == 0.25
    assert joint_probability(ch, k, 1, 2) == 0.25
    with pytest.raises(IndexOrder):
        brute_force_joint(COIN, k, 2, 2)
    big = block_uniform_model(0, 30)
    kb = kappa_sequence(big, 0.0, 6)
    with pytest.raises(TooLarge):
        brute_force_joint(big, kb, 1, 6)


def test_independent_segments_identity():
    m = cramer_model()
    ch = prefix_chain(m, 30)
    k = kappa_sequence(m, 0.3, 30)
    for a, b in [(3, 9), (10, 30), (17, 18)]:
        pm = ch.state(a).dist.pmf(k.offset(a))
        ref = pm * segment_probability(ch, k, a, b)
        assert joint_probability(ch, k, a, b) == pytest.approx(ref, abs=1e-15)


@st.composite
def small_models(draw):
    bs = draw(st.lists(st.integers(2, 4), min_size=8, max_size=8))
    ns = draw(st.lists(st.integers(-1, 1), min_size=8, max_size=8))
    return block_uniform_model(ns, bs)


@settings(max_examples=25, deadline=None)
@given(small_models(), st.integers(1, 7), st.integers(2, 8), st.floats(-1.5, 1.5))
def test_identity_and_oracle(model, m, n, kap):
    if m >= n:
        m, n = n - 1, n
    ch = prefix_chain(model, 8)
    k = kappa_sequence(model, kap, 8)
    a = correlation_Y(ch, k, m, n)
    b = correlation_Y_direct(ch, k, m, n)
    assert abs(a - b) <= 1e-12
    p = ch.hit_probabilities(k)
    i, j = ch.index(m), ch.index(n)
    ref = ch.sigma[i] * ch.sigma[j] * (brute_force_joint(model, k, m, n) - p[i] * p[j])
    assert abs(a - ref) <= 1e-12


def test_ratio_c_shape():
    ch = prefix_chain(COIN, 64, store=False)
    i, j = ch.index(32), ch.index(64)
    big = max(ch.sigma[j] / math.sqrt(ch.nu[j]), ch.sigma[i] / math.sqrt(ch.nu[i])) ** 3
    assert bound_shape(ch, 32, 64, "ratio-c") / big == pytest.approx(1 / math.sqrt(2), rel=1e-14)
    with pytest.raises(InvalidArgument):
        bound_shape(ch, 40, 64, "ratio-c", c=0.5)
    with pytest.raises(InvalidArgument):
        bound_shape(ch, 3, 64, "bogus")


def test_simple_shape():
    ch = prefix_chain(COIN, 64, store=False)
    assert bound_shape(ch, 16, 64, "simple") == pytest.approx(math.sqrt(16) / math.sqrt(12) + 1)


def test_verify_bound_zero_lhs():
    m = COIN
    k = kappa_from_offsets(m, list(range(21, 85)))  # far outside the central range
    ch = prefix_chain(m, 64)
    k2 = kappa_from_offsets(m, [3] + list(range(1, 64)))  # step 1 cannot reach 3
    r = verify_bound(ch, k2, 1, 8, "tau", cap=1e9)
    assert r.lhs == 0.0 and r.ratio == 0.0
    with pytest.raises(HypothesisViolated):
        check_hypotheses(ch, k, 64)


def test_grid_pairs():
    assert grid_pairs(8) == [(1, 2), (1, 4), (2, 4), (3, 4), (1, 8), (2, 8), (4, 8), (7, 8)]
    assert all(m >= 3 for m, _ in grid_pairs(64, start=3))


def test_coin_grid_bounded_and_settling(tmp_path):
    ch = prefix_chain(COIN, 1024)
    k = kappa_sequence(COIN, 0.0, 1024)
    reps = grid_sweep(ch, k)
    best = grid_maxima(reps)
    assert set(best) == set(VARIANTS)
    assert all(math.isfinite(b["max_ratio"]) and b["max_ratio"] < 1 for b in best.values())
    # along each ray m = n/f the ratio settles: increments shrink geometrically
    for v in VARIANTS:
        for f in (2, 8):
            seq = [r.ratio for r in reps if r.variant == v and r.m * f == r.n and r.n >= 16]
            if len(seq) < 3:
                continue
            inc = np.abs(np.diff(seq))
            assert np.all(inc[1:] <= 0.8 * inc[:-1] + 1e-15), (v, f, seq)
    write_reports_csv(reps, tmp_path / "r.csv")
    head = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert head == "m,n,nu_m,nu_n,lhs,rhs_shape,ratio,variant"


def test_quadratic_form_examples():
    assert quadratic_form_check(np.ones(3), np.zeros((3, 3))) == (0.0, 0.0)
    lhs, rhs = quadratic_form_check([1.0, 1.0], [[0.0, 1.0], [0.0, 0.0]])
    assert (lhs, rhs) == (1.0, 1.0)
    with pytest.raises(InvalidArgument):
        quadratic_form_check([1.0], np.zeros((2, 2)))
    with pytest.raises(InvalidArgument):
        quadratic_form_check([np.nan], np.zeros((1, 1)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2 ** 32 - 1), st.sampled_from(["upper", "offdiag"]))
def test_quadratic_form_property(dim, seed, form):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    a = rng.normal(size=(dim, dim))
    if form == "offdiag":
        a = a + a.T
    lhs, rhs = quadratic_form_check(x, a, form)
    assert lhs <= rhs * (1 + 1e-12) + 1e-14
