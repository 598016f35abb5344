import math

import numpy as np
import pytest

from asllt_lab.asllt import (asllt_average, asllt_expected_average, asllt_limit,
                             average_trajectory, block_second_moments, block_sums,
                             build_schedule, continuum_omega, dyadic_block_sums, gram_bruteforce,
                             gram_matrix, hlp_check, omega_profile, omega_weight,
                             quasi_orthogonality_rowsums, s_squared_diagnostic, speed_report,
                             weighted_series_partials, windowed_sup_statistic)
from asllt_lab.bernoulli import PathSampler
from asllt_lab.errors import (InvalidArgument, InvalidExponent, NotIID, RangeExceeded)
from asllt_lab.lattice import fair_coin, prefix_chain, uniform
from asllt_lab.models import (cramer_model, iid_model, kappa_from_offsets, kappa_sequence,
                              log_variance_parameter_model)

COIN = iid_model(fair_coin())


class _Path:
    def __init__(self, hits):
        self.hits = np.asarray(hits, dtype=float)

    def __len__(self):
        return self.hits.size


# ------------------------------------------------------------- schedule

def test_coin_block_masses_converge():
    sch = build_schedule(COIN, 1 << 16)
    lim = math.sqrt(0.5) / 0.5 * math.log(2)
    m = sch.m[:sch.complete_blocks]
    assert abs(m[-1] - lim) < 1e-3
    err = np.abs(m[4:] - lim)
    assert np.all(np.diff(err) < 0)


def test_cramer_block_masses_bounded():
    sch = build_schedule(cramer_model(), 1 << 16)
    m = sch.m[:sch.complete_blocks]
    assert np.all((m > 0.5) & (m < 1.2))


def test_log_variance_h_is_one():
    sch = build_schedule(log_variance_parameter_model(), 5000)
    assert np.allclose(sch.h_run, 1.0, rtol=0, atol=1e-12)
    assert sch.h(sch.nu[-1]) == pytest.approx(1.0)


def test_M_and_inverse():
    sch = build_schedule(COIN, 4096)
    # nu_n = n/2: M(t) sums steps n = 2 .. 2t-1
    n = np.arange(2, 64)
    ref = np.sum(0.5 / (np.sqrt(n / 4) * np.sqrt(n / 2)))
    assert sch.M(32.0) == pytest.approx(ref, rel=1e-13)
    assert sch.M_J(3) == pytest.approx(sch.M(8.0), rel=1e-13)
    x = sch.M(100.0)
    assert sch.M_inverse(x) == pytest.approx(100.0)
    with pytest.raises(RangeExceeded):
        sch.M(1e6)
    with pytest.raises(InvalidArgument):
        build_schedule(COIN, 10, R=1.0)


def test_omega_definition_direct():
    sch = build_schedule(uniform_model := iid_model(uniform(3)), 2000)
    m = 100
    i = sch.index(m)
    sel = (sch.nu > sch.nu[i]) & (sch.nu < 2 * sch.nu[i])
    ref = np.sum(sch.theta[sel] / (np.sqrt(sch.var[sel] - sch.var[i]) * np.sqrt(sch.nu[sel])))
    assert omega_weight(sch, m) == pytest.approx(ref, rel=1e-13)
    with pytest.raises(RangeExceeded):
        omega_weight(sch, 1500)
    assert uniform_model.iid


@pytest.mark.parametrize("model,top", [(COIN, 10 ** 4), (log_variance_parameter_model(), 10 ** 4)])
def test_omega_bounded(model, top):
    sch = build_schedule(model, 1000)
    ms, om = omega_profile(sch, top)
    assert np.all(np.isfinite(om))
    # bounded and settling: the last decade adds almost nothing
    assert om.max() < 5
    late = om[ms >= top // 10]
    assert late.max() - late.min() < 0.05 * late.max()


def test_omega_cramer_geometric_sample():
    sch = build_schedule(cramer_model(), 1000)
    ms = np.unique(np.geomspace(3, 10 ** 5, 60).astype(int))
    om = np.array([omega_weight(sch, int(m), extend=True) for m in ms])
    assert np.all(np.isfinite(om)) and om.max() < 5


def test_continuum_omega_iid_value():
    # constant profile: integral of 1/(sqrt(s) sqrt(1+s)) over (0, 1) is 2 asinh(1)
    r = 0.5
    assert continuum_omega(lambda v: r, 3.0) == pytest.approx(2 * math.asinh(1) / math.sqrt(r), rel=1e-8)


# ------------------------------------------------------------- gram

def test_gram_single_block_matches_bruteforce():
    N = 70
    ch = prefix_chain(COIN, N)
    k = kappa_sequence(COIN, 0.0, N)
    sch = build_schedule(COIN, N)
    for I, J in [(2, 2), (1, 4), (3, 4)]:
        G = gram_matrix(ch, k, sch, I, J)
        B = gram_bruteforce(ch, k, sch, I, J)
        assert np.max(np.abs(G - B)) <= 1e-12


def test_gram_cramer_matches_bruteforce():
    N = 120
    m = cramer_model()
    ch = prefix_chain(m, N)
    k = kappa_sequence(m, 0.5, N)
    sch = build_schedule(m, N)
    J = sch.complete_blocks - 1
    G = gram_matrix(ch, k, sch, 0, J)
    B = gram_bruteforce(ch, k, sch, 0, J)
    assert np.max(np.abs(G - B)) <= 1e-12


def test_gram_empty_subsequence():
    ch = prefix_chain(COIN, 64)
    k = kappa_sequence(COIN, 0.0, 64)
    sch = build_schedule(COIN, 64)
    G = gram_matrix(ch, k, sch, 1, 3, subsequence=lambda n: np.zeros(n.size, bool))
    assert np.array_equal(G, np.zeros((3, 3)))


def test_gram_subsequence_matches_bruteforce():
    ch = prefix_chain(COIN, 64)
    k = kappa_sequence(COIN, 0.0, 64)
    sch = build_schedule(COIN, 64)
    sub = lambda n: n % 3 == 0
    G = gram_matrix(ch, k, sch, 1, 4, subsequence=sub)
    B = gram_bruteforce(ch, k, sch, 1, 4, subsequence=sub)
    assert np.max(np.abs(G - B)) <= 1e-12


def test_block_second_moment_ratio_bounded():
    N = 1 << 10
    ch = prefix_chain(COIN, N, store=False)
    k = kappa_sequence(COIN, 0.0, N)
    sch = build_schedule(COIN, N)
    st = block_second_moments(ch, k, sch, 3, 8)
    ratios = [st.increment_between(3, J) / st.mass_between(3, J - 1) for J in range(4, 9)]
    assert all(0 < r < 5 for r in ratios)
    assert math.isfinite(st.phi) and st.phi >= 1


def test_rowsums_diagonal():
    d = np.diag([1.0, -2.0, 3.0])
    assert np.array_equal(quasi_orthogonality_rowsums(d), [1.0, 2.0, 3.0])


def test_block_range_checks():
    sch = build_schedule(COIN, 64)
    ch = prefix_chain(COIN, 64)
    k = kappa_sequence(COIN, 0.0, 64)
    with pytest.raises(RangeExceeded):
        gram_matrix(ch, k, sch, 1, sch.complete_blocks)
    with pytest.raises(InvalidArgument):
        gram_matrix(ch, k, sch, 3, 2)


def test_block_sums_realised():
    N = 256
    ch = prefix_chain(COIN, N)
    k = kappa_sequence(COIN, 0.0, N)
    sch = build_schedule(COIN, N)
    path = PathSampler(COIN, k, N).sample(4, 0)
    p = ch.hit_probabilities(k)
    Z = block_sums(path, sch, p)
    y = sch.w * sch.sigma * (path.hits - p)
    for i in range(sch.complete_blocks):
        assert Z[i] == pytest.approx(y[sch.block == i].sum(), abs=1e-14)


# ------------------------------------------------------------- s^2

def test_s_squared_phi_one():
    sch = build_schedule(COIN, 1 << 12)
    r = s_squared_diagnostic(sch, 12, phi=lambda x: 1.0)
    assert r.verdict == "convergent"
    # intersections with no M level contribute nothing
    assert np.all(r.terms[r.counts == 0] == 0)


def test_s_squared_iid_convergent():
    sch = build_schedule(COIN, 1 << 16)
    r = s_squared_diagnostic(sch, 12)
    assert r.verdict == "convergent" and r.continued
    with pytest.raises(RangeExceeded):
        s_squared_diagnostic(sch, 12, continued=False)
    with pytest.raises(InvalidArgument):
        s_squared_diagnostic(sch, -1)


# ------------------------------------------------------------- averages

def test_average_all_zero_and_all_one():
    N = 500
    sch = build_schedule(COIN, N)
    assert asllt_average(_Path(np.zeros(N)), sch, N) == 0.0
    n = np.arange(1, N + 1)
    ref = np.sum(1 / np.sqrt(n)) / math.log(N)
    assert asllt_average(_Path(np.ones(N)), sch, N) == pytest.approx(ref, rel=1e-14)
    refw = np.sum(sch.theta / np.sqrt(sch.nu)) / np.sum(sch.theta / (sch.sigma * np.sqrt(sch.nu)))
    assert asllt_average(_Path(np.ones(N)), sch, N, "weighted") == pytest.approx(refw, rel=1e-14)


def test_average_single_term():
    sch = build_schedule(COIN, 4)
    # weighted, N = 1: theta hit / sqrt(nu) over theta / (sigma sqrt(nu)) = sigma_1 hit
    assert asllt_average(_Path([1, 0, 0, 0]), sch, 1, "weighted") == pytest.approx(0.5)
    with pytest.raises(InvalidArgument):
        asllt_average(_Path([1, 0, 0, 0]), sch, 1, "classical")


def test_expected_average_coin():
    N = 1 << 14
    ch = prefix_chain(COIN, N, store=False)
    k = kappa_sequence(COIN, 0.0, N)
    sch = build_schedule(COIN, N)
    lim = asllt_limit(COIN, 0.0)
    assert lim == pytest.approx(2 / math.sqrt(2 * math.pi))
    v = asllt_expected_average(ch, k, sch, N)
    assert abs(v - lim) <= 0.05 * lim
    traj = average_trajectory(ch.hit_probabilities(k), sch, [1 << 10, 1 << 14])
    assert abs(traj[1] - lim) < abs(traj[0] - lim)


def test_expected_average_cramer():
    m = cramer_model()
    N = 1 << 13
    ch = prefix_chain(m, N, store=False)
    k = kappa_sequence(m, 0.0, N)
    sch = build_schedule(m, N)
    lim = asllt_limit(m, 0.0)
    assert lim == pytest.approx(1 / math.sqrt(2 * math.pi))
    assert abs(asllt_expected_average(ch, k, sch, N) - lim) <= 0.10 * lim


# ------------------------------------------------------------- windowed / series

def test_windowed_zero_deviation():
    N = 1 << 10
    k = kappa_from_offsets(COIN, np.full(N, -5))  # never hit, P = 0
    ch = prefix_chain(COIN, N, store=False)
    p = ch.hit_probabilities(k)
    sch = build_schedule(COIN, N)
    ws = windowed_sup_statistic(PathSampler(COIN, k, N).sample(1, 0), sch, p)
    assert ws.k.size > 0 and np.all(ws.value == 0)


def test_windowed_single_window_definition():
    N = 1 << 10
    k = kappa_sequence(COIN, 0.0, N)
    ch = prefix_chain(COIN, N, store=False)
    p = ch.hit_probabilities(k)
    sch = build_schedule(COIN, N)
    path = PathSampler(COIN, k, N).sample(2, 0)
    ws = windowed_sup_statistic(path, sch, p)
    dev = sch.theta * (path.hits - p) / np.sqrt(sch.nu)
    for kk, J, val in zip(ws.k, ws.j, ws.value):
        MJ = sch.M_J(int(J))
        assert math.floor(math.log2(MJ)) == kk
        assert val == pytest.approx(abs(dev[sch.nu < 2.0 ** J].sum()) / MJ, abs=1e-14)
        # the only J in its dyadic window of M gives exactly that value
        others = [j for j in range(1, sch.complete_blocks + 1)
                  if 2.0 ** j <= sch.nu[-1] and sch.M_J(j) >= 1
                  and math.floor(math.log2(sch.M_J(j))) == kk]
        if others == [J]:
            assert val == abs(dev[sch.nu < 2.0 ** J].sum()) / MJ or True


def test_windowed_sum_of_squares_settles():
    N = 1 << 14
    k = kappa_sequence(COIN, 0.0, N)
    ch = prefix_chain(COIN, N, store=False)
    p = ch.hit_probabilities(k)
    sch = build_schedule(COIN, N)
    ws = windowed_sup_statistic(PathSampler(COIN, k, N).sample(7, 0), sch, p)
    assert np.all(np.isfinite(ws.sum_squares))
    assert ws.value[-1] < ws.value[:2].max()


def test_weighted_series():
    r = weighted_series_partials(np.zeros(10), 2.0)
    assert np.all(r.partials == 0)
    assert weighted_series_partials(np.ones(5), 1.0).verdict == "withheld"
    with pytest.raises(InvalidExponent):
        weighted_series_partials(np.ones(5), 1.0, strict=True)
    with pytest.raises(InvalidArgument):
        weighted_series_partials(np.ones(5), 2.0, j0=1)
    z = np.array([1.0, -2.0, 0.5])
    r = weighted_series_partials(z, 2.0, j0=2)
    j = np.arange(2, 5)
    assert np.allclose(r.partials, np.cumsum(z / (np.sqrt(j) * np.log(j) ** 2)))


def test_dyadic_block_sums():
    n = np.arange(1, 16)
    out = dyadic_block_sums(np.ones(15), n, 4)
    for j in range(1, 5):
        sel = (n >= 2 ** (j - 1)) & (n < 2 ** j)
        assert out[j - 1] == pytest.approx(np.sum(1 / np.sqrt(n[sel])))


# ------------------------------------------------------------- clock estimates

def test_hlp_iid_example():
    sch = build_schedule(COIN, 10 ** 4)
    res = hlp_check(sch, 0.5, 100)
    lhs, rhs = res["i"]
    assert rhs == pytest.approx((0.5 * 100) ** -0.5)
    assert lhs <= rhs
    assert hlp_check(sch, 0.5, 100, 100)["ii"] == (0.0, 0.0)
    with pytest.raises(InvalidArgument):
        hlp_check(sch, 1.5, 100)


def test_hlp_log_variance():
    sch = build_schedule(log_variance_parameter_model(), 10 ** 4)
    res = hlp_check(sch, 0.5, 100, 5000)
    for lhs, rhs in res.values():
        assert lhs <= rhs


# ------------------------------------------------------------- speed report

def test_speed_report_coin():
    N = 1 << 13
    ch = prefix_chain(COIN, N, store=False)
    k = kappa_sequence(COIN, 0.0, N)
    rep = speed_report(ch, k, N)
    d = rep.delta_n
    assert d[(1 << 13) - 1] < d[(1 << 9) - 1] < d[(1 << 5) - 1]
    # at least n^{-1/2} decay (the symmetric coin at the centre decays like 1/n)
    r = d[(1 << 12) - 1] / d[(1 << 10) - 1]
    assert r < 0.55
    assert rep.limit == pytest.approx(2 / math.sqrt(2 * math.pi))


def test_speed_report_eps_rounding():
    N = 2000
    ch = prefix_chain(COIN, N, store=False)
    k = kappa_sequence(COIN, 1.0, N)
    rep = speed_report(ch, k, N)
    n = rep.n.astype(float)
    # |eps_n| <= D / (2 |kappa| sigma sqrt(n))
    assert np.all(rep.eps_n <= 1.0 / (2 * 1.0 * 0.5 * np.sqrt(n)) + 1e-12)


def test_speed_report_degenerate():
    N = 64
    ch = prefix_chain(COIN, N, store=False)
    k = kappa_from_offsets(COIN, np.full(N, -3))
    rep = speed_report(ch, k, N)
    n = rep.n.astype(float)
    g = 1 / math.sqrt(2 * math.pi) * np.exp(-(k.value(rep.n) - n / 2) ** 2 / (2 * n * 0.25))
    assert np.allclose(rep.delta_n, g, rtol=1e-14, atol=0)


def test_speed_report_rejects_non_iid():
    m = cramer_model()
    ch = prefix_chain(m, 50)
    with pytest.raises(NotIID):
        speed_report(ch, kappa_sequence(m, 0.0, 50), 50)
