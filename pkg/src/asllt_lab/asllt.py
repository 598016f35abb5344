"""Weights, block sums, series diagnostics and almost sure local limit averages."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .errors import (DivergenceViolated, InvalidArgument, InvalidExponent, NotIID,
                     RangeExceeded)
from .lattice import SQRT_2PI

# omega sums are extended from the step parameters up to this index
_EXTEND_CAP = 20_000_000
# exact leading terms of omega before a closed-form tail takes over
_OMEGA_EXACT = 4096


def _block_index(nu: np.ndarray, R: float) -> np.ndarray:
    """floor(log_R nu) for nu >= 1, -1 below; corrected at exact powers of R."""
    out = np.full(nu.shape, -1, dtype=np.int64)
    ok = nu >= 1.0
    i = np.floor(np.log(nu[ok]) / math.log(R)).astype(np.int64)
    i[R ** (i + 1.0) <= nu[ok]] += 1
    i[R ** i.astype(float) > nu[ok]] -= 1
    out[ok] = i
    return out


class WeightSchedule:
    """Per-step weights w_n = theta_n / (sigma_n sqrt(nu_n)) and everything built on them.

    ``M(t)`` sums w_n over 1 <= nu_n < t, block i collects the n with
    R^i <= nu_n < R^(i+1) (block 0 included, so M(R^J) equals the sum of the
    first J block masses), ``h(t)`` is the running maximum of var_n/nu_n over
    nu_n <= t.
    """

    def __init__(self, model, N: int, R: float = 2.0, assume_divergent: bool = False):
        if R <= 1:
            raise InvalidArgument("block base R must exceed 1")
        if N < model.start_index:
            raise InvalidArgument(f"N={N} precedes the model start {model.start_index}")
        self.model = model
        self.N = int(N)
        self.R = float(R)
        self.D = model.spec.D
        self.start = model.start_index
        self._set_arrays(self.N)
        self.n = self._n
        self.theta = self._theta
        self.nu = self._nu
        self.var = self._var
        self.sigma = np.sqrt(self.var)
        self.a = self._a
        self.w = self.theta / (self.sigma * np.sqrt(self.nu))
        self.ratio = self.var / self.nu
        self.h_run = np.maximum.accumulate(self.ratio)
        self.valid = self.nu >= 1.0
        self.block = _block_index(self.nu, self.R)
        wv = np.where(self.valid, self.w, 0.0)
        self._Mcum = np.concatenate(([0.0], np.cumsum(wv)))
        top = self.nu[-1]
        # block i is complete once nu_N >= R^(i+1)
        nb = int(self.block.max()) + 1 if self.valid.any() else 0
        self.complete_blocks = sum(1 for i in range(nb) if self.R ** (i + 1) <= top)
        self.m = np.array([wv[self.block == i].sum() for i in range(nb)])
        self._omega_cache: dict[int, float] = {}
        if assume_divergent:
            self.check_divergence()

    # ------------------------------------------------------------ arrays
    def _set_arrays(self, upto: int) -> None:
        n = np.arange(self.start, upto + 1)
        p = self.model.step_parameters(n)
        self._n = n
        self._theta = np.asarray(p.theta, dtype=float)
        self._nu = np.cumsum(self._theta)
        self._var = np.cumsum(p.var)
        self._a = np.cumsum(p.mean) if p.mean is not None else np.full(n.size, np.nan)

    def _extended(self, upto: int):
        """(nu, var, theta) for steps start..upto, recomputed from the model."""
        if upto <= self.N:
            k = upto - self.start + 1
            return self.nu[:k], self.var[:k], self.theta[:k]
        if upto > _EXTEND_CAP:
            raise RangeExceeded(f"index {upto} beyond the extension cap")
        cached = getattr(self, "_ext", None)
        if cached is None or cached[0] < upto:
            size = max(upto, 2 * (cached[0] if cached else self.N))
            size = min(size, _EXTEND_CAP)
            n = np.arange(self.start, size + 1)
            p = self.model.step_parameters(n)
            th = np.asarray(p.theta, dtype=float)
            self._ext = (size, np.cumsum(th), np.cumsum(p.var), th)
            cached = self._ext
        k = upto - self.start + 1
        return cached[1][:k], cached[2][:k], cached[3][:k]

    def __len__(self):
        return self.n.size

    def index(self, n: int) -> int:
        i = int(n) - self.start
        if i < 0 or i >= self.n.size:
            raise RangeExceeded(f"n={n} outside schedule range [{self.start}, {self.N}]")
        return i

    # ---------------------------------------------------------- M, blocks
    def M(self, t: float) -> float:
        """Sum of w_n over 1 <= nu_n < t."""
        if t > self.nu[-1]:
            raise RangeExceeded(f"M({t}) needs nu beyond {self.nu[-1]:.6g}")
        return float(self._Mcum[np.searchsorted(self.nu, t, side="left")])

    def M_J(self, J: int) -> float:
        if J > self.complete_blocks:
            raise RangeExceeded(f"M_{J} needs {J} complete blocks, have {self.complete_blocks}")
        return float(self.m[:J].sum())

    def M_inverse(self, x: float) -> float:
        """sup{t >= 1 : M(t) <= x}, i.e. the nu level of the first step pushing M above x."""
        if x < 0:
            raise InvalidArgument("M^{-1} is defined for x >= M(1) = 0")
        cum = self._Mcum[1:]
        k = int(np.searchsorted(cum, x, side="right"))
        if k >= cum.size or not self.valid[k]:
            raise RangeExceeded(f"M^-1({x}) lies beyond the computed range")
        return float(self.nu[k])

    def block_of(self, n: int) -> int:
        return int(self.block[self.index(n)])

    def block_members(self, i: int) -> np.ndarray:
        return self.n[self.block == i]

    def check_divergence(self) -> None:
        """Heuristic growth test for sum_n w_n over dyadic index windows.

        A divergent series of the slowly growing kind seen here keeps adding
        at least ~1/k in the k-th dyadic window; a much faster decay of the
        window contributions is reported as a violation.
        """
        k_last = int(math.log2(self.N))
        if k_last < 4:
            return
        lo, hi = 2 ** (k_last - 1), 2 ** k_last
        sel = (self.n >= lo) & (self.n < hi)
        c = float(self.w[sel].sum())
        if c * k_last < 0.1:
            raise DivergenceViolated(f"weights add only {c:.3g} over n in [{lo}, {hi})")

    # ---------------------------------------------------------- h, omega, Phi
    def h(self, t: float) -> float:
        """max of var_m / nu_m over nu_m <= t."""
        k = int(np.searchsorted(self.nu, t, side="right"))
        if k == 0:
            return float(self.ratio[0])
        if t > self.nu[-1]:
            raise RangeExceeded(f"h({t}) needs nu beyond {self.nu[-1]:.6g}")
        return float(self.h_run[k - 1])

    def omega(self, m: int, extend: bool = False) -> float:
        return omega_weight(self, m, extend=extend)

    def omega_star(self, t: float, extend: bool = False, dense: int = 2048, grid: int = 256) -> float:
        """max(1, omega(m)) over nu_m <= t: every m up to ``dense``, a geometric grid above."""
        k = int(np.searchsorted(self.nu, t, side="right"))
        if k == 0:
            return 1.0
        ms = self.n[:k]
        if ms.size > dense:
            tail = np.unique(np.geomspace(ms[dense], ms[-1], grid).astype(np.int64))
            ms = np.concatenate((ms[:dense], tail))
        return max(1.0, max(omega_weight(self, int(m), extend=extend) for m in ms))

    def k(self, t: float, extend: bool = False) -> float:
        return self.h(t) * self.omega_star(t, extend=extend)

    def Phi(self, x: float, extend: bool = False) -> float:
        """k evaluated at M^{-1}(x); omega enters through its running maximum."""
        return self.k(self.M_inverse(x), extend=extend)

    def continuum(self):
        """The model's var/nu profile as a function of log nu, if it has one."""
        return getattr(self.model, "var_nu_ratio", None)


def build_schedule(model, N: int, R: float = 2.0, assume_divergent: bool = False) -> WeightSchedule:
    return WeightSchedule(model, N, R, assume_divergent)


# ------------------------------------------------------------------ omega

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(32)


def _omega_tail_closed(model, m: int, nu_m: float, var_m: float, lo: int, hi: int,
                       segments: int = 16) -> float:
    """Integral form of sum_{lo <= n <= hi}, from closed forms.

    Gauss-Legendre in u = log x on equal segments; the integrand is smooth
    there because lo > m keeps var(x) - var_m away from zero.
    """
    e = np.linspace(math.log(lo - 0.5), math.log(hi + 0.5), segments + 1)
    a, b = e[:-1, None], e[1:, None]
    u = ((a + b) / 2 + (b - a) / 2 * _GL_NODES).ravel()
    wt = ((b - a) / 2 * _GL_WEIGHTS).ravel()
    x = np.exp(u)
    dv = np.maximum(model.var_cum(x) - var_m, 1e-300)
    f = np.asarray(model._theta(x), dtype=float) / (np.sqrt(dv) * np.sqrt(model.nu_cum(x)))
    return float(np.sum(wt * x * f))


def omega_weight(schedule: WeightSchedule, m: int, extend: bool = False) -> float:
    """Sum over nu_m < nu_n < 2 nu_m of theta_n / (sqrt(var_n - var_m) sqrt(nu_n))."""
    key = int(m)
    if key in schedule._omega_cache:
        return schedule._omega_cache[key]
    model = schedule.model
    i = key - schedule.start
    if i < 0:
        raise RangeExceeded(f"m={m} precedes the model start {schedule.start}")
    if i < schedule.n.size:
        nu_m, var_m = schedule.nu[i], schedule.var[i]
    elif extend:
        nu_e, var_e, _ = schedule._extended(key)
        nu_m, var_m = nu_e[i], var_e[i]
    else:
        raise RangeExceeded(f"m={m} outside schedule range [{schedule.start}, {schedule.N}]")
    if schedule.nu[-1] >= 2 * nu_m:
        nu, var, th = schedule.nu, schedule.var, schedule.theta
        end = int(np.searchsorted(nu, 2 * nu_m, side="left"))
        val = _omega_slice(nu, var, th, i, end, nu_m, var_m)
    elif not extend:
        raise RangeExceeded(f"omega({m}) needs nu up to {2 * nu_m:.6g}, have {schedule.nu[-1]:.6g}")
    elif getattr(model, "nu_cum", None) is not None and getattr(model, "var_cum", None) is not None:
        # last n with nu_n < 2 nu_m from the closed form
        hi = _last_below(model.nu_cum, 2 * nu_m, m)
        cut = min(hi, m + _OMEGA_EXACT)
        nu, var, th = schedule._extended(cut) if cut <= _EXTEND_CAP else (None, None, None)
        if nu is None:
            raise RangeExceeded("omega window too large")
        val = _omega_slice(nu, var, th, i, nu.size, nu_m, var_m)
        if hi > cut:
            val += _omega_tail_closed(model, m, nu_m, var_m, cut + 1, hi)
    else:
        probe = schedule.N
        while True:
            probe = min(2 * probe, _EXTEND_CAP)
            nu, var, th = schedule._extended(probe)
            if nu[-1] >= 2 * nu_m:
                break
            if probe == _EXTEND_CAP:
                raise RangeExceeded(f"omega({m}) window exceeds the extension cap")
        end = int(np.searchsorted(nu, 2 * nu_m, side="left"))
        val = _omega_slice(nu, var, th, i, end, nu_m, var_m)
    schedule._omega_cache[key] = val
    return val


def _omega_slice(nu, var, th, i, end, nu_m, var_m) -> float:
    sl = slice(i + 1, end)
    sel = nu[sl] > nu_m
    dv = var[sl][sel] - var_m
    return float(np.sum(th[sl][sel] / (np.sqrt(dv) * np.sqrt(nu[sl][sel]))))


def _last_below(nu_cum: Callable, level: float, m: int) -> int:
    lo = m
    hi = max(2 * m, m + 1)
    while nu_cum(float(hi)) < level:
        lo, hi = hi, 2 * hi
        if hi > 1e300:
            raise RangeExceeded("omega window unbounded")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if nu_cum(float(mid)) < level:
            lo = mid
        else:
            hi = mid
    return lo


def omega_profile(schedule: WeightSchedule, m_max: int, extend: bool = True) -> tuple[np.ndarray, np.ndarray]:
    ms = np.arange(schedule.start, m_max + 1)
    return ms, np.array([omega_weight(schedule, int(m), extend=extend) for m in ms])


def continuum_omega(ratio: Callable[[float], float], v: float) -> float:
    """omega in the smooth limit, var = nu * ratio(log nu), at nu = e^v."""
    r0 = ratio(v)

    def f(y):
        # s = y^2 removes the inverse square-root singularity at s = 0
        s = y * y
        g = (1 + s) * ratio(v + math.log1p(s)) - r0
        return 2 * y / (math.sqrt(max(g, 1e-300)) * math.sqrt(1 + s))

    val, _ = integrate.quad(f, 0.0, 1.0, limit=200)
    return val


# ---------------------------------------------------------------- blocks

@dataclass
class BlockStats:
    """Exact second moments E Z_i Z_j for blocks I..J (rows/columns in that order)."""

    blocks: np.ndarray
    gram: np.ndarray
    m: np.ndarray
    increment: float
    rhs: float
    ratio: float
    phi: float
    coef_sum: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def I(self):
        return int(self.blocks[0])

    @property
    def J(self):
        return int(self.blocks[-1])

    def increment_between(self, I: int, J: int) -> float:
        """E|sum_{I <= i < J} Z_i|^2."""
        a, b = I - self.I, J - self.I
        if a < 0 or b > self.blocks.size or a > b:
            raise RangeExceeded("block range outside the computed matrix")
        return float(self.gram[a:b, a:b].sum())

    def mass_between(self, I: int, J: int) -> float:
        """sum_{I <= i <= J} m_i."""
        a, b = I - self.I, J - self.I
        return float(self.m[a:b + 1].sum())


def _support_bounds(model, n: np.ndarray):
    p = model.step_parameters(n)
    return np.cumsum(p.kmin), np.cumsum(p.kmax)


def block_coefficients(chain, schedule: WeightSchedule, I: int, J: int,
                       subsequence: Optional[Callable] = None):
    """(n, column, c_n = w_n sigma_n) for steps in blocks I..J, optionally filtered."""
    if I < 0 or J < I:
        raise InvalidArgument("need 0 <= I <= J")
    if J >= schedule.complete_blocks:
        raise RangeExceeded(f"block {J} is not complete within the schedule range")
    sel = (schedule.block >= I) & (schedule.block <= J)
    if subsequence is not None:
        mask = np.asarray(subsequence(schedule.n), dtype=bool)
        sel &= mask
    n = schedule.n[sel]
    col = schedule.block[sel] - I
    c = (schedule.w * schedule.sigma)[sel]
    if n.size and n[-1] > chain.N:
        raise RangeExceeded(f"blocks up to {J} need the chain up to n={n[-1]}")
    return n, col, c


def gram_matrix(chain, kappa, schedule: WeightSchedule, I: int, J: int,
                subsequence: Optional[Callable] = None, tail_sigmas: float = 12.0,
                tail_steps: int = 64) -> np.ndarray:
    """Exact E Z_i Z_j, i, j in I..J, through a backward recursion.

    H_m(x) = sum_{n > m} c_n P{S_n = kappa_n | S_m = x} is propagated one
    step at a time, one column per target block, on a window of
    +-(tail_sigmas + |z|) sigma_n + tail_steps lattice steps around the mean.
    """
    C = J - I + 1
    n_sel, col, c = block_coefficients(chain, schedule, I, J, subsequence)
    G = np.zeros((C, C))
    if n_sel.size == 0:
        return G
    p_all = chain.hit_probabilities(kappa)
    ci = n_sel - chain.start
    p = p_all[ci]
    a_coef = c * p
    A = np.bincount(col, weights=a_coef, minlength=C)
    diag_self = np.bincount(col, weights=c * c * p, minlength=C)

    n_lo, n_hi = int(n_sel[0]), int(n_sel[-1])
    steps = np.arange(chain.start, n_hi + 1)
    kmin_cum, kmax_cum = _support_bounds(chain.model, steps)
    offs = kappa.offsets_for(steps)
    D = chain.spec.D
    sig = chain.sigma[: steps.size]
    center = (chain.a[: steps.size] - chain.origin[: steps.size]) / D
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sig > 0, np.abs(offs - center) * D / sig, 0.0)
    zmax = float(np.max(z[n_lo - chain.start:])) if steps.size else 0.0
    half = (tail_sigmas + zmax) * sig / D + tail_steps
    lo_w = np.maximum(kmin_cum, np.floor(center - half).astype(np.int64))
    hi_w = np.minimum(kmax_cum, np.ceil(center + half).astype(np.int64))
    lo_w = np.minimum(lo_w, offs)
    hi_w = np.maximum(hi_w, offs)

    coef = np.zeros((steps.size, C))
    coef[ci, col] = c
    in_sel = np.zeros(steps.size, dtype=bool)
    in_sel[ci] = True
    col_of = np.full(steps.size, -1, dtype=np.int64)
    col_of[ci] = col

    J_mat = np.zeros((C, C))
    t = steps.size - 1
    H = np.zeros((hi_w[t] - lo_w[t] + 1, C))
    while t >= n_lo - chain.start:
        if in_sel[t]:
            row = H[offs[t] - lo_w[t]]
            J_mat[col_of[t]] += coef[t].sum() * p_all[t] * row
        if t == n_lo - chain.start:
            break
        # fold in the hit weight of step t, then pull back one step
        Gt = H
        if coef[t].any():
            Gt = H.copy()
            Gt[offs[t] - lo_w[t]] += coef[t]
        f = chain.model.marginal(int(steps[t]))
        lo_new, hi_new = lo_w[t - 1], hi_w[t - 1]
        Hn = np.zeros((hi_new - lo_new + 1, C))
        width_src = Gt.shape[0]
        for s, ft in enumerate(f.mass):
            if ft == 0.0:
                continue
            shift = lo_new + f.k_min + s - lo_w[t]
            d0 = max(0, -shift)
            d1 = min(Hn.shape[0], width_src - shift)
            if d1 > d0:
                Hn[d0:d1] += ft * Gt[d0 + shift:d1 + shift]
        H = Hn
        t -= 1
    for i in range(C):
        for j in range(i + 1, C):
            G[i, j] = J_mat[i, j] - A[i] * A[j]
            G[j, i] = G[i, j]
        G[i, i] = diag_self[i] + 2.0 * J_mat[i, i] - A[i] ** 2
    return G


def block_second_moments(chain, kappa, schedule: WeightSchedule, I: int, J: int,
                         subsequence: Optional[Callable] = None, with_phi: bool = True,
                         **kw) -> BlockStats:
    G = gram_matrix(chain, kappa, schedule, I, J, subsequence, **kw)
    blocks = np.arange(I, J + 1)
    if subsequence is None:
        m = schedule.m[I:J + 1].copy()
    else:
        mask = np.asarray(subsequence(schedule.n), dtype=bool)
        wv = np.where(schedule.valid & mask, schedule.w, 0.0)
        m = np.array([wv[schedule.block == i].sum() for i in blocks])
    inc = float(G[:-1, :-1].sum()) if G.shape[0] > 1 else 0.0
    phi = float("nan")
    if with_phi:
        try:
            phi = schedule.Phi(schedule.M_J(J), extend=True)
        except RangeExceeded:
            pass
    mass = float(m.sum())
    rhs = phi * mass
    ratio = inc / rhs if rhs > 0 else float("nan")
    return BlockStats(blocks, G, m, inc, rhs, ratio, phi)


def gram_bruteforce(chain, kappa, schedule: WeightSchedule, I: int, J: int,
                    subsequence: Optional[Callable] = None) -> np.ndarray:
    """Pairwise double sum of exact covariances; the reference for small ranges."""
    from .correlation import correlation_Y, variance_Y
    C = J - I + 1
    n_sel, col, c = block_coefficients(chain, schedule, I, J, subsequence)
    G = np.zeros((C, C))
    w = c / chain.sigma[n_sel - chain.start]  # w_n
    for a in range(n_sel.size):
        G[col[a], col[a]] += w[a] ** 2 * variance_Y(chain, kappa, int(n_sel[a]))
        for b in range(a + 1, n_sel.size):
            v = w[a] * w[b] * correlation_Y(chain, kappa, int(n_sel[a]), int(n_sel[b]))
            G[col[a], col[b]] += v
            G[col[b], col[a]] += v
    return G


def quasi_orthogonality_rowsums(stats) -> np.ndarray:
    G = stats.gram if isinstance(stats, BlockStats) else np.asarray(stats)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise InvalidArgument("need a square matrix")
    return np.abs(G).sum(axis=1)


def block_sums(path, schedule: WeightSchedule, p_hit: np.ndarray, n_blocks: Optional[int] = None) -> np.ndarray:
    """Realised Z_i = sum over block i of w_n sigma_n (hit_n - P{S_n = kappa_n})."""
    k = min(len(path), schedule.n.size, p_hit.size)
    nb = schedule.complete_blocks if n_blocks is None else n_blocks
    y = (schedule.w * schedule.sigma)[:k] * (path.hits[:k] - p_hit[:k])
    blk = schedule.block[:k]
    ok = (blk >= 0) & (blk < nb)
    return np.bincount(blk[ok], weights=y[ok], minlength=nb)[:nb]


# ---------------------------------------------------------- s^2 diagnostic

@dataclass
class SeriesDiagnostic:
    l: np.ndarray
    counts: np.ndarray
    log_factor: np.ndarray
    phi: np.ndarray
    terms: np.ndarray
    partials: np.ndarray
    tail_share: float
    verdict: str
    continued: bool = False


def _verdict(terms: np.ndarray, partials: np.ndarray) -> tuple[float, str]:
    if partials.size == 0 or partials[-1] == 0:
        return 0.0, "convergent"
    q = max(1, partials.size // 4)
    tail = float(partials[-1] - partials[-q - 1]) if partials.size > q else float(partials[-1])
    share = tail / float(partials[-1])
    nz = np.abs(terms[terms != 0])
    half = nz[nz.size // 2:]
    decreasing = half.size < 2 or bool(np.all(np.diff(half) <= 0))
    if share < 0.05 and decreasing:
        return share, "convergent"
    return share, "inconclusive"


_MAX_LEVELS = 1 << 16


def _M_levels(schedule: WeightSchedule, upto: float, continued: bool):
    """M_J for J >= 1 until M_J >= upto; exact inside the range, continued beyond."""
    out = []
    for J in range(1, schedule.complete_blocks + 1):
        out.append(schedule.M_J(J))
        if out[-1] >= upto:
            return np.array(out), False
    if not continued:
        raise RangeExceeded(f"M reaches only {out[-1] if out else 0:.4g} < {upto:.4g}")
    ratio = schedule.continuum()
    if ratio is None:
        raise RangeExceeded("model has no smooth continuation for M beyond the range")
    # dM = d(log nu) / sqrt(var/nu) beyond the last computed step
    v_prev = math.log(schedule.nu[-1])
    M_prev = float(schedule._Mcum[-1])
    lR = math.log(schedule.R)
    J = schedule.complete_blocks + 1
    while True:
        if len(out) > _MAX_LEVELS:
            raise RangeExceeded(f"more than {_MAX_LEVELS} block levels needed to reach M = {upto:.4g}")
        v = J * lR
        inc, _ = integrate.quad(lambda s: 1.0 / math.sqrt(ratio(s)), v_prev, v)
        M_prev += inc
        v_prev = v
        out.append(M_prev)
        if out[-1] >= upto:
            return np.array(out), True
        J += 1


def _phi_continued(schedule: WeightSchedule, x: float, M_levels: np.ndarray) -> float:
    """Phi(x) with the smooth continuation beyond the computed range."""
    try:
        return schedule.Phi(x, extend=True)
    except RangeExceeded:
        pass
    ratio = schedule.continuum()
    lR = math.log(schedule.R)
    J = int(np.searchsorted(M_levels, x, side="right"))  # M_J <= x < M_{J+1}
    v_t = (J + 1) * lR
    v0 = math.log(schedule.nu[-1])
    grid = np.linspace(v0, max(v_t, v0), 33)
    h = max(float(schedule.h_run[-1]), max(ratio(v) for v in grid))
    # omega: exact part over the range where it is computable, smooth beyond
    top = schedule.nu[-1] / 2
    om = schedule.omega_star(top, extend=True)
    om = max(om, max(continuum_omega(ratio, v) for v in grid))
    return h * om


def s_squared_diagnostic(schedule: WeightSchedule, L_max: int, phi: Optional[Callable] = None,
                         continued: bool = True) -> SeriesDiagnostic:
    """Partial sums of sum_l Phi(2^l) (1 + log #([2^l, 2^(l+1)) cap M)) / 2^l.

    Only l with a non-empty intersection contribute.  When the computed range
    does not reach M = 2^(L_max+1) and ``continued`` is set, M is continued
    with the model's smooth var/nu profile (flagged in the result).
    """
    if L_max < 0:
        raise InvalidArgument("L_max must be >= 0")
    M_levels, was_cont = _M_levels(schedule, 2.0 ** (L_max + 1), continued)
    ls = np.arange(0, L_max + 1)
    counts = np.array([int(np.sum((M_levels >= 2.0 ** l) & (M_levels < 2.0 ** (l + 1)))) for l in ls])
    logf = np.where(counts > 0, 1.0 + np.log(np.maximum(counts, 1)), 0.0)
    phis = np.zeros(ls.size)
    for i, l in enumerate(ls):
        if counts[i] == 0:
            continue
        x = 2.0 ** l
        phis[i] = phi(x) if phi is not None else _phi_continued(schedule, x, M_levels)
    terms = phis * logf / 2.0 ** ls
    partials = np.cumsum(terms)
    share, verdict = _verdict(terms, partials)
    return SeriesDiagnostic(ls, counts, logf, phis, terms, partials, share, verdict, was_cont)


# ---------------------------------------------------------------- averages

def _resolve_norm(model, normalization: str) -> str:
    if normalization == "auto":
        return "classical" if getattr(model, "iid", False) else "weighted"
    if normalization not in ("weighted", "classical"):
        raise InvalidArgument(f"unknown normalization {normalization!r}")
    return normalization


def _average(values: np.ndarray, schedule: WeightSchedule, N: int, norm: str) -> float:
    k = N - schedule.start + 1
    if k < 1:
        raise InvalidArgument(f"N={N} precedes the model start")
    if k > schedule.n.size or k > values.size:
        raise RangeExceeded(f"N={N} beyond the computed range")
    if norm == "classical":
        if N < 2:
            raise InvalidArgument("classical normalization divides by log N; need N >= 2")
        n = schedule.n[:k].astype(float)
        return float(np.sum(values[:k] / np.sqrt(n)) / math.log(N))
    th, nu, sig = schedule.theta[:k], schedule.nu[:k], schedule.sigma[:k]
    return float(np.sum(th * values[:k] / np.sqrt(nu)) / np.sum(th / (sig * np.sqrt(nu))))


def asllt_average(path, schedule: WeightSchedule, N: int, normalization: str = "auto") -> float:
    """Path average of hit indicators up to and including N.

    "weighted": sum theta_n hit_n / sqrt(nu_n) over sum theta_n / (sigma_n sqrt(nu_n)).
    "classical": (1 / log N) sum hit_n / sqrt(n), the i.i.d. form.
    "auto" picks classical for i.i.d. models.
    """
    norm = _resolve_norm(schedule.model, normalization)
    return _average(np.asarray(path.hits, dtype=float), schedule, N, norm)


def asllt_expected_average(chain, kappa, schedule: WeightSchedule, N: int,
                           normalization: str = "auto") -> float:
    """The same average with hit_n replaced by P{S_n = kappa_n}."""
    norm = _resolve_norm(schedule.model, normalization)
    return _average(chain.hit_probabilities(kappa), schedule, N, norm)


def average_trajectory(values: np.ndarray, schedule: WeightSchedule, Ns: Sequence[int],
                       normalization: str = "auto") -> np.ndarray:
    norm = _resolve_norm(schedule.model, normalization)
    return np.array([_average(values, schedule, int(N), norm) for N in Ns])


def asllt_limit(model, kappa: float, normalization: str = "auto") -> float:
    """Limit of the average when sigma_n P{S_n = kappa_n} -> D/sqrt(2 pi) e^{-kappa^2/2}."""
    norm = _resolve_norm(model, normalization)
    g = model.spec.D / SQRT_2PI * math.exp(-kappa * kappa / 2)
    if norm == "weighted":
        return g
    var = model.step_parameters(np.array([model.start_index])).var
    return g / math.sqrt(float(var[0]))


# ------------------------------------------------------- windowed statistic

@dataclass
class WindowedSup:
    k: np.ndarray
    value: np.ndarray
    j: np.ndarray

    @property
    def sum_squares(self) -> np.ndarray:
        return np.cumsum(self.value ** 2)


def windowed_sup_statistic(path, schedule: WeightSchedule, p_hit: np.ndarray) -> WindowedSup:
    """For each k, sup over J with M_J in [2^k, 2^(k+1)) of |partial_J| / M_J.

    partial_J is the sum of theta_n (hit_n - P{S_n = kappa_n}) / sqrt(nu_n)
    over steps with nu_n < R^J.
    """
    k = min(len(path), schedule.n.size, p_hit.size)
    dev = schedule.theta[:k] * (path.hits[:k] - p_hit[:k]) / np.sqrt(schedule.nu[:k])
    cum = np.concatenate(([0.0], np.cumsum(dev)))
    best: dict[int, tuple[float, int]] = {}
    top_nu = schedule.nu[k - 1] if k else 0.0
    for J in range(1, schedule.complete_blocks + 1):
        if schedule.R ** J > top_nu:
            break
        MJ = schedule.M_J(J)
        if MJ < 1:
            continue
        part = cum[int(np.searchsorted(schedule.nu[:k], schedule.R ** J, side="left"))]
        kk = int(math.floor(math.log2(MJ)))
        val = abs(part) / MJ
        if kk not in best or val > best[kk][0]:
            best[kk] = (val, J)
    ks = np.array(sorted(best), dtype=np.int64)
    return WindowedSup(ks, np.array([best[x][0] for x in ks]), np.array([best[x][1] for x in ks]))


# ------------------------------------------------------------- series

@dataclass
class SeriesResult:
    j: np.ndarray
    terms: np.ndarray
    partials: np.ndarray
    b: float
    tail_oscillation: float
    verdict: str


def weighted_series_partials(Z, b: float, j0: int = 2, strict: bool = False) -> SeriesResult:
    """Partial sums of sum_j j^{-1/2} (log j)^{-b} Z_j, with Z[0] standing for j = j0.

    Verdict "withheld" when b <= 3/2 (raises instead with ``strict``).
    """
    Z = np.asarray(Z, dtype=float)
    if j0 < 2:
        raise InvalidArgument("series index starts at j >= 2 (log 1 = 0)")
    if b <= 1.5 and strict:
        raise InvalidExponent(f"b={b} <= 3/2")
    j = np.arange(j0, j0 + Z.size)
    terms = Z / (np.sqrt(j) * np.log(j) ** b)
    partials = np.cumsum(terms)
    q = max(1, partials.size // 4)
    tail = partials[-q:] if partials.size else partials
    osc = float(tail.max() - tail.min()) if tail.size else 0.0
    if b <= 1.5:
        verdict = "withheld"
    else:
        scale = max(float(np.max(np.abs(partials))) if partials.size else 0.0, 1e-300)
        verdict = "convergent" if osc <= 0.05 * scale or osc == 0 else "inconclusive"
    return SeriesResult(j, terms, partials, float(b), osc, verdict)


def dyadic_block_sums(values: np.ndarray, n: np.ndarray, j_max: int, center: Optional[np.ndarray] = None,
                      offset: int = 0) -> np.ndarray:
    """sum over 2^(j-1+offset) <= n < 2^(j+offset) of (values_n - center_n)/sqrt(n), j = 1..j_max."""
    x = np.asarray(values, dtype=float)
    if center is not None:
        x = x - center
    y = x / np.sqrt(n)
    out = np.zeros(j_max)
    for j in range(1, j_max + 1):
        lo, hi = 2 ** (j - 1 + offset), 2 ** (j + offset)
        sel = (n >= lo) & (n < hi)
        out[j - 1] = y[sel].sum()
    return out


# ------------------------------------------------------------- clock estimates

def hlp_check(schedule: WeightSchedule, delta: float, N: int, M: Optional[int] = None) -> dict:
    """Two elementary estimates on the clock nu_n.

    (i)  sum_{n > N} delta theta_n / (nu_{n-1}^delta nu_n) <= nu_N^{-delta};
         the sum is truncated at the schedule end (a lower bound of the full sum).
    (ii) |sum_{N < n <= M} theta_n / nu_n| <= |log nu_M - log nu_N|.
    """
    if not 0 < delta < 1:
        raise InvalidArgument("delta must lie in (0, 1)")
    i = schedule.index(N)
    nu, th = schedule.nu, schedule.theta
    lhs1 = float(np.sum(delta * th[i + 1:] / (nu[i:-1] ** delta * nu[i + 1:])))
    out = {"i": (lhs1, float(nu[i] ** -delta))}
    if M is not None:
        j = schedule.index(M)
        if j < i:
            raise InvalidArgument("need M >= N")
        if nu[i] <= math.e:
            raise InvalidArgument("estimate (ii) needs nu_N > e")
        lhs2 = float(abs(np.sum(th[i + 1:j + 1] / nu[i + 1:j + 1])))
        out["ii"] = (lhs2, float(abs(math.log(nu[j]) - math.log(nu[i]))))
    return out


# ------------------------------------------------------------- speed report

@dataclass
class SpeedReport:
    n: np.ndarray
    delta_n: np.ndarray
    eps_n: np.ndarray
    J: np.ndarray
    ratio: np.ndarray
    limit: float
    error: np.ndarray
    big_o_term: np.ndarray
    small_o_term: np.ndarray
    summability_partials: np.ndarray


def speed_report(chain, kappa, N: int, b: float = 2.0) -> SpeedReport:
    """Rate diagnostics for the i.i.d. average sum n^{-1/2} hit_n / sum 1/n."""
    model = chain.model
    if not getattr(model, "iid", False):
        raise NotIID("the rate report applies to i.i.d. models only")
    k = N - chain.start + 1
    if k > chain.n.size:
        raise RangeExceeded(f"N={N} beyond the chain")
    n = chain.n[:k].astype(float)
    mu = float(chain.step_mean[0])
    sig = math.sqrt(float(chain.step_var[0]))
    D = chain.spec.D
    p = chain.hit_probabilities(kappa)[:k]
    kv = kappa.value(chain.n[:k])
    dev = kv - n * mu
    delta = np.abs(sig * np.sqrt(n) * p - D / SQRT_2PI * np.exp(-dev ** 2 / (2 * n * sig * sig)))
    kraw = kappa.target * sig if math.isfinite(kappa.target) else 0.0
    if kraw != 0:
        eps = np.abs(dev / (kraw * np.sqrt(n)) - 1.0)
    else:
        eps = np.abs(dev) / np.sqrt(n)
    limit = D / (sig * SQRT_2PI) * math.exp(-kraw ** 2 / (2 * sig * sig))
    Jmax = int(math.floor(math.log2(N + 1))) - 1
    Js = np.arange(1, Jmax + 1)
    ratio = np.empty(Js.size)
    big = np.empty(Js.size)
    small = np.empty(Js.size)
    for t, J in enumerate(Js):
        sel = n < 2 ** (J + 1)
        ratio[t] = np.sum(p[sel] / np.sqrt(n[sel])) / np.sum(1.0 / n[sel])
        big[t] = np.sum((delta[sel] + eps[sel]) / n[sel]) / J
        small[t] = math.log(J) ** b / math.sqrt(J) if J > 1 else float("nan")
    terms = []
    for j in range(2, Jmax + 1):
        sel = (n >= 2 ** j) & (n < 2 ** (j + 1))
        terms.append(np.sum((delta[sel] + eps[sel]) / n[sel]) / (math.sqrt(j) * math.log(j) ** b))
    return SpeedReport(chain.n[:k], delta, eps, Js, ratio, limit, np.abs(ratio - limit), big, small,
                       np.cumsum(terms))
