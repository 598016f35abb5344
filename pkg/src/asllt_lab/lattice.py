"""Probability laws on an arithmetic lattice v0 + D*k and sums of independent steps."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import gammaln

from .errors import (DegenerateVariance, IncompatibleLattice, InvalidArgument,
                     InvalidModulus, MassBudgetExceeded)

# entries below PRUNE_REL * total mass are dropped after each convolution
PRUNE_REL = 1e-18
MASS_BUDGET = 1e-12
NORM_TOL = 1e-12
SUP_PAD = 10
SQRT_2PI = math.sqrt(2.0 * math.pi)

# direct convolution below this many multiply-adds
_DIRECT_LIMIT = 1 << 18


@dataclass(frozen=True)
class LatticeSpec:
    v0: float = 0.0
    D: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.D) and self.D > 0):
            raise InvalidArgument(f"lattice span must be positive, got {self.D}")
        if not math.isfinite(self.v0):
            raise InvalidArgument("lattice origin must be finite")

    def value(self, k):
        return self.v0 + self.D * np.asarray(k)

    def compatible(self, other: "LatticeSpec") -> bool:
        return self.D == other.D

    def __add__(self, other: "LatticeSpec") -> "LatticeSpec":
        if not self.compatible(other):
            raise IncompatibleLattice(f"spans differ: {self.D} vs {other.D}")
        return LatticeSpec(self.v0 + other.v0, self.D)


@dataclass(frozen=True, eq=False)
class LatticeDistribution:
    """Mass function f(k) = P{X = v0 + D*k} for offsets k_min..k_max.

    The stored range is always tight: zero entries at either end are trimmed
    on construction.  ``lost_mass`` records what pruning has thrown away.
    """

    spec: LatticeSpec
    k_min: int
    mass: np.ndarray
    lost_mass: float = 0.0

    def __post_init__(self):
        m = np.array(self.mass, dtype=float).ravel()
        if m.size == 0 or not np.all(np.isfinite(m)):
            raise InvalidArgument("mass vector must be non-empty and finite")
        if np.any(m < 0):
            raise InvalidArgument("negative mass entry")
        nz = np.flatnonzero(m)
        if nz.size == 0:
            raise InvalidArgument("all-zero mass vector")
        lo, hi = int(nz[0]), int(nz[-1])
        m = m[lo:hi + 1].copy()
        m.flags.writeable = False
        object.__setattr__(self, "mass", m)
        object.__setattr__(self, "k_min", int(self.k_min) + lo)
        lost = float(self.lost_mass)
        if lost < 0:
            raise InvalidArgument("lost_mass must be non-negative")
        if lost > MASS_BUDGET:
            raise MassBudgetExceeded(f"lost mass {lost:.3e} exceeds {MASS_BUDGET:.0e}")
        object.__setattr__(self, "lost_mass", lost)
        total = float(m.sum()) + lost
        if abs(total - 1.0) > NORM_TOL:
            raise InvalidArgument(f"masses sum to {total!r}, not 1")

    @property
    def k_max(self) -> int:
        return self.k_min + self.mass.size - 1

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(self.k_min, self.k_max + 1)

    @property
    def values(self) -> np.ndarray:
        return self.spec.v0 + self.spec.D * self.offsets

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    def __len__(self):
        return self.mass.size

    def pmf(self, k):
        """f(k) for integer offset(s) k; zero outside the stored range."""
        k = np.asarray(k)
        idx = k - self.k_min
        inside = (idx >= 0) & (idx < self.mass.size)
        out = np.where(inside, self.mass[np.clip(idx, 0, self.mass.size - 1)], 0.0)
        return float(out) if out.ndim == 0 else out

    def shift(self, c: int) -> "LatticeDistribution":
        return LatticeDistribution(self.spec, self.k_min + int(c), self.mass, self.lost_mass)

    def __repr__(self):
        return (f"LatticeDistribution(v0={self.spec.v0!r}, D={self.spec.D!r}, "
                f"k_min={self.k_min}, size={self.mass.size}, lost={self.lost_mass:.2e})")


def from_masses(masses: Sequence[float], k_min: int = 0, v0: float = 0.0, D: float = 1.0,
                normalize: bool = False) -> LatticeDistribution:
    m = np.asarray(masses, dtype=float)
    if normalize:
        m = m / m.sum()
    return LatticeDistribution(LatticeSpec(v0, D), k_min, m)


def point_mass(k: int = 0, v0: float = 0.0, D: float = 1.0) -> LatticeDistribution:
    return LatticeDistribution(LatticeSpec(v0, D), k, np.ones(1))


def two_point(p: float, v0: float = 0.0, D: float = 1.0) -> LatticeDistribution:
    """P{X = v0 + D} = p, P{X = v0} = 1 - p."""
    if not 0.0 <= p <= 1.0:
        raise InvalidArgument(f"p must lie in [0, 1], got {p}")
    return LatticeDistribution(LatticeSpec(v0, D), 0, np.array([1.0 - p, p]))


def fair_coin(v0: float = 0.0, D: float = 1.0) -> LatticeDistribution:
    return two_point(0.5, v0, D)


def uniform(b: int, start: int = 0, v0: float = 0.0, D: float = 1.0) -> LatticeDistribution:
    if b < 1:
        raise InvalidArgument("uniform law needs b >= 1 points")
    return LatticeDistribution(LatticeSpec(v0, D), start, np.full(b, 1.0 / b))


def theta_characteristic(dist: LatticeDistribution) -> float:
    """Sum over k of min(f(k), f(k+1))."""
    m = dist.mass
    if m.size < 2:
        return 0.0
    return float(np.minimum(m[:-1], m[1:]).sum())


def smoothness_delta(dist: LatticeDistribution) -> float:
    """Sum over m of |f(m) - f(m-1)| on the support padded by one zero each side."""
    padded = np.concatenate(([0.0], dist.mass, [0.0]))
    return float(np.abs(np.diff(padded)).sum())


def moments(dist: LatticeDistribution) -> tuple[float, float]:
    """(mean, variance), normalised by the retained mass."""
    m = dist.mass
    tot = m.sum()
    k = np.arange(m.size, dtype=float)
    kbar = float(np.dot(m, k) / tot)
    var_k = float(np.dot(m, (k - kbar) ** 2) / tot)
    D = dist.spec.D
    return dist.spec.v0 + D * (dist.k_min + kbar), D * D * var_k


def _raw_convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if min(a.size, b.size) <= 64 or a.size * b.size <= _DIRECT_LIMIT:
        return np.convolve(a, b)
    out = fftconvolve(a, b)
    np.maximum(out, 0.0, out=out)
    # accept the transform result only when it keeps the normalization exact
    # to well below the global tolerance; otherwise fall back to direct sums
    if abs(out.sum() - a.sum() * b.sum()) > 1e-14 or np.max(np.abs(out)) == 0:
        return np.convolve(a, b)
    return out


def _prune(m: np.ndarray, rel: float) -> tuple[np.ndarray, int, float]:
    """Zero entries below rel*total and trim; returns (mass, shift, dropped)."""
    if rel <= 0:
        return m, 0, 0.0
    thr = rel * m.sum()
    small = m < thr
    if not small.any():
        return m, 0, 0.0
    dropped = float(m[small].sum())
    keep = np.flatnonzero(~small)
    lo, hi = keep[0], keep[-1]
    out = m[lo:hi + 1].copy()
    out[small[lo:hi + 1]] = 0.0
    return out, int(lo), dropped


def convolve(d1: LatticeDistribution, d2: LatticeDistribution,
             prune: float = PRUNE_REL) -> LatticeDistribution:
    """Law of X1 + X2 for independent X1 ~ d1, X2 ~ d2."""
    spec = d1.spec + d2.spec
    m = _raw_convolve(d1.mass, d2.mass)
    m, lo, dropped = _prune(m, prune)
    lost = d1.lost_mass + d2.lost_mass + dropped
    if lost > MASS_BUDGET:
        raise MassBudgetExceeded(f"cumulative pruned mass {lost:.3e} exceeds {MASS_BUDGET:.0e}")
    return LatticeDistribution(spec, d1.k_min + d2.k_min + lo, m, lost)


def convolve_many(dists: Sequence[LatticeDistribution], prune: float = PRUNE_REL) -> LatticeDistribution:
    it = iter(dists)
    try:
        acc = next(it)
    except StopIteration:
        raise InvalidArgument("need at least one distribution") from None
    for d in it:
        acc = convolve(acc, d, prune)
    return acc


def total_variation(d1: LatticeDistribution, d2: LatticeDistribution) -> float:
    if not d1.spec.compatible(d2.spec) or d1.spec.v0 != d2.spec.v0:
        raise IncompatibleLattice("distributions live on different lattices")
    lo = min(d1.k_min, d2.k_min)
    hi = max(d1.k_max, d2.k_max)
    k = np.arange(lo, hi + 1)
    return 0.5 * float(np.abs(d1.pmf(k) - d2.pmf(k)).sum())


# ----------------------------------------------------------------- prefix sums

@dataclass(frozen=True, eq=False)
class PrefixState:
    """S_n = X_start + ... + X_n together with its accumulated moments."""

    n: int
    dist: LatticeDistribution
    a: float
    var: float
    nu: float

    @property
    def sigma(self) -> float:
        return math.sqrt(self.var)

    def check(self, rtol: float = 1e-9) -> None:
        mean, var = moments(self.dist)
        scale_a = max(abs(self.a), self.dist.spec.D)
        if abs(mean - self.a) > rtol * scale_a:
            raise InvalidArgument(f"n={self.n}: mean {mean!r} disagrees with {self.a!r}")
        if abs(var - self.var) > rtol * max(self.var, 1e-300):
            raise InvalidArgument(f"n={self.n}: variance {var!r} disagrees with {self.var!r}")


@dataclass
class StepParameters:
    """Per-step arrays for steps n (theta is the chosen value, theta_x the law's)."""

    n: np.ndarray
    theta: np.ndarray
    var: np.ndarray
    mean: Optional[np.ndarray] = None
    theta_x: Optional[np.ndarray] = None
    kmin: Optional[np.ndarray] = None
    kmax: Optional[np.ndarray] = None


class PrefixChain:
    """Prefix sums of an independent model, built by incremental convolution.

    Moments a_n, var_n, nu_n come from cumulative sums of exact per-step
    moments; the convolved laws are only used to check them.  Laws are kept
    in memory when ``store`` is true, otherwise they are regenerated by
    :meth:`walk` whenever needed.
    """

    def __init__(self, model, N: int, store: Optional[bool] = None, check: bool = True,
                 prune: float = PRUNE_REL):
        if N < 1:
            raise InvalidArgument("N must be >= 1")
        self.model = model
        self.start = int(model.start_index)
        self.N = int(N)
        self.prune = prune
        self.check = check
        self.spec = model.spec
        n = np.arange(self.start, self.N + 1)
        self.n = n
        p = model.step_parameters(n)
        self.step_mean = p.mean
        self.step_var = p.var
        self.theta = p.theta
        self.a = np.cumsum(p.mean) if n.size else np.zeros(0)
        self.var = np.cumsum(p.var) if n.size else np.zeros(0)
        self.nu = np.cumsum(p.theta) if n.size else np.zeros(0)
        self.sigma = np.sqrt(self.var)
        # lattice origin of S_n: the number of summed steps times v0
        self.origin = (n - self.start + 1) * self.spec.v0
        if store is None:
            store = self.N - self.start < 4096
        self._states: Optional[list[PrefixState]] = None
        self._hit_cache: dict[bytes, np.ndarray] = {}
        if store:
            self._states = list(self._generate())

    def __len__(self):
        return self.n.size

    @property
    def stored(self) -> bool:
        return self._states is not None

    def index(self, n: int) -> int:
        i = int(n) - self.start
        if i < 0 or i >= self.n.size:
            from .errors import RangeExceeded
            raise RangeExceeded(f"n={n} outside chain range [{self.start}, {self.N}]")
        return i

    def _generate(self) -> Iterator[PrefixState]:
        dist = None
        for i, j in enumerate(self.n):
            x = self.model.marginal(int(j))
            dist = x if dist is None else convolve(dist, x, self.prune)
            st = PrefixState(int(j), dist, float(self.a[i]), float(self.var[i]), float(self.nu[i]))
            if self.check:
                st.check()
            yield st

    def walk(self) -> Iterator[PrefixState]:
        if self._states is not None:
            return iter(self._states)
        return self._generate()

    def __iter__(self):
        return self.walk()

    def state(self, n: int) -> PrefixState:
        i = self.index(n)
        if self._states is not None:
            return self._states[i]
        for st in self._generate():
            if st.n == n:
                return st
        raise AssertionError("unreachable")

    __getitem__ = state

    def hit_probabilities(self, kappa) -> np.ndarray:
        """P{S_n = kappa_n} for every n of the chain covered by ``kappa``."""
        offs = kappa.offsets_for(self.n)
        key = offs.tobytes()
        if key not in self._hit_cache:
            p = np.empty(self.n.size)
            for i, st in enumerate(self.walk()):
                p[i] = st.dist.pmf(int(offs[i]))
            self._hit_cache[key] = p
        return self._hit_cache[key]

    def segment(self, m: int, n: int) -> LatticeDistribution:
        """Law of X_{m+1} + ... + X_n."""
        if n <= m:
            from .errors import IndexOrder
            raise IndexOrder(f"segment needs m < n, got m={m}, n={n}")
        if getattr(self.model, "iid", False) and self._states is not None \
                and n - m - 1 < len(self._states):
            return self._states[n - m - 1].dist
        return convolve_many([self.model.marginal(j) for j in range(m + 1, n + 1)], self.prune)


def prefix_chain(model, N: int, store: Optional[bool] = None, check: bool = True) -> PrefixChain:
    return PrefixChain(model, N, store=store, check=check)


def prefix_moments(model, N: int) -> dict:
    """Cumulative a_n, var_n, nu_n without convolving anything."""
    n = np.arange(model.start_index, N + 1)
    p = model.step_parameters(n)
    out = {"n": n, "var": np.cumsum(p.var), "nu": np.cumsum(p.theta)}
    out["a"] = np.cumsum(p.mean) if p.mean is not None else np.full(n.size, np.nan)
    return out


# ------------------------------------------------------------ LLT diagnostics

def _parts(obj):
    if isinstance(obj, PrefixState):
        return obj.dist, obj.a, obj.var
    if isinstance(obj, LatticeDistribution):
        a, v = moments(obj)
        return obj, a, v
    raise InvalidArgument(f"expected PrefixState or LatticeDistribution, got {type(obj).__name__}")


def llt_discrepancy(state, pad: int = SUP_PAD, allow_degenerate: bool = False) -> float:
    """sup |sigma P{S=N} - D/sqrt(2 pi) exp(-(N-a)^2 / (2 var))| over the padded support."""
    dist, a, var = _parts(state)
    D = dist.spec.D
    k = np.arange(dist.k_min - pad, dist.k_max + pad + 1)
    x = dist.spec.v0 + D * k
    if var <= 0:
        if not allow_degenerate:
            raise DegenerateVariance("variance is zero")
        g = np.where(x == a, D / SQRT_2PI, 0.0)
        return float(np.max(np.abs(0.0 * dist.pmf(k) - g)))
    s = math.sqrt(var)
    g = D / SQRT_2PI * np.exp(-(x - a) ** 2 / (2.0 * var))
    return float(np.max(np.abs(s * dist.pmf(k) - g)))


def gaussian_defect(state, pad: int = SUP_PAD, window: Optional[tuple[int, int]] = None) -> float:
    """Sum over lattice points of P{S=N} - D/(sqrt(2 pi) sigma) exp(-(N-a)^2/(2 var)).

    ``window`` is a half-open offset range [lo, hi); by default the support
    padded by ``pad`` steps on each side.
    """
    dist, a, var = _parts(state)
    if var <= 0:
        raise DegenerateVariance("variance is zero")
    if window is None:
        if pad < 0:
            raise InvalidArgument("pad must be >= 0")
        lo, hi = dist.k_min - pad, dist.k_max + pad + 1
    else:
        lo, hi = int(window[0]), int(window[1])
    if hi <= lo:
        raise InvalidArgument("summation window is empty")
    k = np.arange(lo, hi)
    x = dist.spec.v0 + dist.spec.D * k
    s = math.sqrt(var)
    g = dist.spec.D / (SQRT_2PI * s) * np.exp(-(x - a) ** 2 / (2.0 * var))
    return float(np.sum(dist.pmf(k) - g))


def bernoulli_llt_error(n: int, pad: int = SUP_PAD) -> float:
    """sup_k |P{B_n = k} - sqrt(2/(pi n)) exp(-(2k-n)^2/(2n))| for a fair-coin sum B_n."""
    n = int(n)
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    k = np.arange(-pad, n + pad + 1)
    kk = np.clip(k, 0, n).astype(float)
    logp = gammaln(n + 1.0) - gammaln(kk + 1.0) - gammaln(n - kk + 1.0) - n * math.log(2.0)
    p = np.where((k >= 0) & (k <= n), np.exp(logp), 0.0)
    g = math.sqrt(2.0 / (math.pi * n)) * np.exp(-((2.0 * k - n) ** 2) / (2.0 * n))
    return float(np.max(np.abs(p - g)))


def rozanov_partial(model, q: int, K: int) -> float:
    """Sum over k <= K of min_m P{X_k != m mod q}, from the marginal laws."""
    if q < 2:
        raise InvalidModulus(f"modulus must be >= 2, got {q}")
    if K < 1:
        raise InvalidArgument("K must be >= 1")
    total = 0.0
    for k in range(model.start_index, K + 1):
        d = model.marginal(k)
        res = np.bincount(np.mod(d.offsets, q), weights=d.mass, minlength=q)
        total += 1.0 - float(res.max()) / float(d.mass.sum())
    return total


# -------------------------------------------------------------- text format

def dumps(dist: LatticeDistribution) -> str:
    head = f"lattice v0={dist.spec.v0:.17g} D={dist.spec.D:.17g} kmin={dist.k_min}"
    if dist.lost_mass:
        head += f" lost={dist.lost_mass:.17g}"
    lines = [head] + [f"{x:.17g}" for x in dist.mass]
    return "\n".join(lines) + "\n"


def loads(text: str) -> LatticeDistribution:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines or not lines[0].startswith("lattice"):
        raise InvalidArgument("missing 'lattice' header line")
    fields = {}
    for tok in lines[0].split()[1:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise InvalidArgument(f"malformed header token {tok!r}")
        fields[key] = val
    try:
        spec = LatticeSpec(float(fields["v0"]), float(fields["D"]))
        kmin = int(fields["kmin"])
        lost = float(fields.get("lost", 0.0))
        mass = np.array([float(x) for x in lines[1:]])
    except (KeyError, ValueError) as e:
        raise InvalidArgument(f"bad lattice file: {e}") from None
    return LatticeDistribution(spec, kmin, mass, lost)


def load(path) -> LatticeDistribution:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dump(dist: LatticeDistribution, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(dist))
