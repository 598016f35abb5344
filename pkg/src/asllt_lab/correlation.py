"""Covariances of the level-set indicators Y_n = sigma_n (1{S_n = kappa_n} - P{S_n = kappa_n})."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import HypothesisViolated, IndexOrder, InvalidArgument, TooLarge
from .lattice import convolve

VARIANTS = ("main", "tau", "ratio-c", "simple")
HYPOTHESIS_CAP = 10.0
BRUTE_FORCE_LIMIT = 10 ** 7


def _hits(chain, kappa):
    return chain.hit_probabilities(kappa)


def _check_order(m, n):
    if m >= n:
        raise IndexOrder(f"need m < n, got m={m}, n={n}")


def segment_probability(chain, kappa, m: int, n: int) -> float:
    """P{X_{m+1} + ... + X_n = kappa_n - kappa_m}."""
    _check_order(m, n)
    seg = chain.segment(m, n)
    return seg.pmf(kappa.offset(n) - kappa.offset(m))


def correlation_Y(chain, kappa, m: int, n: int) -> float:
    """E Y_n Y_m through the segment factorisation."""
    _check_order(m, n)
    p = _hits(chain, kappa)
    i, j = chain.index(m), chain.index(n)
    pm, pn = p[i], p[j]
    if pm == 0.0:
        return 0.0
    q = segment_probability(chain, kappa, m, n)
    return float(chain.sigma[i] * pm * chain.sigma[j] * (q - pn))


def joint_probability(chain, kappa, m: int, n: int) -> float:
    """P{S_m = kappa_m, S_n = kappa_n} by propagating the restricted law of S_m."""
    _check_order(m, n)
    st = chain.state(m)
    k = kappa.offset(m)
    pm = st.dist.pmf(k)
    if pm == 0.0:
        return 0.0
    from .lattice import LatticeDistribution
    # a sub-probability law: carry it as a point mass and rescale at the end
    acc = LatticeDistribution(st.dist.spec, k, np.ones(1))
    for j in range(m + 1, n + 1):
        acc = convolve(acc, chain.model.marginal(j), prune=0.0)
    return float(pm * acc.pmf(kappa.offset(n)))


def correlation_Y_direct(chain, kappa, m: int, n: int) -> float:
    """E Y_n Y_m = sigma_n sigma_m (P{joint} - P{S_m=kappa_m} P{S_n=kappa_n})."""
    p = _hits(chain, kappa)
    i, j = chain.index(m), chain.index(n)
    joint = joint_probability(chain, kappa, m, n)
    return float(chain.sigma[i] * chain.sigma[j] * (joint - p[i] * p[j]))


def variance_Y(chain, kappa, n: int) -> float:
    i = chain.index(n)
    p = _hits(chain, kappa)[i]
    return float(chain.var[i] * p * (1.0 - p))


def brute_force_joint(model, kappa, m: int, n: int) -> float:
    """P{S_m = kappa_m, S_n = kappa_n} by enumerating every outcome tuple."""
    _check_order(m, n)
    s = model.start_index
    margs = [model.marginal(j) for j in range(s, n + 1)]
    count = 1
    for d in margs:
        count *= len(d)
        if count > BRUTE_FORCE_LIMIT:
            raise TooLarge(f"more than {BRUTE_FORCE_LIMIT} outcome tuples")
    km, kn = kappa.offset(m), kappa.offset(n)
    tot = np.zeros(1, dtype=np.int64)
    prob = np.ones(1)
    hit_m = None
    for j, d in zip(range(s, n + 1), margs):
        tot = (tot[:, None] + d.offsets[None, :]).ravel()
        prob = (prob[:, None] * d.mass[None, :]).ravel()
        if hit_m is not None:
            hit_m = np.repeat(hit_m, len(d))
        if j == m:
            hit_m = tot == km
    return float(prob[hit_m & (tot == kn)].sum())


# ------------------------------------------------------------- bound shapes

@dataclass
class CorrelationReport:
    m: int
    n: int
    nu_m: float
    nu_n: float
    lhs: float
    rhs_shape: float
    ratio: float
    variant: str

    def row(self):
        return [self.m, self.n, repr(self.nu_m), repr(self.nu_n), repr(self.lhs),
                repr(self.rhs_shape), repr(self.ratio), self.variant]


CSV_COLUMNS = ["m", "n", "nu_m", "nu_n", "lhs", "rhs_shape", "ratio", "variant"]


def bound_shape(chain, m: int, n: int, variant: str, c: float = 0.5) -> float:
    """Right side of the chosen correlation bound with unit constant."""
    i, j = chain.index(m), chain.index(n)
    D = chain.spec.D
    nu_m, nu_n = chain.nu[i], chain.nu[j]
    s_m, s_n = chain.sigma[i], chain.sigma[j]
    big = max(s_n / math.sqrt(nu_n), s_m / math.sqrt(nu_m)) ** 3
    if variant == "simple":
        seg = math.sqrt(chain.var[j] - chain.var[i])
        return s_n / seg + 1.0
    sep = 1.0 / (math.sqrt(nu_n / nu_m) - 1.0) + math.sqrt(nu_n) / (nu_n - nu_m) ** 1.5
    if variant == "tau":
        return big * sep / D ** 2
    if variant == "main":
        prod = float(np.prod(chain.theta[i + 1:j + 1]))
        return big * (math.sqrt(nu_n) * prod + sep) / D ** 2
    if variant == "ratio-c":
        if not (0 < c < 1):
            raise InvalidArgument("c must lie in (0, 1)")
        if not (1.0 <= nu_m <= c * nu_n):
            raise InvalidArgument(f"ratio-c bound needs 1 <= nu_m <= {c}*nu_n")
        return big * math.sqrt(nu_m / nu_n) / D ** 2
    raise InvalidArgument(f"unknown variant {variant!r}; choose from {VARIANTS}")


def check_hypotheses(chain, kappa, upto: int, cap: float = HYPOTHESIS_CAP) -> None:
    """Both boundedness conditions on kappa_j over j <= upto, against ``cap``."""
    hi = chain.index(upto) + 1
    sig = chain.sigma[:hi]
    ok = sig > 0
    n = chain.n[:hi]
    z = (kappa.value(n) - chain.a[:hi])[ok] / sig[ok]
    sp = (sig * _hits(chain, kappa)[:hi])[ok]
    if z.size and np.max(np.abs(z)) > cap:
        raise HypothesisViolated(f"|kappa_j - a_j|/sigma_j reaches {np.max(np.abs(z)):.3g} > {cap}")
    if sp.size and np.max(sp) > cap:
        raise HypothesisViolated(f"sigma_j P{{S_j = kappa_j}} reaches {np.max(sp):.3g} > {cap}")


def verify_bound(chain, kappa, m: int, n: int, variant: str = "main", c: float = 0.5,
                 cap: float = HYPOTHESIS_CAP) -> CorrelationReport:
    _check_order(m, n)
    check_hypotheses(chain, kappa, n, cap)
    lhs = abs(correlation_Y(chain, kappa, m, n))
    rhs = bound_shape(chain, m, n, variant, c)
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    i, j = chain.index(m), chain.index(n)
    return CorrelationReport(int(m), int(n), float(chain.nu[i]), float(chain.nu[j]),
                             float(lhs), float(rhs), float(ratio), variant)


def grid_pairs(n_max: int, start: int = 1, fractions=(8, 4, 2)) -> list[tuple[int, int]]:
    """n over powers of two up to n_max, m in {n/8, n/4, n/2, n-1}."""
    pairs = []
    n = 2
    while n <= n_max:
        ms = sorted({n // f for f in fractions} | {n - 1})
        for m in ms:
            if start <= m < n:
                pairs.append((m, n))
        n *= 2
    return pairs


def grid_sweep(chain, kappa, variants: Sequence[str] = VARIANTS, n_max: Optional[int] = None,
               c: float = 0.5, cap: float = HYPOTHESIS_CAP) -> list[CorrelationReport]:
    n_max = chain.N if n_max is None else n_max
    chain.index(n_max)
    check_hypotheses(chain, kappa, n_max, cap)
    out = []
    for m, n in grid_pairs(n_max, chain.start):
        lhs = abs(correlation_Y(chain, kappa, m, n))
        i, j = chain.index(m), chain.index(n)
        for v in variants:
            try:
                rhs = bound_shape(chain, m, n, v, c)
            except InvalidArgument:
                if v == "ratio-c":
                    continue
                raise
            ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
            out.append(CorrelationReport(m, n, float(chain.nu[i]), float(chain.nu[j]),
                                         float(lhs), float(rhs), float(ratio), v))
    return out


def grid_maxima(reports: Iterable[CorrelationReport]) -> dict:
    best: dict = {}
    for r in reports:
        cur = best.get(r.variant)
        if cur is None or r.ratio > cur["max_ratio"]:
            best[r.variant] = {"max_ratio": r.ratio, "m": r.m, "n": r.n}
    return best


def write_reports_csv(reports: Iterable[CorrelationReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow(r.row())


def reports_summary(reports: Sequence[CorrelationReport]) -> dict:
    return {"cells": len(reports), "maxima": grid_maxima(reports)}


# ----------------------------------------------------------- quadratic forms

def quadratic_form_check(x, alpha, form: str = "upper") -> tuple[float, float]:
    """Compare a bilinear form of x against its row/column absolute-sum bound.

    form="upper": |sum_{i<j} x_i x_j a_ij| against
        1/2 sum_i |x_i|^2 (sum_{l>i} |a_il| + sum_{l<i} |a_li|).
    form="offdiag": |sum_{i != j} x_i x_j a_ij| against
        1/2 sum_i |x_i|^2 sum_{l != i} (|a_il| + |a_li|),
    which reads sum_i |x_i|^2 sum_{l != i} |a_il| for symmetric a.
    """
    x = np.asarray(x)
    a = np.asarray(alpha)
    if a.shape != (x.size, x.size):
        raise InvalidArgument("alpha must be a square matrix matching x")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(a))):
        raise InvalidArgument("inputs must be finite")
    A = np.abs(a)
    x2 = np.abs(x) ** 2
    if form == "upper":
        U = np.triu(a, 1)
        lhs = abs(x @ U @ x)
        rows = np.triu(A, 1).sum(axis=1) + np.triu(A, 1).sum(axis=0)
        rhs = 0.5 * float(x2 @ rows)
    elif form == "offdiag":
        off = a - np.diag(np.diag(a))
        lhs = abs(x @ off @ x)
        Ao = A - np.diag(np.diag(A))
        rhs = 0.5 * float(x2 @ (Ao.sum(axis=1) + Ao.sum(axis=0)))
    else:
        raise InvalidArgument(f"unknown form {form!r}")
    return float(lhs), float(rhs)


def write_summary_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
