"""Bernoulli-part coupling X = V + eps*D*L and sampled trajectories."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateTheta, InvalidArgument, ThetaOutOfRange
from .lattice import LatticeDistribution, theta_characteristic
from .rng import replica_generator, stream_key


@dataclass(frozen=True, eq=False)
class BernoulliPartDecomposition:
    """Joint law of (V, eps) on offsets k_min..k_max of the source lattice.

    ``tau[i]`` is tau_k for k = k_min + i (tau at k_max is zero), ``p0`` holds
    P{V = v_k, eps = 0} and ``tau`` doubles as P{V = v_k, eps = 1}.
    """

    source: LatticeDistribution
    theta: float
    tau: np.ndarray
    p0: np.ndarray

    @property
    def k_min(self) -> int:
        return self.source.k_min

    @property
    def offsets(self) -> np.ndarray:
        return self.source.offsets

    @property
    def joint(self) -> dict:
        out = {}
        for k, a, b in zip(self.offsets, self.p0, self.tau):
            out[(int(k), 0)] = float(a)
            out[(int(k), 1)] = float(b)
        return out

    def v_margin(self) -> np.ndarray:
        """P{V = v_k} for each offset."""
        return self.p0 + self.tau

    def check(self, tol: float = 1e-12) -> None:
        f = self.source.mass
        prev = np.concatenate(([0.0], self.tau[:-1]))
        if np.any(prev + self.tau > 2 * f + tol):
            raise InvalidArgument("tau_{k-1} + tau_k exceeds 2 f(k)")
        if abs(self.tau.sum() - self.theta) > tol:
            raise InvalidArgument("tau does not sum to theta")
        if np.any(self.p0 < 0) or np.any(self.tau < 0):
            raise InvalidArgument("negative joint entry")
        if abs(self.p0.sum() + self.tau.sum() - self.source.mass.sum()) > tol:
            raise InvalidArgument("joint law does not sum to one")
        if np.max(np.abs(self.v_margin() - (f + (self.tau - prev) / 2))) > tol:
            raise InvalidArgument("V margin mismatch")


def decompose(dist: LatticeDistribution, theta: Optional[float] = None) -> BernoulliPartDecomposition:
    """tau_k = theta * min(f(k), f(k+1)) / theta_X; joint law of (V, eps)."""
    tx = theta_characteristic(dist)
    if tx <= 0:
        raise DegenerateTheta("theta_X = 0: no adjacent atoms")
    if theta is None:
        theta = tx
    if not (theta > 0) or theta > tx * (1 + 1e-15):
        raise ThetaOutOfRange(f"theta={theta!r} outside (0, {tx!r}]")
    f = dist.mass
    tau = np.zeros(f.size)
    tau[:-1] = theta * np.minimum(f[:-1], f[1:]) / tx
    prev = np.concatenate(([0.0], tau[:-1]))
    p0 = f - (prev + tau) / 2
    # exact arithmetic gives p0 >= 0; clear rounding residue only
    p0[(p0 < 0) & (p0 > -1e-15)] = 0.0
    if np.any(p0 < 0):
        raise ThetaOutOfRange("coupling produced a negative probability")
    return BernoulliPartDecomposition(dist, float(theta), tau, p0)


def reconstruct_law(dec: BernoulliPartDecomposition) -> LatticeDistribution:
    """Law of V + eps*D*L with L an independent fair bit."""
    K = dec.tau.size
    m = np.zeros(K)
    m += dec.p0 + dec.tau / 2
    m[1:] += dec.tau[:-1] / 2
    src = dec.source
    return LatticeDistribution(src.spec, src.k_min, m, src.lost_mass)


def chernoff_bounds(epsilon: float, mu: float) -> tuple[float, float]:
    """(exp(-eps^2 mu / (2(1 + eps/3))), exp(-eps^2 mu / 2))."""
    if not (epsilon > 0 and mu > 0):
        raise InvalidArgument("epsilon and mu must be positive")
    e2 = epsilon * epsilon * mu
    return math.exp(-e2 / (2 * (1 + epsilon / 3))), math.exp(-e2 / 2)


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True, eq=False)
class PathRealization:
    seed: int
    replica: int
    N: int
    n: np.ndarray
    v0: float
    D: float
    S_off: np.ndarray
    W_off: np.ndarray
    B: np.ndarray
    M: np.ndarray
    hits: np.ndarray
    model_start: int = 1

    @property
    def origin(self) -> np.ndarray:
        return (self.n - self.model_start + 1) * self.v0

    @property
    def S(self) -> np.ndarray:
        return self.origin + self.D * self.S_off

    @property
    def W(self) -> np.ndarray:
        return self.origin + self.D * self.W_off

    def __len__(self):
        return self.n.size

    def check(self) -> None:
        if not np.array_equal(self.S_off, self.W_off + self.M):
            raise AssertionError("S_n != W_n + D M_n")
        if np.any(np.diff(self.B) < 0) or np.any(self.M > self.B):
            raise AssertionError("B_n must be nondecreasing with M_n <= B_n")


class PathSampler:
    """Inverse-CDF tables for steps start..N, reusable across replicas."""

    # padded vectorised tables up to this many cells, per-step loop beyond
    TABLE_CELLS = 50_000_000

    def __init__(self, model, kappa, N: int):
        self.model = model
        self.N = int(N)
        self.start = model.start_index
        self.n = np.arange(self.start, self.N + 1)
        self.kappa_off = kappa.offsets_for(self.n) if self.n.size else np.zeros(0, np.int64)
        decs = []
        if getattr(model, "iid", False) and self.n.size:
            d = decompose(model.marginal(self.start), model.theta(self.start))
            decs = [d]
        else:
            decs = [decompose(model.marginal(int(j)), model.theta(int(j))) for j in self.n]
        self._decs = decs
        width = max((2 * d.tau.size for d in decs), default=0)
        self._padded = None
        if not model.iid and self.n.size and self.n.size * width <= self.TABLE_CELLS:
            cum = np.full((self.n.size, width), np.inf)
            kmin = np.empty(self.n.size, dtype=np.int64)
            for i, d in enumerate(decs):
                c = np.cumsum(np.column_stack((d.p0, d.tau)).ravel())
                cum[i, :c.size] = c / c[-1]
                cum[i, c.size - 1] = 1.0
                kmin[i] = d.k_min
            self._padded = (cum, kmin)
        self._tables = []
        for d in decs:
            c = np.cumsum(np.column_stack((d.p0, d.tau)).ravel())
            c = c / c[-1]
            c[-1] = 1.0
            self._tables.append((c, d.k_min))

    def _draw(self, rng):
        size = self.n.size
        u = rng.random(size)
        L = rng.integers(0, 2, size=size, dtype=np.int64)
        if self.model.iid:
            cum, kmin = self._tables[0]
            idx = np.searchsorted(cum, u, side="right")
            np.minimum(idx, cum.size - 1, out=idx)
            k = kmin + idx // 2
        elif self._padded is not None:
            cum, kmin = self._padded
            idx = (u[:, None] >= cum).sum(axis=1)
            k = kmin + idx // 2
        else:
            idx = np.empty(size, dtype=np.int64)
            k = np.empty(size, dtype=np.int64)
            for i, (cum, kmin) in enumerate(self._tables):
                idx[i] = min(int(np.searchsorted(cum, u[i], side="right")), cum.size - 1)
                k[i] = kmin + idx[i] // 2
        eps = (idx % 2).astype(np.int64)
        return k.astype(np.int64), eps, L

    def sample(self, seed: int, replica: int = 0) -> PathRealization:
        rng = replica_generator(seed, replica)
        if self.n.size == 0:
            z = np.zeros(0, dtype=np.int64)
            return PathRealization(seed, replica, self.N, self.n, self.model.spec.v0,
                                   self.model.spec.D, z, z, z, z, z.astype(np.int8), self.start)
        k, eps, L = self._draw(rng)
        W = np.cumsum(k)
        B = np.cumsum(eps)
        M = np.cumsum(eps * L)
        S = W + M
        hits = (S == self.kappa_off).astype(np.int8)
        return PathRealization(seed, replica, self.N, self.n, self.model.spec.v0, self.model.spec.D,
                               S, W, B, M, hits, self.start)


def sample_path(model, kappa, N: int, seed: int, replica: int = 0) -> PathRealization:
    return PathSampler(model, kappa, N).sample(seed, replica)


def sample_paths(model, kappa, N: int, seed: int, replicas: int) -> list[PathRealization]:
    sampler = PathSampler(model, kappa, N)
    return [sampler.sample(seed, r) for r in range(replicas)]


def write_path_csv(path: PathRealization, fname) -> None:
    with open(fname, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "S_n", "W_n", "B_n", "M_n", "hit"])
        for row in zip(path.n, path.S, path.W, path.B, path.M, path.hits):
            w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])),
                        int(row[3]), int(row[4]), int(row[5])])


__all__ = ["BernoulliPartDecomposition", "PathRealization", "PathSampler", "chernoff_bounds",
           "decompose", "reconstruct_law", "sample_path", "sample_paths", "stream_key",
           "write_path_csv"]
