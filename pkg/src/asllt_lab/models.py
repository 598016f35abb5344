"""Catalog of independent step models and target sequences kappa_n."""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import expi

from .errors import (DegenerateTheta, InvalidArgument, InvalidBlock, NotSimulable,
                     RangeExceeded, ThetaOutOfRange)
from .lattice import (LatticeDistribution, LatticeSpec, StepParameters, load, moments,
                      theta_characteristic, two_point, uniform)


class DistributionModel:
    """Independent steps X_j, j >= start_index, with full lattice laws.

    ``params`` may supply a vectorised ``n -> StepParameters`` shortcut;
    otherwise per-step quantities are derived from the marginals one by one.
    """

    has_law = True

    def __init__(self, name: str, spec: LatticeSpec, marginal: Callable[[int], LatticeDistribution],
                 start_index: int = 1, theta: Optional[Callable[[int], float]] = None,
                 theta_scale: float = 1.0, iid: bool = False,
                 params: Optional[Callable[[np.ndarray], StepParameters]] = None):
        if not 0.0 < theta_scale <= 1.0:
            raise ThetaOutOfRange(f"theta scale must lie in (0, 1], got {theta_scale}")
        if start_index < 1:
            raise InvalidArgument("start_index must be >= 1")
        self.name = name
        self.spec = spec
        self.start_index = int(start_index)
        self.theta_scale = float(theta_scale)
        self.iid = iid
        self._marginal = lru_cache(maxsize=None)(marginal)
        self._theta = theta
        self._params = params

    def __repr__(self):
        return f"DistributionModel({self.name!r}, start={self.start_index})"

    def marginal(self, j: int) -> LatticeDistribution:
        if j < self.start_index:
            raise RangeExceeded(f"step {j} precedes start index {self.start_index}")
        return self._marginal(int(j))

    def theta_x(self, j: int) -> float:
        return theta_characteristic(self.marginal(j))

    def theta(self, j: int) -> float:
        if self._theta is not None:
            return float(self._theta(j)) * self.theta_scale
        return self.theta_scale * self.theta_x(j)

    def step_parameters(self, n) -> StepParameters:
        n = np.asarray(n, dtype=np.int64)
        if self._params is not None:
            p = self._params(n)
            if self._theta is not None:
                p.theta = np.array([self._theta(int(j)) for j in n], dtype=float)
            p.theta = p.theta * self.theta_scale
            return p
        mean = np.empty(n.size)
        var = np.empty(n.size)
        tx = np.empty(n.size)
        th = np.empty(n.size)
        kmin = np.empty(n.size, dtype=np.int64)
        kmax = np.empty(n.size, dtype=np.int64)
        for i, j in enumerate(n):
            d = self.marginal(int(j))
            mean[i], var[i] = moments(d)
            tx[i] = theta_characteristic(d)
            th[i] = self.theta(int(j))
            kmin[i], kmax[i] = d.k_min, d.k_max
        return StepParameters(n, th, var, mean, tx, kmin, kmax)

    def check(self, N: int, tol: float = 1e-15) -> None:
        """Raise if some chosen theta_n leaves (0, theta_x(n)] on start..N."""
        p = self.step_parameters(np.arange(self.start_index, N + 1))
        if np.any(p.theta_x <= 0):
            j = int(p.n[np.argmax(p.theta_x <= 0)])
            raise DegenerateTheta(f"step {j} has no adjacent-atom overlap")
        bad = (p.theta <= 0) | (p.theta > p.theta_x * (1 + tol))
        if np.any(bad):
            j = int(p.n[np.argmax(bad)])
            raise ThetaOutOfRange(f"step {j}: theta outside (0, theta_x]")


class ParameterModel:
    """Only the streams (theta_n, Var X_n) are known; there is no law to sample."""

    has_law = False
    iid = False

    def __init__(self, name: str, theta: Callable[[np.ndarray], np.ndarray],
                 var: Callable[[np.ndarray], np.ndarray], start_index: int, D: float,
                 nu_cum: Optional[Callable] = None, var_cum: Optional[Callable] = None):
        self.name = name
        self._theta = theta
        self._var = var
        self.start_index = int(start_index)
        self.spec = LatticeSpec(0.0, float(D))
        # closed forms of nu_n and var_n, valid at real arguments too
        self.nu_cum = nu_cum
        self.var_cum = var_cum

    def __repr__(self):
        return f"ParameterModel({self.name!r}, start={self.start_index})"

    def theta(self, j):
        return float(self._theta(np.asarray([j]))[0])

    def step_parameters(self, n) -> StepParameters:
        n = np.asarray(n, dtype=np.int64)
        th = np.asarray(self._theta(n), dtype=float)
        v = np.asarray(self._var(n), dtype=float)
        return StepParameters(n, th, v, None, th.copy())

    def marginal(self, j):
        raise NotSimulable(f"{self.name} specifies parameters only, no law")

    def check(self, N: int) -> None:
        p = self.step_parameters(np.arange(self.start_index, N + 1))
        D = self.spec.D
        if np.any(p.theta <= 0) or np.any(p.var < D * D / 4 * p.theta * (1 - 1e-15)):
            raise ThetaOutOfRange("parameter stream violates var >= (D^2/4) theta")


Model = Union[DistributionModel, ParameterModel]


# ----------------------------------------------------------------- catalog

def iid_model(dist: LatticeDistribution, theta_scale: float = 1.0, name: str = "iid") -> DistributionModel:
    tx = theta_characteristic(dist)
    if tx <= 0:
        raise DegenerateTheta("law has no adjacent atoms, theta_X = 0")
    mean, var = moments(dist)

    def params(n):
        k = np.ones(n.size)
        return StepParameters(n, tx * k, var * k, mean * k, tx * k,
                              np.full(n.size, dist.k_min), np.full(n.size, dist.k_max))

    model = DistributionModel(name, dist.spec, lambda j: dist, 1, theta_scale=theta_scale,
                              iid=True, params=params)
    r = var / (tx * theta_scale)
    model.var_nu_ratio = lambda v: r
    return model


def _as_seq(x) -> Callable[[int], int]:
    if callable(x):
        return x
    if np.isscalar(x):
        return lambda j: int(x)
    arr = list(x)

    def get(j):
        if j - 1 >= len(arr):
            raise RangeExceeded(f"block parameters defined for j <= {len(arr)} only")
        return int(arr[j - 1])
    return get


def block_uniform_model(n_j, b_j, v0: float = 0.0, D: float = 1.0, theta_scale: float = 1.0,
                        name: str = "block-uniform") -> DistributionModel:
    """X_j uniform on offsets n_j+1, ..., n_j+b_j.

    ``n_j`` and ``b_j`` are integers, 1-indexed sequences or callables of j.
    """
    nf, bf = _as_seq(n_j), _as_seq(b_j)
    spec = LatticeSpec(v0, D)

    def marg(j):
        b = bf(j)
        if b < 2:
            raise InvalidBlock(f"b_{j} = {b} < 2")
        return uniform(b, nf(j) + 1, v0, D)

    def params(n):
        b = np.array([bf(int(j)) for j in n], dtype=float)
        if np.any(b < 2):
            raise InvalidBlock("every b_j must be >= 2")
        off = np.array([nf(int(j)) for j in n], dtype=float)
        tx = 1.0 - 1.0 / b
        mean = v0 + D * (off + (b + 1) / 2)
        var = D * D * (b * b - 1) / 12
        return StepParameters(n, tx.copy(), var, mean, tx,
                              (off + 1).astype(np.int64), (off + b).astype(np.int64))

    iid = not callable(b_j) and np.isscalar(b_j) and not callable(n_j) and np.isscalar(n_j)
    if iid and int(b_j) < 2:
        raise InvalidBlock(f"b = {b_j} < 2")
    return DistributionModel(name, spec, marg, 1, theta_scale=theta_scale, iid=iid, params=params)


def log_variance_parameter_model() -> ParameterModel:
    """theta_n = Var X_n = log n - log(n-1), n >= 2, declared span 2."""
    def step(n):
        return -np.log1p(-1.0 / np.asarray(n, dtype=float))

    model = ParameterModel("log-variance", step, step, start_index=2, D=2.0,
                           nu_cum=np.log, var_cum=np.log)
    model.var_nu_ratio = lambda v: 1.0
    return model


def cramer_probability(j):
    return 1.0 / np.log(np.asarray(j, dtype=float))


def cramer_model(theta_scale: float = 1.0) -> DistributionModel:
    """Independent bits xi_j, j >= 3, with P{xi_j = 1} = 1/log j.

    The default theta_j is the law's own characteristic min(p_j, 1 - p_j),
    which is 1/log j from j = 8 on.
    """
    def marg(j):
        return two_point(1.0 / math.log(j))

    def params(n):
        p = cramer_probability(n)
        tx = np.minimum(p, 1.0 - p)
        return StepParameters(n, tx.copy(), p * (1.0 - p), p, tx,
                              np.zeros(n.size, dtype=np.int64), np.ones(n.size, dtype=np.int64))

    model = DistributionModel("cramer", LatticeSpec(0.0, 1.0), marg, 3, theta_scale=theta_scale,
                              params=params)
    if theta_scale == 1.0:
        model.var_nu_ratio = _cramer_ratio
    return model


def _cramer_ratio(v: float) -> float:
    """var_n / nu_n at nu_n = e^v, smooth approximation for large n.

    With L = log n, nu_n ~ li(n) = Ei(L) and var_n ~ n / L.
    """
    L = brentq(lambda x: _log_ei(x) - v, 1.0, max(720.0, 2.0 * v + 10.0))
    return math.exp(L - v) / L


def _log_ei(x: float) -> float:
    if x < 700.0:
        return math.log(expi(x))
    # asymptotic series, far more accurate than needed at this size
    return x - math.log(x) + math.log1p(1 / x + 2 / x ** 2 + 6 / x ** 3)


# ---------------------------------------------------------------- kappa_n

@dataclass(frozen=True, eq=False)
class KappaSequence:
    """Lattice targets kappa_n = n_steps*v0 + D*offset_n for n = start, start+1, ..."""

    start: int
    offsets: np.ndarray
    v0: float
    D: float
    target: float = float("nan")
    model_start: int = 1

    def __post_init__(self):
        o = np.asarray(self.offsets, dtype=np.int64).copy()
        o.flags.writeable = False
        object.__setattr__(self, "offsets", o)

    @property
    def n(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.offsets.size)

    @property
    def N(self) -> int:
        return self.start + self.offsets.size - 1

    def offsets_for(self, n) -> np.ndarray:
        n = np.asarray(n)
        i = n - self.start
        if n.size and (i.min() < 0 or i.max() >= self.offsets.size):
            raise RangeExceeded(f"kappa defined for n in [{self.start}, {self.N}] only")
        return self.offsets[i]

    def offset(self, n: int) -> int:
        return int(self.offsets_for(np.array([n]))[0])

    def value(self, n):
        n = np.asarray(n)
        return (n - self.model_start + 1) * self.v0 + self.D * self.offsets_for(n)

    def __call__(self, n):
        return self.value(n)

    def __len__(self):
        return self.offsets.size


def kappa_from_offsets(model, offsets: Sequence[int], start: Optional[int] = None) -> KappaSequence:
    s = model.start_index if start is None else start
    return KappaSequence(s, np.asarray(offsets), model.spec.v0, model.spec.D,
                         model_start=model.start_index)


def kappa_sequence(model, kappa: float, N: int) -> KappaSequence:
    """Nearest lattice point to a_n + kappa*sigma_n, ties toward +infinity."""
    if not getattr(model, "has_law", False):
        raise NotSimulable(f"{model.name} has no law, so a_n and the lattice are undefined")
    s = model.start_index
    if N < s:
        return KappaSequence(s, np.zeros(0, dtype=np.int64), model.spec.v0, model.spec.D,
                             float(kappa), s)
    n = np.arange(s, N + 1)
    p = model.step_parameters(n)
    a = np.cumsum(p.mean)
    sigma = np.sqrt(np.cumsum(p.var))
    origin = (n - s + 1) * model.spec.v0
    offs = np.floor((a + kappa * sigma - origin) / model.spec.D + 0.5).astype(np.int64)
    return KappaSequence(s, offs, model.spec.v0, model.spec.D, float(kappa), s)


def write_kappa_csv(kappa: KappaSequence, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "kappa_n"])
        for n, v in zip(kappa.n, kappa.value(kappa.n)):
            w.writerow([int(n), repr(float(v))])


# ------------------------------------------------------------ identifiers

_LIN = re.compile(r"^j\s*([+-]\s*\d+)?$")


def _parse_int_or_linear(text: str):
    text = text.strip()
    if re.fullmatch(r"-?\d+", text):
        return int(text)
    m = _LIN.match(text)
    if m:
        c = int(m.group(1).replace(" ", "")) if m.group(1) else 0
        return lambda j, c=c: j + c
    raise InvalidArgument(f"expected an integer or 'j+c', got {text!r}")


def parse_model(identifier: str, theta_scale: float = 1.0) -> Model:
    """Build a model from its identifier.

    Accepted forms: ``iid:<file>``, ``coin``, ``uniform:<b>``,
    ``block-uniform:b=<int|j+c>,n=<int|j+c>``, ``log-variance``, ``cramer``.
    """
    ident = identifier.strip()
    kind, _, rest = ident.partition(":")
    if kind == "iid":
        if not rest:
            raise InvalidArgument("iid model needs a distribution file: iid:<file>")
        try:
            dist = load(rest)
        except OSError as e:
            raise InvalidArgument(f"cannot read {rest}: {e}") from None
        return iid_model(dist, theta_scale, name=ident)
    if kind in ("coin", "fair-coin"):
        return iid_model(two_point(0.5), theta_scale, name="coin")
    if kind == "uniform":
        try:
            b = int(rest)
        except ValueError:
            raise InvalidArgument(f"bad uniform size {rest!r}") from None
        if b < 2:
            raise InvalidBlock("uniform model needs b >= 2")
        return iid_model(uniform(b), theta_scale, name=ident)
    if kind == "block-uniform":
        opts = {"b": "2", "n": "0"}
        for tok in filter(None, rest.split(",")):
            key, sep, val = tok.partition("=")
            if not sep or key.strip() not in opts:
                raise InvalidArgument(f"bad block-uniform parameter {tok!r}")
            opts[key.strip()] = val
        return block_uniform_model(_parse_int_or_linear(opts["n"]), _parse_int_or_linear(opts["b"]),
                                   theta_scale=theta_scale, name=ident)
    if kind == "log-variance" and not rest:
        return log_variance_parameter_model()
    if kind == "cramer" and not rest:
        return cramer_model(theta_scale)
    raise InvalidArgument(f"unknown model identifier {identifier!r}")


def catalog() -> dict:
    """The example models used throughout the test suite."""
    return {
        "coin": iid_model(two_point(0.5), name="coin"),
        "uniform3": iid_model(uniform(3), name="uniform:3"),
        "block-uniform": block_uniform_model(0, lambda j: j + 1, name="block-uniform:b=j+1"),
        "log-variance": log_variance_parameter_model(),
        "cramer": cramer_model(),
    }
