"""Command line front end: inspect, verify, simulate, spectrum, plot-data."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import __version__
from .asllt import (asllt_average, asllt_expected_average, asllt_limit, average_trajectory,
                    block_second_moments, build_schedule, dyadic_block_sums, hlp_check,
                    omega_weight, quasi_orthogonality_rowsums, weighted_series_partials,
                    windowed_sup_statistic)
from .bernoulli import PathSampler, decompose, reconstruct_law, stream_key
from .correlation import (VARIANTS, brute_force_joint, correlation_Y, correlation_Y_direct,
                          grid_maxima, grid_pairs, grid_sweep, quadratic_form_check,
                          write_reports_csv)
from .errors import AslltError, InvalidArgument, NotSimulable, RangeExceeded, TooLarge
from .lattice import dumps, prefix_chain, total_variation
from .models import kappa_sequence, parse_model

EXIT_OK, EXIT_CONFIG, EXIT_RANGE, EXIT_PROPERTY = 0, 2, 3, 4
COMMANDS = ("inspect", "verify", "simulate", "spectrum", "plot-data")


@dataclass
class RunConfig:
    model: str = "coin"
    kappa: float = 0.0
    N: int = 1024
    R: float = 2.0
    seed: int = 7
    replicas: int = 1
    variant: str = "all"
    grid_max: Optional[int] = None
    b: float = 2.0
    theta_scale: float = 1.0
    normalization: str = "auto"
    out: str = "out"
    workers: int = 1

    # fields that never influence the numbers written
    _volatile = ("out", "workers")

    def validate(self) -> None:
        if self.N < 1:
            raise InvalidArgument("N must be >= 1")
        if not self.R > 1:
            raise InvalidArgument("R must exceed 1")
        if self.replicas < 1:
            raise InvalidArgument("replicas must be >= 1")
        if self.workers < 1:
            raise InvalidArgument("workers must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidArgument("seed must be a 64-bit unsigned integer")
        if self.variant != "all" and self.variant not in VARIANTS:
            raise InvalidArgument(f"variant must be 'all' or one of {VARIANTS}")
        if self.normalization not in ("auto", "weighted", "classical"):
            raise InvalidArgument("normalization must be auto, weighted or classical")

    def stable_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in self._volatile:
            d.pop(k)
        return d

    def hash(self) -> str:
        text = json.dumps(self.stable_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


_FIELD_TYPES = {"model": str, "kappa": float, "N": int, "R": float, "seed": int, "replicas": int,
                "variant": str, "grid_max": int, "b": float, "theta_scale": float,
                "normalization": str, "out": str, "workers": int}
_ALIASES = {"κ": "kappa", "n": "N", "r": "R", "grid-max": "grid_max", "theta-scale": "theta_scale"}


def _coerce(key: str, value):
    key = _ALIASES.get(key, key).replace("-", "_")
    if key not in _FIELD_TYPES:
        raise InvalidArgument(f"unknown configuration key {key!r}")
    if value is None:
        return key, None
    try:
        typ = _FIELD_TYPES[key]
        if typ is int and isinstance(value, str):
            value = int(float(value)) if "e" in value.lower() else int(value)
        return key, typ(value)
    except (TypeError, ValueError):
        raise InvalidArgument(f"bad value {value!r} for {key}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asllt-lab", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("extra", nargs="*", help="model identifier and/or key=value overrides")
        sp.add_argument("--config", help="JSON document with RunConfig fields")
        sp.add_argument("--model")
        sp.add_argument("--kappa", type=float)
        sp.add_argument("--N", "-N", dest="N", type=int)
        sp.add_argument("--R", dest="R", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--replicas", type=int)
        sp.add_argument("--variant")
        sp.add_argument("--grid-max", dest="grid_max", type=int)
        sp.add_argument("--b", type=float)
        sp.add_argument("--theta-scale", dest="theta_scale", type=float)
        sp.add_argument("--normalization")
        sp.add_argument("--out")
        sp.add_argument("--workers", type=int)
    return p


def config_from_args(ns) -> RunConfig:
    values = {}
    if ns.config:
        try:
            with open(ns.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise InvalidArgument(f"cannot read config {ns.config}: {e}") from None
        if not isinstance(doc, dict):
            raise InvalidArgument("config must be a JSON object")
        for k, v in doc.items():
            key, val = _coerce(k, v)
            values[key] = val
    for tok in ns.extra:
        if "=" in tok:
            k, _, v = tok.partition("=")
            key, val = _coerce(k.strip(), v.strip())
            values[key] = val
        else:
            values["model"] = tok
    for key in _FIELD_TYPES:
        v = getattr(ns, key, None)
        if v is not None:
            values[key] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# ------------------------------------------------------------ output helpers

def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "" if math.isnan(x) else repr(x)
    return x


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, cfg: RunConfig, command: str, payload: dict) -> None:
    doc = {"command": command, "version": __version__, "config_hash": cfg.hash(),
           "config": cfg.stable_dict()}
    doc.update(payload)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(cfg: RunConfig) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


# -------------------------------------------------------------- commands

def cmd_inspect(cfg: RunConfig) -> int:
    model = parse_model(cfg.model, cfg.theta_scale)
    if cfg.N < model.start_index:
        raise RangeExceeded(f"N={cfg.N} precedes the model start {model.start_index}")
    sch = build_schedule(model, cfg.N, cfg.R)
    om = np.full(sch.n.size, np.nan)
    for i, m in enumerate(sch.n):
        if sch.nu[-1] < 2 * sch.nu[i]:
            break
        om[i] = omega_weight(sch, int(m))
    h = sch.h_run
    out = _outdir(cfg)
    write_csv(os.path.join(out, "inspect.csv"),
              ["n", "theta_n", "nu_n", "sigma_n", "a_n", "h_n", "omega_n"],
              zip(sch.n, sch.theta, sch.nu, sch.sigma, sch.a, h, om))
    payload = {"model": model.name, "N": cfg.N, "rows": int(sch.n.size),
               "nu_N": sch.nu[-1], "sigma_N": sch.sigma[-1], "h_max": float(h[-1]),
               "omega_max": float(np.nanmax(om)) if np.isfinite(om).any() else None,
               "omega_argmax": int(sch.n[np.nanargmax(om)]) if np.isfinite(om).any() else None,
               "block_masses": sch.m[:sch.complete_blocks], "complete_blocks": sch.complete_blocks}
    if cfg.model.startswith("iid:"):
        with open(cfg.model[4:], encoding="utf-8") as fh:
            payload["distribution_file"] = fh.read()
        payload["distribution"] = dumps(model.marginal(1))
    write_json(os.path.join(out, "inspect.json"), cfg, "inspect", payload)
    print(f"inspect: {sch.n.size} rows written to {out}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    model = parse_model(cfg.model, cfg.theta_scale)
    if not model.has_law:
        raise NotSimulable(f"{model.name} has no law; verify needs exact laws")
    n_max = cfg.grid_max if cfg.grid_max is not None else cfg.N
    if n_max > cfg.N:
        raise RangeExceeded(f"grid maximum {n_max} exceeds the chain length N={cfg.N}")
    chain = prefix_chain(model, cfg.N)
    kap = kappa_sequence(model, cfg.kappa, cfg.N)
    variants = VARIANTS if cfg.variant == "all" else (cfg.variant,)
    checks = {}

    # factorised versus propagated covariance on the grid
    worst = 0.0
    for m, n in grid_pairs(n_max, chain.start):
        a = correlation_Y(chain, kap, m, n)
        b = correlation_Y_direct(chain, kap, m, n)
        worst = max(worst, abs(a - b))
    checks["correlation_identity"] = {"max_abs_diff": worst, "pass": worst <= 1e-12}

    # exhaustive enumeration on the smallest pairs
    worst = 0.0
    pairs = [(m, n) for m, n in grid_pairs(min(n_max, 8), chain.start)]
    p_hit = chain.hit_probabilities(kap)
    for m, n in pairs:
        try:
            joint = brute_force_joint(model, kap, m, n)
        except TooLarge:
            continue
        i, j = chain.index(m), chain.index(n)
        ref = chain.sigma[i] * chain.sigma[j] * (joint - p_hit[i] * p_hit[j])
        worst = max(worst, abs(ref - correlation_Y(chain, kap, m, n)))
    checks["brute_force_oracle"] = {"pairs": len(pairs), "max_abs_diff": worst, "pass": worst <= 1e-12}

    # coupling exactness on the first marginals
    tv = 0.0
    for j in range(model.start_index, min(cfg.N, model.start_index + 31) + 1):
        d = model.marginal(j)
        tv = max(tv, total_variation(reconstruct_law(decompose(d, model.theta(j))), d))
    checks["coupling"] = {"max_tv": tv, "pass": tv < 1e-12}

    # quadratic-form inequality on fixed random instances
    rng = np.random.default_rng(cfg.seed)
    ok = True
    for _ in range(200):
        dim = int(rng.integers(1, 21))
        x = rng.normal(size=dim)
        a = rng.normal(size=(dim, dim))
        lhs, rhs = quadratic_form_check(x, a)
        ok &= lhs <= rhs * (1 + 1e-12) + 1e-15
    checks["quadratic_form"] = {"instances": 200, "pass": bool(ok)}

    # liaison inequality and the two clock estimates
    D = model.spec.D
    liaison = bool(np.all(chain.var >= D * D / 4 * chain.nu))
    checks["liaison"] = {"pass": liaison}
    sch = build_schedule(model, cfg.N, cfg.R)
    hl_ok = True
    hl = {}
    for delta in (0.25, 0.5, 0.75):
        N0 = sch.n[max(0, sch.n.size // 8)]
        Nmid = sch.n[sch.n.size // 2]
        try:
            res = hlp_check(sch, delta, int(N0), int(Nmid))
        except InvalidArgument:
            res = hlp_check(sch, delta, int(N0))
        hl[str(delta)] = res
        hl_ok &= all(l <= r * (1 + 1e-12) for l, r in res.values())
    checks["clock_estimates"] = {"values": hl, "pass": bool(hl_ok)}

    reports = grid_sweep(chain, kap, variants, n_max)
    out = _outdir(cfg)
    write_reports_csv(reports, os.path.join(out, "verify_reports.csv"))
    passed = all(c["pass"] for c in checks.values())
    write_json(os.path.join(out, "verify_summary.json"), cfg, "verify",
               {"checks": checks, "ratio_maxima": grid_maxima(reports), "variants": list(variants),
                "pass": passed})
    for name, c in checks.items():
        print(f"{'PASS' if c['pass'] else 'FAIL'} {name}")
    return EXIT_OK if passed else EXIT_PROPERTY


# simulation workers rebuild their state once per process
_WORKER: dict = {}


def _sim_init(cfg_dict: dict, p_hit: np.ndarray) -> None:
    cfg = RunConfig(**cfg_dict)
    model = parse_model(cfg.model, cfg.theta_scale)
    kap = kappa_sequence(model, cfg.kappa, cfg.N)
    _WORKER.update(cfg=cfg, model=model, sampler=PathSampler(model, kap, cfg.N),
                   schedule=build_schedule(model, cfg.N, cfg.R), p=p_hit)


def _sim_replica(r: int) -> dict:
    cfg = _WORKER["cfg"]
    sch = _WORKER["schedule"]
    p = _WORKER["p"]
    path = _WORKER["sampler"].sample(cfg.seed, r)
    avg = asllt_average(path, sch, cfg.N, cfg.normalization) if len(path) else float("nan")
    ws = windowed_sup_statistic(path, sch, p)
    n = path.n
    jmax = int(math.floor(math.log2(cfg.N))) if cfg.N >= 2 else 0
    Z = dyadic_block_sums(path.hits, n, jmax, center=p)
    series = weighted_series_partials(Z[1:], cfg.b, j0=2) if jmax >= 2 else None
    return {"replica": r, "key": stream_key(cfg.seed, r), "average": avg,
            "hits": int(path.hits.sum()),
            "windowed": list(zip(ws.k.tolist(), ws.j.tolist(), ws.value.tolist())),
            "series": [] if series is None else list(zip(series.j.tolist(), series.terms.tolist(),
                                                          series.partials.tolist())),
            "series_verdict": None if series is None else series.verdict}


def run_replicas(cfg: RunConfig, p_hit: np.ndarray) -> list[dict]:
    args = (dataclasses.asdict(cfg), p_hit)
    idx = range(cfg.replicas)
    if cfg.workers == 1:
        _sim_init(*args)
        return [_sim_replica(r) for r in idx]
    chunk = max(1, cfg.replicas // (4 * cfg.workers))
    with ProcessPoolExecutor(max_workers=cfg.workers, initializer=_sim_init, initargs=args) as ex:
        return list(ex.map(_sim_replica, idx, chunksize=chunk))


def cmd_simulate(cfg: RunConfig) -> int:
    model = parse_model(cfg.model, cfg.theta_scale)
    if not model.has_law:
        raise NotSimulable(f"{model.name} specifies parameters only and cannot be sampled")
    if cfg.N < model.start_index:
        raise RangeExceeded(f"N={cfg.N} precedes the model start {model.start_index}")
    kap = kappa_sequence(model, cfg.kappa, cfg.N)
    chain = prefix_chain(model, cfg.N, store=False)
    p_hit = chain.hit_probabilities(kap)
    sch = build_schedule(model, cfg.N, cfg.R)
    expected = asllt_expected_average(chain, kap, sch, cfg.N, cfg.normalization)
    limit = asllt_limit(model, cfg.kappa, cfg.normalization)
    results = run_replicas(cfg, p_hit)
    out = _outdir(cfg)
    write_csv(os.path.join(out, "simulate_replicas.csv"),
              ["replica", "stream_key", "N", "average", "hits"],
              [(r["replica"], r["key"], cfg.N, r["average"], r["hits"]) for r in results])
    write_csv(os.path.join(out, "simulate_windowed.csv"), ["replica", "k", "J", "value"],
              [(r["replica"], k, j, v) for r in results for k, j, v in r["windowed"]])
    write_csv(os.path.join(out, "simulate_series.csv"), ["replica", "j", "term", "partial"],
              [(r["replica"], j, t, s) for r in results for j, t, s in r["series"]])
    avgs = np.array([r["average"] for r in results])
    mean = float(np.mean(avgs))
    se = float(np.std(avgs, ddof=1) / math.sqrt(avgs.size)) if avgs.size > 1 else float("nan")
    payload = {"model": model.name, "N": cfg.N, "seed": cfg.seed, "replicas": cfg.replicas,
               "limit": limit, "expected_average": expected, "replica_mean": mean,
               "replica_stderr": se,
               "within_3se_of_expected": None if not math.isfinite(se) else abs(mean - expected) <= 3 * se,
               "normalization": cfg.normalization,
               "series_verdicts": sorted({str(r["series_verdict"]) for r in results})}
    write_json(os.path.join(out, "simulate_summary.json"), cfg, "simulate", payload)
    print(f"simulate: mean average {mean:.6g} (expected {expected:.6g}, limit {limit:.6g})")
    return EXIT_OK


def cmd_spectrum(cfg: RunConfig) -> int:
    model = parse_model(cfg.model, cfg.theta_scale)
    if not model.has_law:
        raise NotSimulable(f"{model.name} has no law; the Gram matrix needs exact laws")
    sch = build_schedule(model, cfg.N, cfg.R)
    J = sch.complete_blocks - 1
    if J < 1:
        raise RangeExceeded("N too small for a complete block beyond block 0")
    chain = prefix_chain(model, cfg.N, store=False)
    kap = kappa_sequence(model, cfg.kappa, cfg.N)
    st = block_second_moments(chain, kap, sch, 1, J, with_phi=False)
    G = st.gram
    out = _outdir(cfg)
    write_csv(os.path.join(out, "spectrum_gram.csv"), ["i", "j", "E_ZiZj"],
              [(int(st.blocks[a]), int(st.blocks[b]), G[a, b])
               for a in range(G.shape[0]) for b in range(G.shape[1])])
    rs = quasi_orthogonality_rowsums(st)
    payload = {"blocks": st.blocks, "rowsums": rs, "max_rowsum": float(rs.max()),
               "eigenvalues": np.linalg.eigvalsh(G), "block_masses": st.m}
    write_json(os.path.join(out, "spectrum_summary.json"), cfg, "spectrum", payload)
    print(f"spectrum: {G.shape[0]} blocks, max row sum {rs.max():.6g}")
    return EXIT_OK


def cmd_plot_data(cfg: RunConfig) -> int:
    model = parse_model(cfg.model, cfg.theta_scale)
    if not model.has_law:
        raise NotSimulable(f"{model.name} cannot be sampled")
    kap = kappa_sequence(model, cfg.kappa, cfg.N)
    chain = prefix_chain(model, cfg.N, store=False)
    p_hit = chain.hit_probabilities(kap)
    sch = build_schedule(model, cfg.N, cfg.R)
    lo = max(model.start_index, 2)
    Ns = np.unique(np.round(np.geomspace(lo, cfg.N, 64)).astype(np.int64)) if cfg.N >= lo else []
    exp_traj = average_trajectory(p_hit, sch, Ns, cfg.normalization)
    path = PathSampler(model, kap, cfg.N).sample(cfg.seed, 0)
    path_traj = average_trajectory(path.hits.astype(float), sch, Ns, cfg.normalization)
    out = _outdir(cfg)
    write_csv(os.path.join(out, "plot_trajectory.csv"), ["N", "expected_average", "average"],
              zip(Ns, exp_traj, path_traj))
    write_json(os.path.join(out, "plot_summary.json"), cfg, "plot-data",
               {"points": len(Ns), "limit": asllt_limit(model, cfg.kappa, cfg.normalization)})
    print(f"plot-data: {len(Ns)} points")
    return EXIT_OK


_DISPATCH = {"inspect": cmd_inspect, "verify": cmd_verify, "simulate": cmd_simulate,
             "spectrum": cmd_spectrum, "plot-data": cmd_plot_data}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = config_from_args(ns)
        return _DISPATCH[ns.command](cfg)
    except AslltError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
