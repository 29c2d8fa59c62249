"""Monte Carlo ensembles over independent noise streams.

Trajectory ``k`` draws from stream index ``k`` of the master seed, so any
subset of trajectories can be run anywhere and merged later.  All reductions
walk the trajectories in index order, which makes the pooled numbers
independent of completion order and of the worker count.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .audit import martingale_summary
from .dynamics import forcing_field
from .errors import EnsembleFailure, MergeError, ParameterError, UndefinedStatisticsError
from .integrate import RunSetup, run_trajectory
from .stats import (
    FiniteHorizon,
    StatsAccumulator,
    bound_check,
    finalize,
    finalize_many,
    stderr,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnsembleConfig:
    setup: RunSetup
    M: int
    master_seed: int = 0
    parallel_width: int = 1
    config_hash: str = ""
    indices: tuple | None = None
    ratio_cap: float = 4.0
    b2_viscosity: str = "nu_bar"

    def __post_init__(self):
        if self.M < 1:
            raise ParameterError(f"ensemble size must be >= 1, got {self.M}")
        if self.parallel_width < 1:
            raise ParameterError("parallel width must be >= 1")

    @property
    def trajectory_indices(self):
        return tuple(range(self.M)) if self.indices is None else tuple(self.indices)


@dataclass
class TrajectoryResult:
    """What an ensemble keeps from one trajectory."""

    index: int
    valid: bool
    error: str | None
    acc: StatsAccumulator
    acc_raw: StatsAccumulator
    max_div_residual: float
    initial_ke: float
    final_t: float

    def to_dict(self):
        return {
            "index": self.index,
            "valid": self.valid,
            "error": self.error,
            "acc": self.acc.to_dict(),
            "acc_raw": self.acc_raw.to_dict(),
            "max_div_residual": self.max_div_residual,
            "initial_ke": self.initial_ke,
            "final_t": self.final_t,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["index"], d["valid"], d["error"], StatsAccumulator.from_dict(d["acc"]),
                   StatsAccumulator.from_dict(d["acc_raw"]), d["max_div_residual"], d["initial_ke"],
                   d["final_t"])


def run_one(setup: RunSetup, master_seed: int, index: int) -> TrajectoryResult:
    rep = run_trajectory(setup, master_seed, index, keep_records=False)
    return TrajectoryResult(index, rep.valid, rep.error, rep.acc, rep.acc_raw, rep.max_div_residual,
                            rep.initial_ke, rep.final.t)


def _run_one_args(args):
    return run_one(*args)


@dataclass
class EnsemblePartial:
    """Trajectory results for a subset of indices under one configuration."""

    config_hash: str
    master_seed: int
    results: dict = field(default_factory=dict)

    @property
    def indices(self):
        return sorted(self.results)

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "results": [self.results[k].to_dict() for k in self.indices],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["config_hash"], d["master_seed"],
                   {r["index"]: TrajectoryResult.from_dict(r) for r in d["results"]})


def merge(a: EnsemblePartial, b: EnsemblePartial) -> EnsemblePartial:
    """Union of two partials; an empty partial is the identity."""
    if not a.results:
        return EnsemblePartial(b.config_hash, b.master_seed, dict(b.results))
    if not b.results:
        return EnsemblePartial(a.config_hash, a.master_seed, dict(a.results))
    if a.config_hash != b.config_hash:
        raise MergeError(f"config hash mismatch: {a.config_hash} vs {b.config_hash}")
    if a.master_seed != b.master_seed:
        raise MergeError(f"master seed mismatch: {a.master_seed} vs {b.master_seed}")
    overlap = set(a.results) & set(b.results)
    if overlap:
        raise MergeError(f"trajectory indices overlap: {sorted(overlap)}")
    out = {**a.results, **b.results}
    return EnsemblePartial(a.config_hash, a.master_seed, {k: out[k] for k in sorted(out)})


def run_partial(cfg: EnsembleConfig) -> EnsemblePartial:
    idx = cfg.trajectory_indices
    jobs = [(cfg.setup, cfg.master_seed, k) for k in idx]
    if cfg.parallel_width == 1 or len(jobs) == 1:
        results = [run_one(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(cfg.parallel_width, len(jobs))) as pool:
            results = list(pool.map(_run_one_args, jobs))
    return EnsemblePartial(cfg.config_hash, cfg.master_seed, {r.index: r for r in sorted(results, key=lambda r: r.index)})


def run_ensemble(cfg: EnsembleConfig) -> "EnsembleReport":
    return build_report(run_partial(cfg), cfg.setup, cfg.ratio_cap, cfg.b2_viscosity)


def _budget_parts(acc: StatsAccumulator, p, vol):
    """Per-trajectory realized energy-budget residual and its term scale."""
    lhs = (acc.boundary_ke_end - acc.boundary_ke_start, 2 * p.nu * acc.int_grad_l2_sq,
           2 * p.nu_bar * acc.int_grad_lr_r)
    rhs = (acc.sum_noise_sq, 2 * acc.int_f_dot_u, 2 * acc.sum_noise_dot_u)
    return sum(lhs) - sum(rhs), sum(map(abs, lhs)) + sum(map(abs, rhs))


def bound_tolerances(accs, st, p, grid):
    """Statistical plus quadrature tolerances for B1 and B2.

    B1: three standard errors of the per-trajectory linearization of
    ``G^2/2 + F U - eps`` plus the mean realized budget defect per unit
    volume and time.  B2: three standard errors of the forcing-side
    martingale ``sum (g dW, f) / (|D| T F)`` plus the relative budget defect
    times ``F``.
    """
    vol = grid.volume
    x = []
    defect, rel, mart = [], [], []
    for a in accs:
        T = a.elapsed
        eps_k = (p.nu * a.int_grad_l2_sq + p.nu_bar * a.int_grad_lr_r) / (vol * T)
        ke_k = a.int_ke / (vol * T)
        lin_u = ke_k / (2 * st.U) if st.U > 0 else 0.0
        x.append(0.5 * a.int_trace_gg / (vol * T) + st.F * lin_u - eps_k)
        res, scale = _budget_parts(a, p, vol)
        defect.append(res / (2 * vol * T))
        rel.append(abs(res) / scale if scale > 0 else 0.0)
        mart.append(a.sum_noise_dot_f / (vol * T))
    tol1 = 3 * stderr(x) + abs(float(np.mean(defect)))
    tol2 = (3 * stderr(mart) / st.F if st.F > 0 else 0.0) + float(np.mean(rel)) * st.F
    floor = 1e-12 * max(1.0, st.eps, st.F)
    return tol1 + floor, tol2 + floor


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating,)):
        return _clean(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


@dataclass
class EnsembleReport:
    config_hash: str
    master_seed: int
    M: int
    survivors: list
    failed: list
    per_trajectory: list
    pooled: dict | None
    pooled_raw: dict | None
    stderr: dict
    bound: dict | None
    audit: dict
    max_div_residual: float
    grid_n: int = 0
    code_version: str = __version__

    @property
    def passed(self) -> bool:
        ok = self.bound is None or self.bound.get("passed", False)
        return bool(ok and all(v.get("passed", True) for v in self.audit.values() if isinstance(v, dict)))

    def to_dict(self):
        return _clean({
            "code_version": self.code_version,
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "M": self.M,
            "n": len(self.survivors),
            "grid_n": self.grid_n,
            "seed_set": {"master_seed": self.master_seed, "indices": self.survivors},
            "survivors": self.survivors,
            "failed": self.failed,
            "per_trajectory": self.per_trajectory,
            "pooled": self.pooled,
            "pooled_raw": self.pooled_raw,
            "stderr": self.stderr,
            "bound": self.bound,
            "audit": self.audit,
            "max_div_residual": self.max_div_residual,
            "passed": self.passed,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_RATES = {
    "eps0": ("int_grad_l2_sq", "nu"),
    "epsM": ("int_grad_lr_r", "nu_bar"),
    "ke": ("int_ke", None),
    "trace_gg": ("int_trace_gg", None),
    "f_dot_u": ("int_f_dot_u", None),
}


def _pooled_stderr(accs, p, vol):
    out = {}
    for name, (attr, coef) in _RATES.items():
        c = 1.0 if coef is None else getattr(p, coef)
        out[name] = stderr([c * getattr(a, attr) / (a.elapsed * vol) for a in accs])
    out["eps"] = stderr([(p.nu * a.int_grad_l2_sq + p.nu_bar * a.int_grad_lr_r) / (a.elapsed * vol) for a in accs])
    return out


def build_report(partial: EnsemblePartial, setup: RunSetup, ratio_cap=4.0, b2_viscosity="nu_bar") -> EnsembleReport:
    """Pool the surviving trajectories; fewer than half surviving is a failure."""
    res = [partial.results[k] for k in partial.indices]
    M = len(res)
    if M == 0:
        raise ParameterError("empty ensemble")
    ok = [r for r in res if r.valid]
    failed = [{"index": r.index, "error": r.error} for r in res if not r.valid]
    if 2 * len(ok) < M:
        raise EnsembleFailure(f"only {len(ok)} of {M} trajectories survived")
    for f in failed:
        log.warning("trajectory %d aborted: %s", f["index"], f["error"])
    g, p, ns = setup.grid, setup.params, setup.noise
    f = forcing_field(p.forcing, g)
    vol = g.volume
    accs = [r.acc for r in ok]
    per, pooled, pooled_raw, bound, se = [], None, None, None, {}
    if all(a.elapsed > 0 for a in accs):
        for r in ok:
            per.append({"index": r.index, **finalize(r.acc, p, ns, g, f).to_dict()})
        st = finalize_many(accs, p, ns, g, f)
        pooled = st.to_dict()
        pooled_raw = finalize_many([r.acc_raw for r in ok], p, ns, g, f).to_dict()
        se = _pooled_stderr(accs, p, vol)
        tol1, tol2 = bound_tolerances(accs, st, p, g)
        try:
            br = bound_check(st, p, FiniteHorizon.from_accumulators(accs, g), tol1, tol2, ratio_cap, b2_viscosity)
            bound = br.to_dict()
        except UndefinedStatisticsError as exc:
            bound = {"passed": False, "error": str(exc)}
    audit = {"martingale": martingale_summary(accs)}
    div = max(r.max_div_residual for r in ok)
    audit["incompressibility"] = {"max_div_residual": div, "passed": div <= 1e-12}
    return EnsembleReport(partial.config_hash, partial.master_seed, M, [r.index for r in ok], failed, per,
                          pooled, pooled_raw, se, bound, audit, div, g.n)
