"""IMEX Euler-Maruyama stepping with an exact integrating factor.

One step from ``u`` at time ``t``::

    u_hat+ = E * (u_hat + dt N_hat(u) + phi f_hat + g(t, u) dW_hat),
    E      = exp(-nu |k|^2 dt),   phi = (exp(nu |k|^2 dt) - 1) / (nu |k|^2)

``N`` collects advection and the power-law stress, the noise is evaluated at
the left endpoint (Ito), and the time-independent force is integrated
exactly through the integrating factor (``phi -> dt`` as ``dt -> 0``), which
makes steady Stokes balances fixed points of the scheme for any ``dt``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import FlowParams, explicit_terms, forcing_field
from .errors import DataCorruptionError, ParameterError
from .field import (
    Grid,
    SpectralVelocity,
    _project,
    divergence_residual,
    spectral_sq_sum,
)
from .noise import NoiseSpec, RngStream, sample_increment, trace_g_star_g
from .stats import StatsAccumulator, accumulate

log = logging.getLogger(__name__)

CSV_COLUMNS = ("t", "dt", "ke", "grad_l2_sq", "grad_lr_r", "trace_gg", "f_dot_u",
               "noise_dot_u", "noise_sq", "div_residual")


@dataclass
class SimState:
    u: SpectralVelocity
    t: float = 0.0
    step_index: int = 0
    rng: RngStream | None = None


@dataclass
class StepRecord:
    t: float
    dt: float
    ke_pre: float
    ke_post: float
    grad_l2_sq: float
    grad_lr_r: float
    trace_gg: float
    f_dot_u: float
    noise_dot_u: float
    noise_sq: float
    div_residual: float
    noise_dot_f: float = 0.0
    f_dot_u_post: float = 0.0
    # ||u + Delta||^2, (u, Delta), ||Delta||^2 for Delta = dt N + phi f + g dW
    ke_mid: float = 0.0
    incr_dot_u: float = 0.0
    incr_sq: float = 0.0

    def csv_row(self):
        return (self.t, self.dt, self.ke_pre, self.grad_l2_sq, self.grad_lr_r, self.trace_gg,
                self.f_dot_u, self.noise_dot_u, self.noise_sq, self.div_residual)


@dataclass(frozen=True)
class DtPolicy:
    """``fixed``: always ``dt_max``.  ``cfl``: the advective/power-law limits below."""

    kind: str = "fixed"
    dt_max: float = 1e-2
    c_adv: float = 0.5
    c_visc: float = 0.25
    floor: float = 1e-12

    def __post_init__(self):
        if self.kind not in ("fixed", "cfl"):
            raise ParameterError(f"dt policy must be 'fixed' or 'cfl', got {self.kind!r}")
        if not self.dt_max > 0:
            raise ParameterError(f"dt_max must be positive, got {self.dt_max}")


@dataclass
class _Eval:
    """Pre-step quantities shared by the step-size control and the step."""

    explicit: np.ndarray
    u_phys: np.ndarray
    grad: np.ndarray

    @property
    def u_max(self) -> float:
        return float(np.sqrt(np.max(np.sum(self.u_phys**2, axis=0))))

    @property
    def grad_max(self) -> float:
        return float(np.sqrt(np.max(np.einsum("ij...,ij...->...", self.grad, self.grad))))


def _evaluate(u: SpectralVelocity, p: FlowParams) -> _Eval:
    return _Eval(*explicit_terms(u.grid, u.coeffs, p))


def dt_candidates(grid: Grid, p: FlowParams, policy: DtPolicy, u_max: float, grad_max: float):
    """Advective and power-law step limits; linear viscosity is exempt."""
    if not (math.isfinite(u_max) and math.isfinite(grad_max)):
        raise DataCorruptionError("non-finite velocity in step-size control")
    fl = policy.floor
    adv = policy.c_adv * grid.dx / (u_max + fl)
    if p.nu_bar and p.r != 2:
        visc = policy.c_visc * grid.dx**2 / (3.0 * p.nu_bar * (p.r - 1) * (grad_max + fl) ** (p.r - 2) + fl)
    else:
        visc = math.inf
    return {"max": policy.dt_max, "advective": adv, "viscous": visc}


def stable_dt(s: SimState, p: FlowParams, policy: DtPolicy, _cache: _Eval | None = None) -> float:
    if policy.kind == "fixed":
        return policy.dt_max
    ev = _cache or _evaluate(s.u, p)
    return min(dt_candidates(s.u.grid, p, policy, ev.u_max, ev.grad_max).values())


def _integrating_factors(grid: Grid, nu: float, dt: float):
    a = nu * grid.k2 * dt
    E = np.exp(-a)
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = np.where(a > 0, np.expm1(a) / (nu * grid.k2), dt)
    return E, phi


def step(s: SimState, p: FlowParams, ns: NoiseSpec, dt: float, f: SpectralVelocity | None = None,
         dB=None, _cache: _Eval | None = None):
    """Advance one step; returns ``(new_state, record)``."""
    if not (dt > 0 and math.isfinite(dt)):
        raise ParameterError(f"time step must be positive, got {dt}")
    g = s.u.grid
    if f is None:
        f = forcing_field(p.forcing, g)
    u = s.u
    c = u.coeffs
    ev = _cache or _evaluate(u, p)
    E, phi = _integrating_factors(g, p.implicit_nu, dt)

    xi, _ = sample_increment(ns, u, s.t, dt, s.rng, dB) if not ns.is_off else (SpectralVelocity.zeros(g), None)
    delta = dt * ev.explicit + phi * f.coeffs + xi.coeffs
    mid = c + delta
    new = _project(g, (E * mid) * g.dealias_mask)
    if not np.all(np.isfinite(new)):
        raise DataCorruptionError(f"non-finite state after step at t={s.t}")

    def dot(a, b):
        return float(g.volume * np.sum((a * np.conj(b)).real * g.weights))

    frob2 = np.einsum("ij...,ij...->...", ev.grad, ev.grad)
    rec = StepRecord(
        t=s.t,
        dt=dt,
        ke_pre=spectral_sq_sum(g, c),
        ke_post=spectral_sq_sum(g, new),
        grad_l2_sq=spectral_sq_sum(g, c, g.k2),
        grad_lr_r=float(g.dx**3 * np.sum(frob2 ** (p.r / 2.0))),
        trace_gg=trace_g_star_g(ns, u, s.t),
        f_dot_u=dot(f.coeffs, c),
        noise_dot_u=dot(xi.coeffs, c),
        noise_sq=spectral_sq_sum(g, xi.coeffs),
        div_residual=divergence_residual(g, new),
        noise_dot_f=dot(xi.coeffs, f.coeffs),
        f_dot_u_post=dot(f.coeffs, new),
        ke_mid=spectral_sq_sum(g, mid),
        incr_dot_u=dot(delta, c),
        incr_sq=spectral_sq_sum(g, delta),
    )
    return SimState(SpectralVelocity(g, new), s.t + dt, s.step_index + 1, s.rng), rec


@dataclass(frozen=True)
class InitSpec:
    """Initial velocity: ``zero``, a ``mode`` list, or a seeded ``random`` band-limited field."""

    kind: str = "zero"
    modes: tuple = ()
    energy: float = 0.0
    kmax: int = 2

    def __post_init__(self):
        if self.kind not in ("zero", "mode", "random"):
            raise ParameterError(f"init type must be zero, mode or random, got {self.kind!r}")
        if self.energy < 0:
            raise ParameterError("initial energy must be nonnegative")


def initial_field(spec: InitSpec, grid: Grid, seed: int = 0, index: int = 0) -> SpectralVelocity:
    if spec.kind == "zero":
        return SpectralVelocity.zeros(grid)
    if spec.kind == "mode":
        v = SpectralVelocity.from_modes(grid, spec.modes)
        return SpectralVelocity(grid, _project(grid, v.coeffs))
    if spec.kmax < 1 or spec.kmax > grid.dealias_cutoff:
        raise ParameterError(f"init.kmax must lie in [1, n/3], got {spec.kmax}")
    return random_field(grid, RngStream(seed, index, substream=1).generator, spec.kmax, spec.energy)


def random_field(grid: Grid, gen: np.random.Generator, kmax, energy) -> SpectralVelocity:
    """Random solenoidal field supported on ``max |kappa_i| <= kmax`` with ``||u||^2 = energy``."""
    samples = gen.standard_normal((3,) + grid.physical_shape)
    v = SpectralVelocity.from_physical(grid, samples)
    band = np.ones(grid.spectral_shape, dtype=bool)
    for kc in grid.kappa:
        band = band & (np.abs(kc) <= kmax)
    c = v.coeffs * band
    e = spectral_sq_sum(grid, c)
    if e > 0:
        c *= math.sqrt(energy / e)
    return SpectralVelocity(grid, c)


@dataclass(frozen=True)
class RunSetup:
    """Everything one trajectory needs, independent of how it was configured."""

    grid: Grid
    params: FlowParams
    noise: NoiseSpec
    dt_policy: DtPolicy
    T: float
    burn_in: float = 0.0
    init: InitSpec = InitSpec()

    def __post_init__(self):
        if self.T < 0 or self.burn_in < 0:
            raise ParameterError("T and burn_in must be nonnegative")


@dataclass
class TrajectoryReport:
    index: int
    seed: int
    initial_ke: float
    initial_div_residual: float
    records: list
    acc_raw: StatsAccumulator
    acc: StatsAccumulator
    final: SimState | None
    valid: bool = True
    error: str | None = None
    max_div_residual: float = 0.0

    def ke_series(self):
        """``(times, ke)`` including the initial and every post-step state."""
        t = [0.0 if not self.records else self.records[0].t]
        ke = [self.initial_ke]
        for r in self.records:
            t.append(r.t + r.dt)
            ke.append(r.ke_post)
        return np.array(t), np.array(ke)


def run_trajectory(setup: RunSetup, seed: int = 0, index: int = 0, start: SimState | None = None,
                   keep_records: bool = True, checkpoint_every: int | None = None,
                   on_checkpoint: Callable[[SimState], None] | None = None,
                   dB_source: Callable[[float, float], np.ndarray] | None = None) -> TrajectoryReport:
    """Integrate from ``start`` (or the configured initial field at t = 0) up to ``setup.T``.

    Statistics accumulate only over steps whose left endpoint is at or after
    ``burn_in``; ``acc_raw`` covers the whole run.  An instability aborts the
    run and returns a partial report with ``valid=False``.
    ``dB_source(t, dt)``, if given, supplies the Brownian increments.
    """
    g, p, ns = setup.grid, setup.params, setup.noise
    f = forcing_field(p.forcing, g)
    if start is None:
        start = SimState(initial_field(setup.init, g, seed, index), 0.0, 0, RngStream(seed, index))
    s = start
    div0 = s.u.divergence_residual()
    report = TrajectoryReport(index, seed, spectral_sq_sum(g, s.u.coeffs), div0,
                              [], StatsAccumulator(), StatsAccumulator(), s, max_div_residual=div0)
    T = setup.T
    eps_t = 1e-12 * max(T, 1.0)
    try:
        while T - s.t > eps_t:
            ev = _evaluate(s.u, p)
            dt = min(stable_dt(s, p, setup.dt_policy, ev), T - s.t)
            dB = dB_source(s.t, dt) if dB_source is not None else None
            s, rec = step(s, p, ns, dt, f, dB, ev)
            report.max_div_residual = max(report.max_div_residual, rec.div_residual)
            accumulate(report.acc_raw, rec)
            if rec.t >= setup.burn_in - 1e-9 * dt:
                accumulate(report.acc, rec)
            if keep_records:
                report.records.append(rec)
            if checkpoint_every and on_checkpoint and s.step_index % checkpoint_every == 0:
                on_checkpoint(s)
    except DataCorruptionError as exc:
        log.warning("trajectory %d aborted at t=%.6g: %s", index, s.t, exc)
        report.valid = False
        report.error = str(exc)
    report.final = s
    return report


def write_records_csv(path, records, meta=None):
    """One row per record; ``meta`` goes into a leading ``#`` comment line."""
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(meta.items())) + "\n")
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([repr(float(v)) for v in r.csv_row()])


def read_records_csv(path, final_ke=None):
    """Inverse of :func:`write_records_csv`.

    ``ke_post`` of each row is the next row's ``ke``; pass ``final_ke`` for the
    last row (otherwise it is NaN).
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    out = []
    for i, row in enumerate(rows):
        nxt = float(rows[i + 1]["ke"]) if i + 1 < len(rows) else (math.nan if final_ke is None else final_ke)
        out.append(StepRecord(
            t=float(row["t"]), dt=float(row["dt"]), ke_pre=float(row["ke"]), ke_post=nxt,
            grad_l2_sq=float(row["grad_l2_sq"]), grad_lr_r=float(row["grad_lr_r"]),
            trace_gg=float(row["trace_gg"]), f_dot_u=float(row["f_dot_u"]),
            noise_dot_u=float(row["noise_dot_u"]), noise_sq=float(row["noise_sq"]),
            div_residual=float(row["div_residual"]),
        ))
    return out
