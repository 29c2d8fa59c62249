"""Time-averaged turbulence statistics and the dissipation-bound chain.

Finite-horizon estimators replace the ``limsup`` time averages.  Ensemble
expectations are taken *before* any square root or power (``U`` is the root
of the mean kinetic energy, not the mean of per-trajectory roots).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dynamics import FlowParams, forcing_field
from .errors import DataCorruptionError, ParameterError, UndefinedStatisticsError
from .field import Grid, SpectralVelocity, gradient, grad_l2_sq, norm_l2_sq, norm_lr_r
from .noise import NoiseSpec, rho_infty


@dataclass
class StatsAccumulator:
    """Left-endpoint, dt-weighted running integrals over one averaging window."""

    elapsed: float = 0.0
    int_grad_l2_sq: float = 0.0
    int_grad_lr_r: float = 0.0
    int_ke: float = 0.0
    int_trace_gg: float = 0.0
    int_f_dot_u: float = 0.0
    sum_noise_dot_u: float = 0.0
    sum_noise_sq: float = 0.0
    sum_noise_dot_f: float = 0.0
    boundary_ke_start: float = 0.0
    boundary_ke_end: float = 0.0
    boundary_fu_start: float = 0.0
    boundary_fu_end: float = 0.0
    qv_ratio_sum: float = 0.0
    qv_ratio_sq_sum: float = 0.0
    qv_count: int = 0
    steps: int = 0
    t_start: float = 0.0
    t_end: float = 0.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: d[f.name] for f in fields(cls)})


def accumulate(acc: StatsAccumulator, rec) -> StatsAccumulator:
    """Add one step record (in place) and return the accumulator."""
    vals = (rec.dt, rec.grad_l2_sq, rec.grad_lr_r, rec.ke_pre, rec.ke_post, rec.trace_gg,
            rec.f_dot_u, rec.noise_dot_u, rec.noise_sq)
    if not all(math.isfinite(v) for v in vals):
        raise DataCorruptionError(f"non-finite step record at t={rec.t}")
    dt = rec.dt
    if acc.steps == 0:
        acc.boundary_ke_start = rec.ke_pre
        acc.boundary_fu_start = rec.f_dot_u
        acc.t_start = rec.t
    acc.elapsed += dt
    acc.int_grad_l2_sq += dt * rec.grad_l2_sq
    acc.int_grad_lr_r += dt * rec.grad_lr_r
    acc.int_ke += dt * rec.ke_pre
    acc.int_trace_gg += dt * rec.trace_gg
    acc.int_f_dot_u += dt * rec.f_dot_u
    acc.sum_noise_dot_u += rec.noise_dot_u
    acc.sum_noise_sq += rec.noise_sq
    acc.sum_noise_dot_f += rec.noise_dot_f
    acc.boundary_ke_end = rec.ke_post
    acc.boundary_fu_end = rec.f_dot_u_post
    if rec.trace_gg > 0:
        q = rec.noise_sq / (rec.trace_gg * dt)
        acc.qv_ratio_sum += q
        acc.qv_ratio_sq_sum += q * q
        acc.qv_count += 1
    acc.steps += 1
    acc.t_end = rec.t + dt
    return acc


_ADDITIVE = ("elapsed", "int_grad_l2_sq", "int_grad_lr_r", "int_ke", "int_trace_gg", "int_f_dot_u",
             "sum_noise_dot_u", "sum_noise_sq", "sum_noise_dot_f", "qv_ratio_sum",
             "qv_ratio_sq_sum", "qv_count", "steps")


def concat(a: StatsAccumulator, b: StatsAccumulator) -> StatsAccumulator:
    """Accumulator of window ``a`` followed by window ``b``."""
    if a.steps == 0:
        return StatsAccumulator(**asdict(b))
    if b.steps == 0:
        return StatsAccumulator(**asdict(a))
    out = StatsAccumulator(**asdict(a))
    for name in _ADDITIVE:
        setattr(out, name, getattr(a, name) + getattr(b, name))
    out.boundary_ke_end = b.boundary_ke_end
    out.boundary_fu_end = b.boundary_fu_end
    out.t_end = b.t_end
    return out


@dataclass
class Statistics:
    eps0: float
    epsM: float
    eps: float
    U: float
    F: float
    L: float
    G2: float
    Re_nu: float
    Re_nubar: float
    tau: float
    T: float
    T0: float

    def to_dict(self):
        return asdict(self)


def forcing_scales(f: SpectralVelocity, grid: Grid, r: float):
    """Forcing amplitude ``F`` and length ``L``.

    ``L = min(ell, F / rms|grad f|, F / (mean |grad f|^r)^(1/r), F / max|grad f|)``.
    A zero force gives ``(0, ell)``.
    """
    vol = grid.volume
    F = math.sqrt(norm_l2_sq(f) / vol)
    if F == 0.0:
        warnings.warn("zero deterministic forcing: F = 0 and L defaults to the box size")
        return 0.0, grid.ell
    return F, float(min(forcing_length_candidates(f, grid, r)))


def forcing_length_candidates(f: SpectralVelocity, grid: Grid, r: float):
    vol = grid.volume
    F = math.sqrt(norm_l2_sq(f) / vol)
    gt = gradient(f)
    return [
        grid.ell,
        F / math.sqrt(grad_l2_sq(f) / vol),
        F / (norm_lr_r(gt, r) / vol) ** (1.0 / r),
        F / gt.max_norm(),
    ]


def _rates(accs, name):
    return np.array([getattr(a, name) / a.elapsed for a in accs])


def stderr(x) -> float:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return 0.0
    return float(np.std(x, ddof=1) / math.sqrt(x.size))


def finalize_many(accs, p: FlowParams, ns: NoiseSpec, grid: Grid, f: SpectralVelocity | None = None):
    """Pooled statistics over trajectories, expectation taken first."""
    accs = list(accs)
    if not accs or any(a.elapsed <= 0 for a in accs):
        raise UndefinedStatisticsError("statistics need a positive averaging time")
    if f is None:
        f = forcing_field(p.forcing, grid)
    vol = grid.volume
    F, L = forcing_scales(f, grid, p.r)
    eps0 = p.nu * float(np.mean(_rates(accs, "int_grad_l2_sq"))) / vol
    epsM = p.nu_bar * float(np.mean(_rates(accs, "int_grad_lr_r"))) / vol
    U = math.sqrt(max(float(np.mean(_rates(accs, "int_ke"))) / vol, 0.0))
    G2 = float(np.mean(_rates(accs, "int_trace_gg"))) / vol
    rho = rho_infty(ns)
    return Statistics(
        eps0=eps0,
        epsM=epsM,
        eps=eps0 + epsM,
        U=U,
        F=F,
        L=L,
        G2=G2,
        Re_nu=U * L / p.nu,
        Re_nubar=_re_nubar(L, U, p.nu_bar, p.r),
        tau=(rho * L / U) if U > 0 else (0.0 if rho == 0 else math.inf),
        T=float(np.mean([a.elapsed for a in accs])),
        T0=float(np.mean([a.t_start for a in accs])),
    )


def _re_nubar(L, U, nu_bar, r):
    """``L^(r-1) / (nu_bar U^(r-3))``; +inf when nu_bar = 0 or U^(r-3) is undefined."""
    if nu_bar == 0:
        return math.inf
    if U == 0:
        # r > 3 would give U^(r-3) = 0 (Re infinite); r < 3 is the documented +inf sentinel
        return L ** (r - 1) / nu_bar if r == 3 else math.inf
    return L ** (r - 1) / (nu_bar * U ** (r - 3))


def finalize(acc: StatsAccumulator, p: FlowParams, ns: NoiseSpec, grid: Grid, f=None) -> Statistics:
    return finalize_many([acc], p, ns, grid, f)


@dataclass
class FiniteHorizon:
    """Boundary terms a finite averaging window leaves in the bound chain.

    ``energy`` is ``E[||u(T)||^2 - ||u(T0)||^2] / (2 |D| (T - T0))`` and
    ``forcing`` is ``E[(f, u(T)) - (f, u(T0))] / (|D| (T - T0))``.
    """

    energy: float = 0.0
    forcing: float = 0.0

    @classmethod
    def from_accumulators(cls, accs, grid: Grid):
        accs = list(accs)
        vol = grid.volume
        e = np.mean([(a.boundary_ke_end - a.boundary_ke_start) / (2 * vol * a.elapsed) for a in accs])
        fu = np.mean([(a.boundary_fu_end - a.boundary_fu_start) / (vol * a.elapsed) for a in accs])
        return cls(float(e), float(fu))


@dataclass
class BoundReport:
    residual_B1: float
    residual_B2: float
    ratio_B3: float
    finite_T_boundary_term: float
    forcing_boundary_correction: float
    tol_B1: float
    tol_B2: float
    ratio_cap: float
    pass_B1: bool
    pass_B2: bool
    pass_B3: bool
    b2_viscosity: str = "nu_bar"

    @property
    def passed(self) -> bool:
        return self.pass_B1 and self.pass_B2 and self.pass_B3

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        return d


def b2_rhs(st: Statistics, p: FlowParams, b2_viscosity="nu_bar") -> float:
    """``U^2/L + U nu/(2 L^2) + eps0/(2U) + (1/r) visc U^(r-1)/L^r + (r-1)/r epsM/U``.

    ``visc`` is ``nu_bar`` by default; ``b2_viscosity="nu"`` reproduces the
    variant with the molecular viscosity in that term.
    """
    if b2_viscosity not in ("nu_bar", "nu"):
        raise ParameterError(f"b2_viscosity must be 'nu_bar' or 'nu', got {b2_viscosity!r}")
    U, L, r = st.U, st.L, p.r
    visc = p.nu_bar if b2_viscosity == "nu_bar" else p.nu
    return (U**2 / L + 0.5 * U * p.nu / L**2 + 0.5 * st.eps0 / U
            + visc * U ** (r - 1) / (r * L**r) + (r - 1) / r * st.epsM / U)


def b3_denominator(st: Statistics) -> float:
    return (1.0 + st.tau + 1.0 / st.Re_nu + 1.0 / st.Re_nubar) * st.U**3 / st.L


def bound_check(st: Statistics, p: FlowParams, boundary: FiniteHorizon | None = None,
                tol_B1=1e-8, tol_B2=1e-8, ratio_cap=4.0, b2_viscosity="nu_bar") -> BoundReport:
    """Slack of ``eps <= G^2/2 + F U`` (B1), of the Young-inequality bound on ``F`` (B2),
    and the ratio of ``eps`` to ``(1 + tau + 1/Re_nu + 1/Re_nubar) U^3 / L`` (B3)."""
    boundary = boundary or FiniteHorizon()
    if not (tol_B1 > 0 and tol_B2 > 0):
        raise ParameterError("tolerances must be positive")
    r1 = 0.5 * st.G2 + st.F * st.U - st.eps - boundary.energy
    if st.U == 0:
        if st.eps == 0 and st.F == 0 and st.G2 == 0:
            return BoundReport(r1, 0.0, math.nan, boundary.energy, 0.0, tol_B1, tol_B2,
                               ratio_cap, r1 >= -tol_B1, True, True, b2_viscosity)
        raise UndefinedStatisticsError("U = 0: bound ratios are undefined")
    corr = abs(boundary.forcing) / st.F if st.F > 0 else 0.0
    r2 = b2_rhs(st, p, b2_viscosity) + corr - st.F
    ratio = st.eps / b3_denominator(st)
    return BoundReport(
        residual_B1=r1,
        residual_B2=r2,
        ratio_B3=ratio,
        finite_T_boundary_term=boundary.energy,
        forcing_boundary_correction=corr,
        tol_B1=tol_B1,
        tol_B2=tol_B2,
        ratio_cap=ratio_cap,
        pass_B1=r1 >= -tol_B1,
        pass_B2=r2 >= -tol_B2,
        pass_B3=bool(math.isfinite(ratio) and ratio <= ratio_cap),
        b2_viscosity=b2_viscosity,
    )
