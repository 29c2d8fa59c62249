"""Checks of the energetic and probabilistic structure on simulation output.

Four audits:

* the windowed energy inequality on one trajectory (:func:`check_budget`),
* mean-zero of the stochastic energy input across an ensemble
  (:func:`check_martingale_zero`),
* the Gronwall envelope on the mean kinetic energy (:func:`check_envelope`),
* the functional inequalities used to bound the forcing terms
  (:func:`check_pointwise_inequalities`).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import FlowParams, forcing_field, stress_samples
from .errors import AssumptionViolationError, InsufficientSampleError, ParameterError, WindowError
from .field import Grid, SpectralVelocity, gradient_samples, spectral_sq_sum
from .noise import NoiseSpec, rho_infty
from .stats import stderr

LHS_TERMS = ("delta_ke", "viscous", "power_law")
RHS_TERMS = ("trace", "forcing", "martingale")


@dataclass
class BudgetWindow:
    """``residual = sum(lhs) - sum(rhs)``; the inequality holds when ``residual <= tolerance``."""

    t_start: float
    t_end: float
    lhs_terms: dict
    rhs_terms: dict
    residual: float
    tolerance: float
    qv: str = "realized"

    @property
    def passed(self) -> bool:
        return self.residual <= self.tolerance

    @property
    def scale(self) -> float:
        return sum(abs(v) for v in self.lhs_terms.values()) + sum(abs(v) for v in self.rhs_terms.values())

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        return d


def _contiguous(records, rtol=1e-9):
    for a, b in zip(records, records[1:]):
        end = a.t + a.dt
        if abs(b.t - end) > rtol * max(1.0, abs(end)):
            raise WindowError(f"gap in step records between t={end!r} and t={b.t!r}")


def check_budget(records, p: FlowParams, window=None, qv="realized", tol_factor=1.0,
                 tol=None) -> BudgetWindow:
    """Energy inequality over the records whose left endpoint lies in ``window``.

    ``qv="realized"`` uses the realized quadratic variation ``sum ||g dW||^2``
    for the Ito correction; ``qv="trace"`` uses ``int Tr(g* g) dt``.  With the
    realized form the residual is a pure time-discretization error.

    The default tolerance is ``tol_factor * max(dt) * scale / window_length``
    where ``scale`` is the sum of absolute term sizes, i.e. a first-order
    quadrature bound that halves with ``dt``.
    """
    if qv not in ("realized", "trace"):
        raise ParameterError(f"qv must be 'realized' or 'trace', got {qv!r}")
    recs = list(records)
    if window is not None:
        t0, t1 = window
        eps = 1e-9 * max(1.0, abs(t1))
        recs = [r for r in recs if r.t >= t0 - eps and r.t + r.dt <= t1 + eps]
    if not recs:
        z = {k: 0.0 for k in LHS_TERMS}
        return BudgetWindow(0.0, 0.0, z, {k: 0.0 for k in RHS_TERMS}, 0.0, tol or 1e-300, qv)
    _contiguous(recs)
    lhs = {
        "delta_ke": recs[-1].ke_post - recs[0].ke_pre,
        "viscous": 2 * p.nu * sum(r.dt * r.grad_l2_sq for r in recs),
        "power_law": 2 * p.nu_bar * sum(r.dt * r.grad_lr_r for r in recs),
    }
    rhs = {
        "trace": sum(r.noise_sq for r in recs) if qv == "realized" else sum(r.dt * r.trace_gg for r in recs),
        "forcing": 2 * sum(r.dt * r.f_dot_u for r in recs),
        "martingale": 2 * sum(r.noise_dot_u for r in recs),
    }
    residual = sum(lhs.values()) - sum(rhs.values())
    w = BudgetWindow(recs[0].t, recs[-1].t + recs[-1].dt, lhs, rhs, residual, 0.0, qv)
    if tol is None:
        length = w.t_end - w.t_start
        tol = tol_factor * max(r.dt for r in recs) * w.scale / length + 1e-12 * w.scale
    if not tol > 0:
        tol = 1e-300
    w.tolerance = tol
    return w


def step_identity_error(rec) -> float:
    """Relative defect of ``||u + D||^2 = ||u||^2 + 2 (u, D) + ||D||^2`` for one step."""
    lhs = rec.ke_mid
    rhs = rec.ke_pre + 2 * rec.incr_dot_u + rec.incr_sq
    scale = max(abs(lhs), rec.ke_pre + rec.incr_sq, 1e-300)
    return abs(lhs - rhs) / scale


def brownian_path(master_seed, n_modes, dt_fine, n_steps, index=0):
    """Fine Brownian increments, shape ``(n_steps, n_modes)``, from a dedicated stream."""
    from .noise import RngStream

    rng = RngStream(master_seed, index, substream=2)
    return rng.normals(n_steps * n_modes).reshape(n_steps, n_modes) * math.sqrt(dt_fine)


def coarse_source(path, dt_fine):
    """``dB_source(t, dt)`` summing the fine increments under one coarse step."""

    def source(t, dt):
        i = int(round(t / dt_fine))
        m = int(round(dt / dt_fine))
        if m < 1 or abs(m * dt_fine - dt) > 1e-9 * dt or i + m > len(path):
            raise ParameterError(f"step (t={t}, dt={dt}) is not aligned with the fine path")
        return path[i : i + m].sum(axis=0)

    return source


@dataclass
class ConvergenceReport:
    dts: list
    residuals: list
    ratios: list
    min_ratio: float

    def passed(self, factor=1.6) -> bool:
        return self.min_ratio >= factor


def budget_convergence(setup, dts, seed=0, index=0, qv="realized", start=None) -> ConvergenceReport:
    """Budget residual at each ``dt`` with one shared Brownian path.

    ``dts`` must be integer multiples of the smallest.  Each level runs a
    fixed-step trajectory over ``[0, setup.T]``; the ratios are
    ``|residual(dt)| / |residual(dt/2)|`` for consecutive levels.
    """
    from dataclasses import replace

    from .integrate import DtPolicy, run_trajectory

    dts = sorted(dts, reverse=True)
    fine = dts[-1]
    n_steps = int(round(setup.T / fine))
    path = brownian_path(seed, len(setup.noise.basis), fine, n_steps, index)
    src = coarse_source(path, fine)
    residuals = []
    for dt in dts:
        su = replace(setup, dt_policy=DtPolicy("fixed", dt))
        rep = run_trajectory(su, seed, index, start=_fresh(start), dB_source=src)
        if not rep.valid:
            raise ParameterError(f"calibration run at dt={dt} aborted: {rep.error}")
        residuals.append(check_budget(rep.records, setup.params, qv=qv).residual)
    ratios = [abs(a) / abs(b) if b != 0 else math.inf for a, b in zip(residuals, residuals[1:])]
    return ConvergenceReport(dts, residuals, ratios, min(ratios) if ratios else math.inf)


def _fresh(start):
    if start is None:
        return None
    from .integrate import SimState

    return SimState(start.u.copy(), start.t, start.step_index, start.rng.copy() if start.rng else None)


@dataclass
class MartingaleReport:
    M: int
    mean: float
    stderr: float
    passed_mean: bool
    qv_ratio: float
    qv_stderr: float
    passed_variance: bool
    trivial: bool = False

    @property
    def passed(self) -> bool:
        return self.passed_mean and self.passed_variance

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        return d


def check_martingale_zero(accs, min_trajectories=8) -> MartingaleReport:
    """Ensemble mean of ``2 sum (g dW, u_pre)`` against 0 (3 standard errors) and the
    mean per-step ratio ``||g dW||^2 / (Tr(g* g) dt)`` against 1 (5 standard errors)."""
    accs = list(accs)
    M = len(accs)
    if M < min_trajectories:
        raise InsufficientSampleError(f"martingale check needs at least {min_trajectories} trajectories, got {M}")
    x = np.array([2.0 * a.sum_noise_dot_u for a in accs])
    if all(a.qv_count == 0 for a in accs):
        ok = bool(np.all(x == 0.0))
        return MartingaleReport(M, float(np.mean(x)), 0.0, ok, 1.0, 0.0, True, trivial=True)
    mean, se = float(np.mean(x)), stderr(x)
    pass_mean = abs(mean) <= 3 * se if se > 0 else mean == 0.0
    q = np.array([a.qv_ratio_sum / a.qv_count for a in accs if a.qv_count])
    qm, qse = float(np.mean(q)), stderr(q)
    return MartingaleReport(M, mean, se, bool(pass_mean), qm, qse, bool(abs(qm - 1.0) <= 5 * qse))


def martingale_summary(accs, min_trajectories=8) -> dict:
    """Report dict for an ensemble: trivial pass without noise, skipped when too small."""
    accs = list(accs)
    if all(a.qv_count == 0 and a.sum_noise_dot_u == 0.0 for a in accs):
        return {"trivial": True, "passed": True, "M": len(accs)}
    if len(accs) < min_trajectories:
        return {"skipped": f"needs >= {min_trajectories} trajectories, have {len(accs)}", "M": len(accs)}
    return check_martingale_zero(accs, min_trajectories).to_dict()


@dataclass
class EnvelopeCheck:
    times: np.ndarray
    empirical: np.ndarray
    envelope: np.ndarray
    margin: np.ndarray
    mc_stderr: np.ndarray
    beta: float

    @property
    def passed(self) -> bool:
        return bool(np.all(self.empirical <= self.envelope + 3 * self.mc_stderr + 1e-12 * np.abs(self.envelope)))

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()} | {
            "passed": self.passed
        }


def envelope_params(p: FlowParams, ns: NoiseSpec, grid: Grid, f: SpectralVelocity | None = None):
    """``(beta, source)`` with ``envelope = E0 e^(-beta t) + source (1 - e^(-beta t)) / beta``."""
    if f is None:
        f = forcing_field(p.forcing, grid)
    lam = p.nu * grid.lambda1
    rho = rho_infty(ns)
    if ns.mode == "multiplicative" and not ns.is_off:
        if rho >= lam:
            raise AssumptionViolationError(
                f"multiplicative noise needs rho_inf < nu lambda_1 for a uniform energy bound "
                f"(rho_inf = {rho:.6g}, nu lambda_1 = {lam:.6g})"
            )
        beta = lam - rho
    else:
        beta = lam
    return beta, rho + spectral_sq_sum(grid, f.coeffs) / lam


def envelope(t, e0, beta, source):
    t = np.asarray(t, dtype=float)
    return e0 * np.exp(-beta * t) - source * np.expm1(-beta * t) / beta


def check_envelope(times, ke, p: FlowParams, ns: NoiseSpec, grid: Grid, f=None) -> EnvelopeCheck:
    """``ke`` has one row per trajectory, sampled at ``times`` (with ``times[0] = 0``)."""
    ke = np.atleast_2d(np.asarray(ke, dtype=float))
    times = np.asarray(times, dtype=float)
    if ke.shape[1] != times.size:
        raise ParameterError("ke samples do not match the time grid")
    beta, source = envelope_params(p, ns, grid, f)
    emp = ke.mean(axis=0)
    se = ke.std(axis=0, ddof=1) / math.sqrt(ke.shape[0]) if ke.shape[0] > 1 else np.zeros_like(emp)
    env = envelope(times - times[0], emp[0], beta, source)
    return EnvelopeCheck(times, emp, env, env - emp, se, beta)


@dataclass
class PointwiseReport:
    rows: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self):
        return {"passed": self.passed, "violations": self.violations, "rows": self.rows}


def check_pointwise_inequalities(snapshots, f: SpectralVelocity, p: FlowParams) -> PointwiseReport:
    """Poincare, Cauchy-Schwarz, double Holder and the sup-norm bound on the advection term.

    Each entry of the report rows is ``(lhs, rhs)`` for one inequality.
    """
    grid = f.grid
    vol_w = grid.dx**3
    gf = gradient_samples(grid, f.coeffs)
    gf_frob = np.sqrt(np.einsum("ij...,ij...->...", gf, gf))
    gf_l2 = spectral_sq_sum(grid, f.coeffs, grid.k2)
    gf_lr = vol_w * float(np.sum(gf_frob**p.r))
    gf_inf = float(gf_frob.max())
    rep = PointwiseReport()
    for sid, u in enumerate(snapshots):
        if u.grid != grid:
            raise ParameterError("snapshot grid differs from the forcing grid")
        gu = gradient_samples(grid, u.coeffs)
        up = u.physical()
        u_l2 = spectral_sq_sum(grid, u.coeffs)
        gu_l2 = spectral_sq_sum(grid, u.coeffs, grid.k2)
        gu_lr = vol_w * float(np.sum(np.einsum("ij...,ij...->...", gu, gu) ** (p.r / 2)))
        cs = vol_w * float(np.sum(gu * gf))
        hol = vol_w * float(np.sum(stress_samples(gu, 1.0, p.r) * gf))
        adv = vol_w * float(np.sum(np.einsum("i...,j...,ij...->...", up, up, gf)))
        row = {
            "snapshot": sid,
            "poincare": (grid.lambda1 * u_l2, gu_l2 * (1 + 1e-10)),
            "cauchy_schwarz": (abs(cs), math.sqrt(gu_l2 * gf_l2) * (1 + 1e-10)),
            "holder": (abs(hol), gu_lr ** ((p.r - 1) / p.r) * gf_lr ** (1 / p.r) * (1 + 1e-8)),
            "advection_sup": (abs(adv), gf_inf * u_l2 * (1 + 1e-10)),
        }
        for name in ("poincare", "cauchy_schwarz", "holder", "advection_sup"):
            lhs, rhs = row[name]
            if lhs > rhs:
                rep.violations.append({"snapshot": sid, "inequality": name, "lhs": lhs, "rhs": rhs})
        rep.rows.append(row)
    return rep
