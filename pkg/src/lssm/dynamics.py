"""Deterministic drift of the Ladyzhenskaya-Smagorinsky system.

Right-hand side convention, with pressure removed by projection::

    du/dt = -div(u (x) u) + nu Lap u + div(nu_bar |grad u|^(r-2) grad u) + f  (+ noise)

Every returned term is dealiased (two-thirds rule) and projected onto
divergence-free fields.  The linear viscous term is kept apart so the
integrator can treat it with an exact integrating factor.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataCorruptionError, FormatError, ParameterError
from .field import (
    Grid,
    SpectralVelocity,
    _project,
    gradient_samples,
    to_physical,
    to_spectral,
)


@dataclass(frozen=True)
class ForcingSpec:
    """Time-independent body force: a list of Fourier modes or a field file.

    Each mode is ``(kappa, amplitude, phase)`` and contributes
    ``amplitude * sin(k.x)`` (phase ``"sin"``) or ``amplitude * cos(k.x)``.
    """

    modes: tuple = ()
    path: str | None = None

    def __post_init__(self):
        if self.modes and self.path:
            raise ParameterError("forcing is either a mode list or a field file, not both")
        norm = tuple(
            (tuple(int(v) for v in kappa), tuple(float(a) for a in amp), str(phase))
            for kappa, amp, phase in self.modes
        )
        object.__setattr__(self, "modes", norm)

    @classmethod
    def single_mode(cls, kappa, amplitude, phase="sin"):
        return cls(modes=((kappa, amplitude, phase),))


@dataclass(frozen=True)
class FlowParams:
    nu: float
    nu_bar: float = 0.0
    r: float = 2.0
    forcing: ForcingSpec = field(default_factory=ForcingSpec)

    def __post_init__(self):
        if not np.isfinite(self.nu) or self.nu <= 0:
            raise ParameterError(f"viscosity nu must be positive, got {self.nu}")
        if not np.isfinite(self.nu_bar) or self.nu_bar < 0:
            raise ParameterError(f"nu_bar must be nonnegative, got {self.nu_bar}")
        if not np.isfinite(self.r) or self.r < 2:
            raise ParameterError(f"power-law exponent r must be >= 2, got {self.r}")

    @property
    def implicit_nu(self) -> float:
        """Viscosity carried by the integrating factor.

        At ``r = 2`` the power-law term is exactly ``nu_bar * Lap u`` and is
        folded into the linear part.
        """
        return self.nu + self.nu_bar if self.r == 2 else self.nu


def _check(arr, what):
    if not np.all(np.isfinite(arr)):
        raise DataCorruptionError(f"non-finite values in {what}")
    return arr


def _finish(grid: Grid, coeffs: np.ndarray) -> np.ndarray:
    return _project(grid, coeffs * grid.dealias_mask)


_PAIRS = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


def advection_coeffs(grid: Grid, c: np.ndarray, u_phys=None) -> np.ndarray:
    """``P D div(u (x) u)`` in divergence form."""
    if u_phys is None:
        u_phys = to_physical(grid, c)
    prods = np.stack([u_phys[i] * u_phys[j] for i, j in _PAIRS])
    hat = to_spectral(grid, _check(prods, "advection products"))
    sym = {pair: h for pair, h in zip(_PAIRS, hat)}
    k = grid.k
    out = np.zeros_like(c)
    for i in range(3):
        for j in range(3):
            out[i] += 1j * k[j] * sym[(min(i, j), max(i, j))]
    return _finish(grid, out)


def convective_coeffs(grid: Grid, u_phys: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """``P D [(u . grad) u]`` from precomputed samples.

    Equal to :func:`advection_coeffs` up to roundoff for divergence-free,
    dealiased ``u``: both products are alias-free after truncation and
    differ only by ``u div u = 0``.
    """
    conv = np.einsum("j...,ij...->i...", u_phys, grad)
    return _finish(grid, to_spectral(grid, _check(conv, "advection products")))


def stress_samples(grad: np.ndarray, nu_bar: float, r: float) -> np.ndarray:
    """Pointwise ``nu_bar |G|^(r-2) G``; the factor is 0 at ``G = 0`` for r > 2."""
    if r < 2:
        raise ParameterError(f"power-law exponent r must be >= 2, got {r}")
    if r == 2:
        return nu_bar * grad
    frob = np.sqrt(np.einsum("ij...,ij...->...", grad, grad))
    return (nu_bar * frob ** (r - 2)) * grad


def power_law_coeffs(grid: Grid, grad: np.ndarray, nu_bar: float, r: float) -> np.ndarray:
    tau = to_spectral(grid, _check(stress_samples(grad, nu_bar, r), "power-law stress"))
    k = grid.k
    out = 1j * k[0] * tau[:, 0]
    out += 1j * k[1] * tau[:, 1]
    out += 1j * k[2] * tau[:, 2]
    return _finish(grid, out)


def advection(u: SpectralVelocity) -> SpectralVelocity:
    """``div(u (x) u)``, dealiased and projected; enters the drift with a minus sign."""
    _check(u.coeffs, "velocity")
    return SpectralVelocity(u.grid, advection_coeffs(u.grid, u.coeffs))


def nonlinear_viscosity(u: SpectralVelocity, nu_bar, r) -> SpectralVelocity:
    """``div(nu_bar |grad u|^(r-2) grad u)``, dealiased and projected."""
    if r < 2:
        raise ParameterError(f"power-law exponent r must be >= 2, got {r}")
    _check(u.coeffs, "velocity")
    grad = gradient_samples(u.grid, u.coeffs)
    return SpectralVelocity(u.grid, power_law_coeffs(u.grid, grad, nu_bar, r))


def forcing_field(fs: ForcingSpec, grid: Grid) -> SpectralVelocity:
    """Band-limited, mean-zero, projected body force."""
    if fs.path is not None:
        from .checkpoint import load_checkpoint

        ck = load_checkpoint(fs.path)
        if ck.grid != grid:
            raise FormatError(
                f"forcing file grid (n={ck.grid.n}, ell={ck.grid.ell}) does not match run grid"
            )
        c = ck.u.coeffs
    else:
        c = SpectralVelocity.from_modes(grid, fs.modes).coeffs
    return SpectralVelocity(grid, _finish(grid, _check(c, "forcing")))


def linear_term(u: SpectralVelocity, nu) -> SpectralVelocity:
    """``nu Lap u`` in spectral form, ``-nu |k|^2 u_hat``."""
    return SpectralVelocity(u.grid, -nu * u.grid.k2 * u.coeffs)


def drift(u: SpectralVelocity, p: FlowParams, f: SpectralVelocity | None = None) -> SpectralVelocity:
    """``-advection(u) + nonlinear_viscosity(u) + f``; linear viscosity excluded."""
    if f is None:
        f = forcing_field(p.forcing, u.grid)
    out = -advection(u).coeffs + f.coeffs
    if p.nu_bar:
        out = out + nonlinear_viscosity(u, p.nu_bar, p.r).coeffs
    return SpectralVelocity(u.grid, out)


def full_rhs(u: SpectralVelocity, p: FlowParams, f: SpectralVelocity | None = None) -> SpectralVelocity:
    return drift(u, p, f) + linear_term(u, p.nu)


def explicit_terms(grid: Grid, c: np.ndarray, p: FlowParams):
    """Explicit nonlinear part used by the stepper.

    Returns ``(coeffs, u_phys, grad)``.  The forcing is excluded (the stepper
    integrates it exactly) and at ``r = 2`` so is the power-law term, which
    then lives in the integrating factor.
    """
    _check(c, "velocity")
    u_phys = to_physical(grid, c)
    grad = gradient_samples(grid, c)
    out = -convective_coeffs(grid, u_phys, grad)
    if p.nu_bar and p.r != 2:
        out += power_law_coeffs(grid, grad, p.nu_bar, p.r)
    return out, u_phys, grad
