"""Periodic, mean-zero, divergence-free velocity fields on a cubic box.

Fields are stored as Fourier coefficients in the real-to-complex half
layout, shape ``(3, n, n, n // 2 + 1)``, normalised so that

    u(x) = sum_kappa  u_hat(kappa) * exp(i k . x),   k = 2 pi kappa / ell.

With that normalisation Parseval reads ``||u||^2 = ell^3 * sum |u_hat|^2``
over the full spectrum.  The half layout stores every coefficient with
``kappa_3 >= 0``; the rest follow from conjugate symmetry.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from .errors import DataCorruptionError, GridMismatchError, ParameterError

_AXES = (-3, -2, -1)


@dataclass(frozen=True)
class Grid:
    """Uniform ``n^3`` collocation grid on the periodic box ``[0, ell]^3``."""

    n: int
    ell: float = 2.0 * np.pi

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 4 or self.n % 2:
            raise ParameterError(f"grid size n must be an even integer >= 4, got {self.n}")
        if not np.isfinite(self.ell) or self.ell <= 0:
            raise ParameterError(f"box length ell must be positive, got {self.ell}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "ell", float(self.ell))

    @property
    def volume(self) -> float:
        return self.ell**3

    @property
    def dx(self) -> float:
        return self.ell / self.n

    @property
    def lambda1(self) -> float:
        """Smallest Stokes eigenvalue on mean-zero periodic fields."""
        return (2.0 * np.pi / self.ell) ** 2

    @property
    def spectral_shape(self):
        return (self.n, self.n, self.n // 2 + 1)

    @property
    def physical_shape(self):
        return (self.n, self.n, self.n)

    @property
    def dealias_cutoff(self) -> float:
        return self.n / 3.0

    @cached_property
    def kappa(self):
        """Integer wavevector components, each broadcastable to the half layout."""
        full = np.rint(np.fft.fftfreq(self.n) * self.n).astype(np.int64)
        half = np.arange(self.n // 2 + 1, dtype=np.int64)
        return (full[:, None, None], full[None, :, None], half[None, None, :])

    @cached_property
    def k(self):
        """Physical wavevector components ``2 pi kappa / ell``."""
        scale = 2.0 * np.pi / self.ell
        return tuple(scale * c.astype(float) for c in self.kappa)

    @cached_property
    def k2(self) -> np.ndarray:
        kx, ky, kz = self.k
        return kx**2 + ky**2 + kz**2

    @cached_property
    def inv_k2(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            out = 1.0 / self.k2
        out[0, 0, 0] = 0.0
        return out

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        cut = self.dealias_cutoff
        a, b, c = (np.abs(x) <= cut for x in self.kappa)
        return a & b & c

    @cached_property
    def weights(self) -> np.ndarray:
        """Multiplicity of each stored coefficient in the full spectrum."""
        w = np.full(self.n // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return np.broadcast_to(w[None, None, :], self.spectral_shape)

    @cached_property
    def x(self):
        """Collocation coordinates, each broadcastable to ``(n, n, n)``."""
        pts = self.ell * np.arange(self.n) / self.n
        return (pts[:, None, None], pts[None, :, None], pts[None, None, :])

    def half_index(self, kappa):
        """Index of wavevector ``kappa`` in the half layout, or None if kappa_3 < 0."""
        a, b, c = (int(v) for v in kappa)
        if c < 0:
            return None
        return (a % self.n, b % self.n, c)


def to_physical(grid: Grid, coeffs: np.ndarray) -> np.ndarray:
    return sfft.irfftn(coeffs, s=grid.physical_shape, axes=_AXES, norm="forward")


def to_spectral(grid: Grid, samples: np.ndarray) -> np.ndarray:
    return sfft.rfftn(samples, axes=_AXES, norm="forward")


def _require_finite(arr, what="field"):
    if not np.all(np.isfinite(arr)):
        raise DataCorruptionError(f"non-finite values in {what}")


class SpectralVelocity:
    """Velocity field given by its Fourier coefficients (half layout)."""

    __slots__ = ("grid", "coeffs")

    def __init__(self, grid: Grid, coeffs):
        coeffs = np.asarray(coeffs, dtype=np.complex128)
        if coeffs.shape != (3,) + grid.spectral_shape:
            raise GridMismatchError(
                f"coefficient shape {coeffs.shape} does not match grid n={grid.n}"
            )
        self.grid = grid
        self.coeffs = coeffs

    @classmethod
    def zeros(cls, grid: Grid) -> "SpectralVelocity":
        return cls(grid, np.zeros((3,) + grid.spectral_shape, dtype=np.complex128))

    @classmethod
    def from_physical(cls, grid: Grid, samples, project=True) -> "SpectralVelocity":
        """Transform real samples, truncate to the dealiased band and project."""
        samples = np.asarray(samples, dtype=float)
        if samples.shape != (3,) + grid.physical_shape:
            raise GridMismatchError(f"sample shape {samples.shape} does not match grid n={grid.n}")
        _require_finite(samples)
        v = cls(grid, to_spectral(grid, samples) * grid.dealias_mask)
        v.coeffs[:, 0, 0, 0] = 0.0
        return project_divergence_free(v) if project else v

    @classmethod
    def from_modes(cls, grid: Grid, modes) -> "SpectralVelocity":
        """Build ``sum a * sin(k.x)`` / ``a * cos(k.x)`` from ``(kappa, amp, phase)`` triples.

        The result is *not* projected; callers decide whether to project.
        """
        out = cls.zeros(grid)
        for kappa, amp, phase in modes:
            kappa = np.asarray(kappa, dtype=np.int64)
            amp = np.asarray(amp, dtype=float)
            if not np.any(kappa):
                raise ParameterError("mode wavevector must be nonzero (fields are mean-zero)")
            if np.any(np.abs(kappa) > grid.dealias_cutoff):
                raise ParameterError(
                    f"mode {kappa.tolist()} lies outside the dealiased band |kappa_i| <= n/3"
                )
            if phase == "cos":
                c = amp / 2.0
            elif phase == "sin":
                c = -0.5j * amp
            else:
                raise ParameterError(f"unknown phase {phase!r}; expected 'sin' or 'cos'")
            add_mode(out.coeffs, grid, kappa, c)
        return out

    def physical(self) -> np.ndarray:
        return to_physical(self.grid, self.coeffs)

    def copy(self) -> "SpectralVelocity":
        return SpectralVelocity(self.grid, self.coeffs.copy())

    def _other(self, other):
        if not isinstance(other, SpectralVelocity):
            return NotImplemented
        if other.grid != self.grid:
            raise GridMismatchError("fields live on different grids")
        return other.coeffs

    def __add__(self, other):
        c = self._other(other)
        return c if c is NotImplemented else SpectralVelocity(self.grid, self.coeffs + c)

    def __sub__(self, other):
        c = self._other(other)
        return c if c is NotImplemented else SpectralVelocity(self.grid, self.coeffs - c)

    def __mul__(self, scalar):
        return SpectralVelocity(self.grid, self.coeffs * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralVelocity(self.grid, -self.coeffs)

    def full_spectrum(self) -> np.ndarray:
        """Coefficients on the full ``[-n/2, n/2)^3`` lattice in FFT index order."""
        return full_from_half(self.grid, self.coeffs)

    def divergence_residual(self) -> float:
        return divergence_residual(self.grid, self.coeffs)

    def check(self, tol=1e-12):
        """Raise if any field invariant is violated; return self otherwise."""
        g, c = self.grid, self.coeffs
        _require_finite(c)
        scale = np.max(np.abs(c)) if c.size else 0.0
        if np.any(c[:, 0, 0, 0] != 0):
            raise ParameterError("mean (kappa = 0) coefficient must vanish")
        if np.any(c[:, ~g.dealias_mask] != 0):
            raise ParameterError("coefficients outside the dealiased band must vanish")
        if self.divergence_residual() > tol:
            raise ParameterError("field is not divergence-free")
        plane = c[..., 0]
        mirrored = np.conj(plane[:, (-np.arange(g.n)) % g.n][:, :, (-np.arange(g.n)) % g.n])
        if np.max(np.abs(plane - mirrored), initial=0.0) > tol * max(scale, 1e-300):
            raise ParameterError("coefficients violate conjugate symmetry")
        return self

    def __repr__(self):
        return f"SpectralVelocity(n={self.grid.n}, ell={self.grid.ell:g})"


def add_mode(coeffs, grid: Grid, kappa, c):
    """Add coefficient vector ``c`` at ``kappa`` and ``conj(c)`` at ``-kappa``."""
    kappa = np.asarray(kappa, dtype=np.int64)
    c = np.asarray(c, dtype=np.complex128)
    for kv, cv in ((kappa, c), (-kappa, np.conj(c))):
        idx = grid.half_index(kv)
        if idx is not None:
            coeffs[(slice(None),) + idx] += cv


def full_from_half(grid: Grid, half: np.ndarray) -> np.ndarray:
    n = grid.n
    m = n // 2 + 1
    full = np.empty(half.shape[:-1] + (n,), dtype=np.complex128)
    full[..., :m] = half
    neg = (-np.arange(n)) % n
    # kappa_3 in [n/2 + 1, n) maps to conj of (-kappa_1, -kappa_2, n - kappa_3)
    for kz in range(m, n):
        src = half[..., n - kz]
        full[..., kz] = np.conj(src[..., neg, :][..., :, neg])
    return full


def half_from_full(grid: Grid, full: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(full[..., : grid.n // 2 + 1])


def divergence_residual(grid: Grid, coeffs: np.ndarray) -> float:
    """``max |k_hat . u_hat| / max |u_hat|`` over the stored spectrum (0 for u = 0)."""
    scale = np.max(np.abs(coeffs))
    if scale == 0:
        return 0.0
    kx, ky, kz = grid.k
    kdotu = (kx * coeffs[0] + ky * coeffs[1] + kz * coeffs[2]) * np.sqrt(grid.inv_k2)
    return float(np.max(np.abs(kdotu)) / scale)


def project_divergence_free(v: SpectralVelocity) -> SpectralVelocity:
    """Leray projection ``(I - k k^T / |k|^2) v_hat``; the mean mode is zeroed."""
    _require_finite(v.coeffs, "projection input")
    return SpectralVelocity(v.grid, _project(v.grid, v.coeffs))


def _project(grid: Grid, c: np.ndarray) -> np.ndarray:
    kx, ky, kz = grid.k
    s = (kx * c[0] + ky * c[1] + kz * c[2]) * grid.inv_k2
    out = np.empty_like(c)
    out[0] = c[0] - kx * s
    out[1] = c[1] - ky * s
    out[2] = c[2] - kz * s
    out[:, 0, 0, 0] = 0.0
    return out


def dealias(v: SpectralVelocity) -> SpectralVelocity:
    return SpectralVelocity(v.grid, v.coeffs * v.grid.dealias_mask)


@dataclass
class GradientTensor:
    """Physical-space samples of ``du_i/dx_j``, shape ``(3, 3, n, n, n)``."""

    grid: Grid
    samples: np.ndarray

    def frobenius(self) -> np.ndarray:
        return np.sqrt(np.einsum("ij...,ij...->...", self.samples, self.samples))

    def trace(self) -> np.ndarray:
        return self.samples[0, 0] + self.samples[1, 1] + self.samples[2, 2]

    def max_norm(self) -> float:
        """Collocation maximum of the pointwise Frobenius norm."""
        return float(np.max(self.frobenius()))


def gradient_samples(grid: Grid, coeffs: np.ndarray) -> np.ndarray:
    kx, ky, kz = grid.k
    spec = np.empty((3, 3) + grid.spectral_shape, dtype=np.complex128)
    for j, kj in enumerate((kx, ky, kz)):
        spec[:, j] = 1j * kj * coeffs
    return to_physical(grid, spec)


def gradient(u: SpectralVelocity) -> GradientTensor:
    _require_finite(u.coeffs)
    return GradientTensor(u.grid, gradient_samples(u.grid, u.coeffs))


def spectral_sq_sum(grid: Grid, coeffs: np.ndarray, weight=None) -> float:
    """``ell^3 * sum_full |c|^2`` (optionally times a real spectral weight)."""
    p = (coeffs.real**2 + coeffs.imag**2) * grid.weights
    if weight is not None:
        p = p * weight
    return float(grid.volume * np.sum(p))


def grad_l2_sq(u: SpectralVelocity) -> float:
    """``||grad u||^2`` through Parseval, ``ell^3 sum |k|^2 |u_hat|^2``."""
    return spectral_sq_sum(u.grid, u.coeffs, u.grid.k2)


def _physical_grid(field, grid):
    if isinstance(field, GradientTensor):
        return field.samples, field.grid
    if grid is None:
        raise TypeError("a Grid is required for raw physical-space arrays")
    return np.asarray(field, dtype=float), grid


def norm_l2_sq(field, grid: Grid | None = None) -> float:
    """``int_D |field|^2 dx``.

    Spectral fields use Parseval; physical samples (a GradientTensor or a raw
    array with ``grid``) use the uniform collocation sum ``dx^3 * sum``.
    """
    if isinstance(field, SpectralVelocity):
        return spectral_sq_sum(field.grid, field.coeffs)
    samples, g = _physical_grid(field, grid)
    return float(g.dx**3 * np.sum(samples * samples))


def norm_lr_r(gt: GradientTensor, r: float) -> float:
    """``int_D |grad u|^r dx`` with the pointwise Frobenius norm, collocation sum."""
    if not r >= 2:
        raise ParameterError(f"exponent r must be >= 2, got {r}")
    return float(gt.grid.dx**3 * np.sum(gt.frobenius() ** r))


def inner_product(a, b, grid: Grid | None = None) -> float:
    """L^2 inner product of two spectral fields or two physical sample arrays."""
    if isinstance(a, SpectralVelocity) and isinstance(b, SpectralVelocity):
        if a.grid != b.grid:
            raise GridMismatchError("inner product of fields on different grids")
        prod = (a.coeffs * np.conj(b.coeffs)).real * a.grid.weights
        return float(a.grid.volume * np.sum(prod))
    if isinstance(a, SpectralVelocity) or isinstance(b, SpectralVelocity):
        raise TypeError("cannot mix spectral and physical fields in an inner product")
    if isinstance(a, GradientTensor) and isinstance(b, GradientTensor) and a.grid != b.grid:
        raise GridMismatchError("inner product of fields on different grids")
    sa, ga = _physical_grid(a, grid)
    sb, gb = _physical_grid(b, ga if grid is None else grid)
    if sa.shape != sb.shape or ga != gb:
        raise GridMismatchError(f"shape mismatch {sa.shape} vs {sb.shape}")
    return float(ga.dx**3 * np.sum(sa * sb))


def energy_spectrum(u: SpectralVelocity):
    """Shell-binned ``|u_hat|^2`` histogram keyed by rounded ``|kappa|``."""
    g = u.grid
    kx, ky, kz = (c.astype(float) for c in g.kappa)
    shell = np.rint(np.sqrt(kx**2 + ky**2 + kz**2)).astype(int)
    shell = np.broadcast_to(shell, g.spectral_shape)
    power = np.sum(u.coeffs.real**2 + u.coeffs.imag**2, axis=0) * g.weights
    nshell = int(shell.max()) + 1
    return np.arange(nshell), np.bincount(shell.ravel(), weights=power.ravel(), minlength=nshell)
