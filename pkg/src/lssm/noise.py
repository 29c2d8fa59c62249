"""Q-Wiener noise ``g(t, u) dW`` built from solenoidal Fourier modes.

The driving process is ``W = sum_k sigma_k e_k(x) B_k(t)`` with a finite,
L^2-orthonormal basis ``e_k`` of real divergence-free modes and independent
Brownian motions ``B_k``.  Two families of ``g`` are provided:

* additive:       g(t, u) e_k = m(t) e_k
* multiplicative: g(t, u) e_k = m(t) sqrt(1 + ||u||^2) e_k

where ``m(t)`` is a time modulation with values in ``[0, 1]``.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataCorruptionError, FormatError, ParameterError
from .field import Grid, SpectralVelocity, add_mode, spectral_sq_sum

MODES = ("additive", "multiplicative")


class RngStream:
    """Counter-based Gaussian stream keyed by ``(master_seed, index, substream)``.

    Philox4x64 with a 256-bit counter; streams with different keys are
    independent and the same key always replays the same sequence.
    """

    ALGORITHM = b"PHILOX64"
    _LAYOUT = struct.Struct("<8s3Q4Q2Q4Q3I")

    def __init__(self, master_seed: int, index: int = 0, substream: int = 0):
        for name, v in (("master_seed", master_seed), ("index", index), ("substream", substream)):
            if int(v) != v or not 0 <= v < 2**64:
                raise ParameterError(f"{name} must be an integer in [0, 2^64), got {v!r}")
        self.master_seed = int(master_seed)
        self.index = int(index)
        self.substream = int(substream)
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.index, self.substream))
        self._gen = np.random.Generator(np.random.Philox(seq))

    def normals(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def to_bytes(self) -> bytes:
        st = self._gen.bit_generator.state
        return self._LAYOUT.pack(
            self.ALGORITHM,
            self.master_seed,
            self.index,
            self.substream,
            *(int(c) for c in st["state"]["counter"]),
            *(int(c) for c in st["state"]["key"]),
            *(int(c) for c in st["buffer"]),
            int(st["buffer_pos"]),
            int(st["has_uint32"]),
            int(st["uinteger"]),
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RngStream":
        if len(blob) != cls._LAYOUT.size:
            raise FormatError(f"rng state must be {cls._LAYOUT.size} bytes, got {len(blob)}")
        vals = cls._LAYOUT.unpack(blob)
        if vals[0] != cls.ALGORITHM:
            raise FormatError(f"unknown rng algorithm tag {vals[0]!r}")
        seed, index, sub = vals[1:4]
        out = cls(seed, index, sub)
        out._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(vals[4:8], dtype=np.uint64),
                "key": np.array(vals[8:10], dtype=np.uint64),
            },
            "buffer": np.array(vals[10:14], dtype=np.uint64),
            "buffer_pos": vals[14],
            "has_uint32": vals[15],
            "uinteger": vals[16],
        }
        return out

    def __eq__(self, other):
        return isinstance(other, RngStream) and self.to_bytes() == other.to_bytes()

    def copy(self) -> "RngStream":
        return RngStream.from_bytes(self.to_bytes())


@dataclass(frozen=True)
class Modulation:
    """Bounded time modulation ``m(t)`` in ``[0, 1]``.

    ``constant``: m(t) = value.
    ``cosine``:   m(t) = 1 - depth * (1 - cos(2 pi t / period)) / 2.
    """

    kind: str = "constant"
    value: float = 1.0
    depth: float = 0.0
    period: float = 1.0

    def __post_init__(self):
        if self.kind == "constant":
            if not 0.0 <= self.value <= 1.0:
                raise ParameterError(f"constant modulation must lie in [0, 1], got {self.value}")
        elif self.kind == "cosine":
            if not 0.0 <= self.depth <= 1.0 or not self.period > 0:
                raise ParameterError("cosine modulation needs depth in [0, 1] and period > 0")
        else:
            raise ParameterError(f"unknown modulation kind {self.kind!r}")

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            return self.value
        return 1.0 - self.depth * (1.0 - math.cos(2.0 * math.pi * t / self.period)) / 2.0

    @property
    def sup(self) -> float:
        return self.value if self.kind == "constant" else 1.0


def _polarizations(kappa):
    k = np.asarray(kappa, dtype=float)
    khat = k / np.linalg.norm(k)
    ref = np.array([0.0, 0.0, 1.0]) if (k[0] or k[1]) else np.array([1.0, 0.0, 0.0])
    p1 = np.cross(khat, ref)
    p1 /= np.linalg.norm(p1)
    p2 = np.cross(khat, p1)
    return p1, p2


def _is_positive(kappa) -> bool:
    for c in kappa:
        if c:
            return c > 0
    return False


@dataclass(frozen=True, eq=False)
class NoiseBasis:
    """Ordered real solenoidal modes, stored sparsely.

    Mode ``k`` is ``sqrt(2 / ell^3) * p_k * cos(k.x)`` when its wavevector is in
    the positive half-space and ``sqrt(2 / ell^3) * p_k * sin(k.x)`` otherwise,
    so each conjugate pair {kappa, -kappa} contributes four orthonormal fields.
    """

    grid: Grid
    kappas: np.ndarray  # (K, 3) int
    polarizations: np.ndarray  # (K, 3)
    cosine: np.ndarray  # (K,) bool
    _flat_index: np.ndarray = field(repr=False, compare=False)
    _entry_mode: np.ndarray = field(repr=False, compare=False)
    _entry_value: np.ndarray = field(repr=False, compare=False)

    def __len__(self):
        return len(self.kappas)

    def coefficient(self, k: int) -> np.ndarray:
        """Coefficient vector of mode ``k`` at its own wavevector."""
        s = math.sqrt(2.0 / self.grid.volume)
        p = self.polarizations[k]
        return s * p / 2.0 if self.cosine[k] else -0.5j * s * p

    def mode(self, k: int) -> SpectralVelocity:
        out = SpectralVelocity.zeros(self.grid)
        add_mode(out.coeffs, self.grid, self.kappas[k], self.coefficient(k))
        return out

    def __iter__(self):
        return (self.mode(k) for k in range(len(self)))

    def synthesize(self, amplitudes) -> np.ndarray:
        """Half-layout coefficients of ``sum_k amplitudes[k] * e_k``."""
        g = self.grid
        size = 3 * g.n * g.n * (g.n // 2 + 1)
        vals = self._entry_value * np.asarray(amplitudes, dtype=float)[self._entry_mode]
        re = np.bincount(self._flat_index, weights=vals.real, minlength=size)
        im = np.bincount(self._flat_index, weights=vals.imag, minlength=size)
        return (re + 1j * im).reshape((3,) + g.spectral_shape)


def build_basis(grid: Grid, kmax: int) -> NoiseBasis:
    """Two polarizations for every ``kappa != 0`` with ``max |kappa_i| <= kmax``.

    Ordering is lexicographic in kappa, then polarization index.
    """
    if int(kmax) != kmax or kmax < 0:
        raise ParameterError(f"kmax must be a non-negative integer, got {kmax}")
    if kmax > grid.dealias_cutoff:
        raise ParameterError(f"kmax={kmax} exceeds the dealiased band n/3 = {grid.dealias_cutoff:g}")
    kappas, pols, cos = [], [], []
    rng = range(-int(kmax), int(kmax) + 1)
    for kappa in itertools.product(rng, rng, rng):
        if not any(kappa):
            continue
        for p in _polarizations(kappa):
            kappas.append(kappa)
            pols.append(p)
            cos.append(_is_positive(kappa))
    kappas = np.array(kappas, dtype=np.int64).reshape(-1, 3)
    pols = np.array(pols, dtype=float).reshape(-1, 3)
    cos = np.array(cos, dtype=bool)

    s = math.sqrt(2.0 / grid.volume)
    m = grid.n // 2 + 1
    flat, owner, value = [], [], []
    for k, (kappa, p, is_cos) in enumerate(zip(kappas, pols, cos)):
        c = s * p / 2.0 if is_cos else -0.5j * s * p
        for kv, cv in ((kappa, c), (-kappa, np.conj(c))):
            idx = grid.half_index(kv)
            if idx is None:
                continue
            for comp in range(3):
                flat.append(((comp * grid.n + idx[0]) * grid.n + idx[1]) * m + idx[2])
                owner.append(k)
                value.append(cv[comp])
    return NoiseBasis(
        grid,
        kappas,
        pols,
        cos,
        np.array(flat, dtype=np.int64),
        np.array(owner, dtype=np.int64),
        np.array(value, dtype=np.complex128),
    )


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Basis, amplitudes ``sigma_k`` and the family of ``g``."""

    basis: NoiseBasis
    sigmas: np.ndarray
    mode: str = "additive"
    modulation: Modulation = Modulation()

    def __post_init__(self):
        sig = np.asarray(self.sigmas, dtype=float).reshape(-1)
        if sig.shape != (len(self.basis),):
            raise ParameterError(f"need one sigma per basis mode ({len(self.basis)}), got {sig.shape}")
        if np.any(~np.isfinite(sig)) or np.any(sig < 0):
            raise ParameterError("sigmas must be finite and nonnegative")
        if self.mode not in MODES:
            raise ParameterError(f"noise mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "sigmas", sig)

    @classmethod
    def power_law(cls, grid, sigma0, alpha=0.0, kmax=1, mode="additive", modulation=None):
        """``sigma(kappa) = sigma0 * |kappa|^-alpha`` on the ``kmax`` basis."""
        if sigma0 < 0 or alpha < 0:
            raise ParameterError("sigma0 and alpha must be nonnegative")
        basis = build_basis(grid, kmax)
        kmag = np.linalg.norm(basis.kappas.astype(float), axis=1)
        return cls(basis, sigma0 * kmag ** (-float(alpha)), mode, modulation or Modulation())

    @classmethod
    def off(cls, grid) -> "NoiseSpec":
        return cls(build_basis(grid, 0), np.zeros(0))

    @property
    def grid(self) -> Grid:
        return self.basis.grid

    @property
    def sigma_sq_sum(self) -> float:
        return float(np.sum(self.sigmas**2))

    @property
    def is_off(self) -> bool:
        return not np.any(self.sigmas)


def amplitude(ns: NoiseSpec, u: SpectralVelocity) -> float:
    """State factor ``A(u)``: 1 (additive) or ``sqrt(1 + ||u||^2)`` (multiplicative)."""
    if ns.mode == "additive":
        return 1.0
    ke = spectral_sq_sum(u.grid, u.coeffs)
    if not math.isfinite(ke):
        raise DataCorruptionError("non-finite state norm in multiplicative noise")
    return math.sqrt(1.0 + ke)


def sample_increment(ns: NoiseSpec, u: SpectralVelocity, t, dt, rng: RngStream, dB=None):
    """One Ito increment ``sum_k sigma_k m(t) A(u) e_k dB_k``.

    ``dB`` (Brownian increments, variance ``dt``) may be supplied to drive
    several resolutions with one path; otherwise ``xi * sqrt(dt)`` is drawn
    from ``rng``.  Returns ``(increment, dB)``.
    """
    if not dt > 0:
        raise ParameterError(f"time step must be positive, got {dt}")
    K = len(ns.basis)
    if dB is None:
        dB = rng.normals(K) * math.sqrt(dt) if K else np.zeros(0)
    amp = ns.sigmas * (ns.modulation(t) * amplitude(ns, u)) * dB
    return SpectralVelocity(u.grid, ns.basis.synthesize(amp) if K else np.zeros_like(u.coeffs)), dB


def trace_g_star_g(ns: NoiseSpec, u: SpectralVelocity, t) -> float:
    """``Tr(g* g) = sum_k sigma_k^2 m(t)^2 A(u)^2``."""
    return ns.sigma_sq_sum * ns.modulation(t) ** 2 * amplitude(ns, u) ** 2


def e_w(ns: NoiseSpec) -> float:
    """Coloring constant ``E_W = sum sigma_k^2 / 2``."""
    return 0.5 * ns.sigma_sq_sum


def rho_infty(ns: NoiseSpec) -> float:
    """Smallest ``rho`` with ``sup_t ||g(t, v)||^2 <= rho (1 + ||v||^2)`` for the built-in families."""
    return ns.sigma_sq_sum * ns.modulation.sup**2
