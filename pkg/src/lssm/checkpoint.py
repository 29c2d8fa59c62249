"""Binary checkpoint layout (little-endian).

    magic           4 bytes   b"LSSM"
    format_version  u32
    n               u32
    ell             f64
    t               f64
    step            u64
    rng_state_len   u32
    rng_state       rng_state_len bytes (empty when no stream is attached)
    body            3 component arrays, component-major; each holds the n^3
                    coefficients for kappa in [-n/2, n/2)^3 in lexicographic
                    order (kappa_1 slowest) as (re, im) f64 pairs
    meta_len        u32
    meta            meta_len bytes of UTF-8 JSON (config hash, code version)

The same layout stores forcing fields (step 0, no rng state).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .field import Grid, SpectralVelocity, full_from_half, half_from_full
from .noise import RngStream

MAGIC = b"LSSM"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sIIddQI")
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    u: SpectralVelocity
    t: float = 0.0
    step: int = 0
    rng: RngStream | None = None
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> Grid:
        return self.u.grid


def encode(ck: Checkpoint) -> bytes:
    g = ck.grid
    rng = ck.rng.to_bytes() if ck.rng is not None else b""
    head = _HEAD.pack(MAGIC, FORMAT_VERSION, g.n, g.ell, float(ck.t), int(ck.step), len(rng))
    full = np.fft.fftshift(full_from_half(g, ck.u.coeffs), axes=(-3, -2, -1))
    body = np.ascontiguousarray(full, dtype="<c16").tobytes()
    meta = json.dumps(ck.meta, sort_keys=True).encode()
    return head + rng + body + _U32.pack(len(meta)) + meta


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < _HEAD.size:
        raise FormatError("file too short for a checkpoint header")
    magic, version, n, ell, t, step, rlen = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version}")
    grid = Grid(n, ell)
    pos = _HEAD.size
    rng = RngStream.from_bytes(blob[pos : pos + rlen]) if rlen else None
    pos += rlen
    nbody = 3 * n**3 * 16
    if len(blob) < pos + nbody + _U32.size:
        raise FormatError("checkpoint body truncated")
    full = np.frombuffer(blob, dtype="<c16", count=3 * n**3, offset=pos).reshape(3, n, n, n)
    pos += nbody
    (mlen,) = _U32.unpack_from(blob, pos)
    pos += _U32.size
    if len(blob) != pos + mlen:
        raise FormatError("checkpoint metadata length mismatch")
    meta = json.loads(blob[pos:].decode()) if mlen else {}
    half = half_from_full(grid, np.fft.ifftshift(full, axes=(-3, -2, -1)).astype(np.complex128))
    return Checkpoint(SpectralVelocity(grid, half), t, step, rng, meta)


def save_checkpoint(path, ck: Checkpoint) -> Path:
    path = Path(path)
    path.write_bytes(encode(ck))
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
