"""Seeded randomized Hadamard transform and a dense uniform rotation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import prng
from .errors import DomainError

MAX_UNIFORM_DIM = 4096


def next_pow2(d: int) -> int:
    return 1 << max(0, (int(d) - 1).bit_length())


@dataclass(frozen=True)
class RotationSpec:
    d: int
    seed: int = 0
    kind: str = "rht"

    def __post_init__(self):
        if self.d < 1:
            raise DomainError(f"dimension must be >= 1, got {self.d}")
        if self.kind not in ("rht", "uniform"):
            raise DomainError(f"unknown rotation kind {self.kind!r}")
        if self.kind == "uniform" and self.d > MAX_UNIFORM_DIM:
            raise DomainError(
                f"uniform rotation is limited to d <= {MAX_UNIFORM_DIM} (got {self.d}); use kind='rht'")

    @property
    def d_pad(self) -> int:
        return next_pow2(self.d)


def fwht(x: np.ndarray) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform along the last axis (length a power of two)."""
    x = np.array(x, dtype=np.float64, copy=True)
    n = x.shape[-1]
    if n & (n - 1):
        raise DomainError(f"length {n} is not a power of two")
    lead = x.shape[:-1]
    h = 1
    while h < n:
        y = x.reshape(*lead, n // (2 * h), 2, h)
        a = y[..., 0, :].copy()
        y[..., 0, :] += y[..., 1, :]
        y[..., 1, :] = a - y[..., 1, :]
        h *= 2
    return x


def rht_signs(seed: int, d_pad: int) -> np.ndarray:
    bits = prng.prf(seed, np.arange(d_pad), prng.STREAM_SIGNS) & np.uint64(1)
    return 1.0 - 2.0 * bits.astype(np.float64)


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise DomainError("input contains non-finite values")


def rht_forward(x, spec: RotationSpec) -> np.ndarray:
    """(1/sqrt(d_pad)) H D pad(x); rows of a 2-D input are transformed independently."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.d:
        raise DomainError(f"expected length {spec.d}, got {x.shape[-1]}")
    _check_finite(x)
    d_pad = spec.d_pad
    padded = np.zeros(x.shape[:-1] + (d_pad,))
    padded[..., : spec.d] = x * rht_signs(spec.seed, d_pad)[: spec.d]
    out = fwht(padded)
    out *= 1.0 / np.sqrt(d_pad)
    return out


def rht_inverse(y, spec: RotationSpec) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != spec.d_pad:
        raise DomainError(f"expected length {spec.d_pad}, got {y.shape[-1]}")
    out = fwht(y)
    out *= rht_signs(spec.seed, spec.d_pad) / np.sqrt(spec.d_pad)
    return out[..., : spec.d]


def uniform_matrix(spec: RotationSpec) -> np.ndarray:
    """Haar-distributed orthogonal matrix from the QR factorization of a seeded Gaussian matrix."""
    if spec.d > MAX_UNIFORM_DIM:
        raise DomainError(f"uniform rotation is limited to d <= {MAX_UNIFORM_DIM}; use RHT")
    rng = np.random.default_rng(spec.seed)
    g = rng.standard_normal((spec.d, spec.d))
    q, r = np.linalg.qr(g)
    # sign fix makes the distribution exactly Haar
    return q * np.sign(np.diag(r))


def uniform_rotation(x, spec: RotationSpec, inverse: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.d:
        raise DomainError(f"expected length {spec.d}, got {x.shape[-1]}")
    _check_finite(x)
    Q = uniform_matrix(spec)
    return x @ Q if inverse else x @ Q.T
