"""Baseline unbiased codecs: bounded-support quantization, QSGD and rotated min-max."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .. import prng, transform
from ..errors import DomainError
from ..tables import Rational, parse_rational
from . import bitpack


def _stochastic_round(v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Round v (in level units) up with probability equal to its fractional part."""
    lo = np.floor(v)
    return (lo + (u < v - lo)).astype(np.int64)


def _check_bits(b: int, max_bits: int = 8) -> None:
    if not 1 <= b <= max_bits:
        raise DomainError(f"b must be in 1..{max_bits}, got {b}")


def _nonzero(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DomainError("expected a non-empty 1-D vector")
    if not np.all(np.isfinite(x)):
        raise DomainError("input contains non-finite values")
    if not np.any(x):
        raise DomainError("input vector must be nonzero")
    return x


@dataclass(frozen=True, eq=False)
class BSQMessage:
    d: int
    b: int
    T: float
    outlier_index: np.ndarray
    outlier_value: np.ndarray
    payload: bytes

    def n_bits(self) -> int:
        # 32-bit index + 32-bit value per exact coordinate, 64-bit threshold
        return 64 + 64 * len(self.outlier_index) + 8 * len(self.payload)


def bsq_encode(x, p: Rational, b: int, private_seed: int) -> BSQMessage:
    """Send |x_i| > ||x|| / sqrt(d p) exactly; stochastically quantize the rest on 2^b levels."""
    x = _nonzero(x)
    frac = parse_rational(p)
    if not 0 < frac < 1:
        raise DomainError(f"p must lie in (0, 1), got {frac}")
    _check_bits(b)
    d = x.size
    T = float(np.linalg.norm(x) / np.sqrt(d * float(frac)))
    big = np.abs(x) > T
    step = 2.0 * T / ((1 << b) - 1)
    u = prng.uniform(private_seed, np.arange(d), prng.STREAM_PRIVATE)
    levels = np.clip(_stochastic_round((np.clip(x, -T, T) + T) / step, u), 0, (1 << b) - 1)
    levels[big] = 0
    idx = np.flatnonzero(big)
    return BSQMessage(d=d, b=b, T=T, outlier_index=idx.astype(np.uint32),
                      outlier_value=x[idx].astype(np.float32), payload=bitpack.pack(levels, b))


def bsq_decode(msg: BSQMessage) -> np.ndarray:
    levels = bitpack.unpack(msg.payload, msg.d, msg.b)
    step = 2.0 * msg.T / ((1 << msg.b) - 1)
    out = -msg.T + levels * step
    out[msg.outlier_index.astype(np.int64)] = msg.outlier_value
    return out


@dataclass(frozen=True, eq=False)
class QSGDMessage:
    d: int
    b: int
    norm: float
    signs: bytes
    payload: bytes

    def n_bits(self) -> int:
        return 64 + 8 * (len(self.signs) + len(self.payload))


def qsgd_encode(x, b: int, private_seed: int) -> QSGDMessage:
    """Norm, signs, and |x_i|/||x|| stochastically rounded onto {0, 1/(2^b-1), ..., 1}."""
    x = _nonzero(x)
    _check_bits(b)
    norm = float(np.linalg.norm(x))
    s = (1 << b) - 1
    u = prng.uniform(private_seed, np.arange(x.size), prng.STREAM_PRIVATE)
    levels = np.clip(_stochastic_round(np.abs(x) / norm * s, u), 0, s)
    return QSGDMessage(d=x.size, b=b, norm=norm, signs=bitpack.pack(x < 0, 1),
                       payload=bitpack.pack(levels, b))


def qsgd_decode(msg: QSGDMessage) -> np.ndarray:
    levels = bitpack.unpack(msg.payload, msg.d, msg.b)
    neg = bitpack.unpack(msg.signs, msg.d, 1)
    mag = msg.norm * levels / ((1 << msg.b) - 1)
    return np.where(neg == 1, -mag, mag)


@dataclass(frozen=True, eq=False)
class MinMaxMessage:
    d: int
    b: int
    seed: int
    lo: float
    hi: float
    payload: bytes

    def n_bits(self) -> int:
        return 128 + 8 * len(self.payload)


def minmax_hadamard_encode(x, b: int, seed: int) -> MinMaxMessage:
    """Per-client RHT, then stochastic quantization on 2^b levels spanning [min, max]."""
    x = _nonzero(x)
    _check_bits(b)
    spec = transform.RotationSpec(d=x.size, seed=seed)
    y = transform.rht_forward(x, spec)
    lo, hi = float(y.min()), float(y.max())
    s = (1 << b) - 1
    if hi > lo:
        u = prng.uniform(seed, np.arange(y.size), prng.STREAM_PRIVATE)
        levels = np.clip(_stochastic_round((y - lo) / (hi - lo) * s, u), 0, s)
    else:
        levels = np.zeros(y.size, dtype=np.int64)
    return MinMaxMessage(d=x.size, b=b, seed=seed, lo=lo, hi=hi, payload=bitpack.pack(levels, b))


def minmax_hadamard_decode(msg: MinMaxMessage) -> np.ndarray:
    spec = transform.RotationSpec(d=msg.d, seed=msg.seed)
    levels = bitpack.unpack(msg.payload, spec.d_pad, msg.b)
    y = msg.lo + levels * ((msg.hi - msg.lo) / ((1 << msg.b) - 1))
    return transform.rht_inverse(y, spec)


def bsq_vnmse_bound(p: Rational, b: int) -> float:
    """Worst-case vNMSE of BSQ: 1 / (p (2^b - 1)^2)."""
    return float(1 / (parse_rational(p) * Fraction(((1 << b) - 1) ** 2)))
