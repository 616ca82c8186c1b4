"""Truncated-normal math, the quantization-table data model, and the table file format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ChecksumError, DomainError, StructuralError, TableFormatError, VersionError

FORMAT_MAGIC = "QUICFL-TABLE"
FORMAT_VERSION = "v1"

SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Acklam's rational approximation to the normal quantile (relative error ~1.2e-9)
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549671010336312e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425

Rational = Union[Fraction, int, float, str]


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / SQRT2)


def normal_pdf(x: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


def _ppf_guess(prob: float) -> float:
    if prob < _P_LOW:
        q = math.sqrt(-2.0 * math.log(prob))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        return num / den
    if prob > 1.0 - _P_LOW:
        return -_ppf_guess(1.0 - prob)
    q = prob - 0.5
    r = q * q
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    return num / den


def normal_ppf(prob: float) -> float:
    """Inverse standard normal CDF: rational initial guess plus two Newton steps."""
    if not 0.0 < prob < 1.0:
        raise DomainError(f"normal_ppf needs prob in (0, 1), got {prob!r}")
    # refine in the lower tail, where erfc keeps full relative precision
    if prob > 0.5:
        return -normal_ppf(1.0 - prob) if prob != 0.5 else 0.0
    x = _ppf_guess(prob)
    for _ in range(2):
        x -= (normal_cdf(x) - prob) / normal_pdf(x)
    return x


def parse_rational(value: Rational) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise DomainError(f"cannot parse rational {value!r}") from exc
    return Fraction(value)


def compute_threshold(p: Rational) -> float:
    """T such that Pr[|Z| > T] = p for a standard normal Z."""
    frac = parse_rational(p)
    if not 0 < frac <= 1:
        raise DomainError(f"p must lie in (0, 1], got {frac}")
    if frac == 1:
        return 0.0
    return -normal_ppf(float(frac) / 2.0)


def truncated_normal_cdf(z: float, T: float) -> float:
    lo = normal_cdf(-T)
    return (normal_cdf(z) - lo) / (normal_cdf(T) - lo)


def truncated_normal_ppf(u: float, T: float, width: float = 1e-12) -> float:
    """Quantile of N(0,1) restricted to [-T, T], by bisection to ``width``."""
    if not 0.0 <= u <= 1.0:
        raise DomainError(f"probability must lie in [0, 1], got {u!r}")
    lo_cdf = normal_cdf(-T)
    target = lo_cdf + u * (normal_cdf(T) - lo_cdf)
    a, b = -T, T
    while b - a > width:
        mid = 0.5 * (a + b)
        if normal_cdf(mid) < target:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)


def compute_quantiles(m: int, T: float) -> np.ndarray:
    """m points equally spaced in probability over the normal truncated to [-T, T]."""
    if m < 2:
        raise DomainError(f"need at least 2 quantiles, got m={m}")
    q = np.empty(m)
    half = m // 2
    for i in range(1, half):
        q[i] = truncated_normal_ppf(i / (m - 1), T)
    q[0] = -T
    if m % 2:
        q[half] = 0.0
    # mirror so antisymmetry holds exactly
    q[m - half:] = -q[:half][::-1]
    return q


@dataclass(frozen=True)
class QuantConfig:
    b: int
    ell: int
    m: int
    p: Fraction = Fraction(1, 512)

    def __post_init__(self):
        object.__setattr__(self, "p", parse_rational(self.p))
        if not 1 <= self.b <= 8:
            raise DomainError(f"b must be in 1..8, got {self.b}")
        if not 0 <= self.ell <= 8:
            raise DomainError(f"ell must be in 0..8, got {self.ell}")
        if self.m < 2:
            raise DomainError(f"m must be >= 2, got {self.m}")
        if not 0 < self.p <= 1:
            raise DomainError(f"p must lie in (0, 1], got {self.p}")
        if self.n_messages > self.m:
            raise DomainError(f"2^b={self.n_messages} messages exceed m={self.m} quantiles")

    @property
    def n_messages(self) -> int:
        return 1 << self.b

    @property
    def n_shared(self) -> int:
        return 1 << self.ell

    @cached_property
    def T(self) -> float:
        return compute_threshold(self.p)

    @cached_property
    def quantiles(self) -> np.ndarray:
        q = compute_quantiles(self.m, self.T)
        q.flags.writeable = False
        return q

    def header_line(self) -> str:
        return f"b={self.b} l={self.ell} m={self.m} p={self.p.numerator}/{self.p.denominator}"


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class QuantTable:
    """Receiver values ``r[h, x]`` with optional sender probabilities ``s[h, q, x]``."""

    config: QuantConfig
    r: np.ndarray
    s: Optional[np.ndarray] = None
    quantiles: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "r", _frozen(self.r))
        if self.s is not None:
            object.__setattr__(self, "s", _frozen(self.s))
        q = self.config.quantiles if self.quantiles is None else self.quantiles
        object.__setattr__(self, "quantiles", _frozen(q))
        _check_structure(self)

    @cached_property
    def col_means(self) -> np.ndarray:
        return _frozen(self.r.mean(axis=0))

    @cached_property
    def prefix(self) -> np.ndarray:
        """P[x, h]: mean estimate when rows h' < h send x+1 and the rest send x."""
        r = self.r
        H = r.shape[0]
        upper = np.concatenate([np.zeros((1, r.shape[1] - 1)), np.cumsum(r[:, 1:], axis=0)])[:-1]
        lower = np.cumsum(r[::-1, :-1], axis=0)[::-1]
        return _frozen((upper + lower).T / H)

    @cached_property
    def sender_lookup(self) -> dict:
        """Cumulative sums used by the interpolated encoder, indexed [x, h] for x < 2^b - 1.

        ``upper[x, h]`` sums r[h', x+1] over h' < h and ``lower[x, h]`` sums
        r[h', x] over h' > h; the ``*_sq`` variants sum squares.
        """
        r = self.r
        out = {}
        for name, v in (("", r), ("_sq", r * r)):
            up = np.cumsum(v[:, 1:], axis=0) - v[:, 1:]
            low = np.cumsum(v[::-1, :-1], axis=0)[::-1] - v[:, :-1]
            out["upper" + name] = _frozen(up.T)
            out["lower" + name] = _frozen(low.T)
        out["prefix_flat"] = _frozen(self.prefix.ravel())
        return out

    @cached_property
    def table_hash(self) -> int:
        return fnv1a64(_serialize(self, include_s=False).encode("ascii"))

    def with_s(self, s: Optional[np.ndarray]) -> "QuantTable":
        return QuantTable(self.config, self.r, s, self.quantiles)


def _check_structure(t: QuantTable) -> None:
    cfg = t.config
    H, B = cfg.n_shared, cfg.n_messages
    if t.r.shape != (H, B):
        raise StructuralError(f"r has shape {t.r.shape}, config needs {(H, B)}")
    if t.quantiles.shape != (cfg.m,):
        raise StructuralError(f"{t.quantiles.shape[0]} quantiles, config needs m={cfg.m}")
    if t.s is not None and t.s.shape != (H, cfg.m, B):
        raise StructuralError(f"s has shape {t.s.shape}, config needs {(H, cfg.m, B)}")
    if not np.all(np.isfinite(t.r)):
        raise StructuralError("r contains non-finite values")


@dataclass(frozen=True)
class TableDiagnostics:
    """Largest absolute violation found for each invariant class."""

    symmetry: float
    monotonicity: float
    boundary: float
    min_col_gap: float
    prefix_order: float
    simplex: float = 0.0
    nonnegativity: float = 0.0
    unbiasedness: float = 0.0

    def failures(self, boundary_tol: float = 1e-8, simplex_tol: float = 1e-8,
                 unbias_tol: float = 1e-6, order_tol: float = 1e-12) -> list:
        limits = {
            "symmetry": 1e-9,
            "monotonicity": order_tol,
            "boundary": boundary_tol,
            "prefix_order": order_tol,
            "simplex": simplex_tol,
            "nonnegativity": 1e-12,
            "unbiasedness": unbias_tol,
        }
        bad = [name for name, limit in limits.items() if getattr(self, name) > limit]
        # column means must increase strictly
        if self.min_col_gap <= 0.0:
            bad.append("min_col_gap")
        return bad

    @property
    def valid(self) -> bool:
        return not self.failures()


def validate_table(t: QuantTable) -> TableDiagnostics:
    _check_structure(t)
    r = t.r
    H, B = r.shape
    T = t.config.T
    symmetry = float(np.max(np.abs(r + r[::-1, ::-1])))
    mono_x = np.max(r[:, :-1] - r[:, 1:], initial=0.0)
    mono_h = np.max(r[:-1, :] - r[1:, :], initial=0.0)
    monotonicity = float(max(mono_x, mono_h, 0.0))
    M = t.col_means
    boundary = float(max(abs(M[0] + T), abs(M[-1] - T)))
    min_col_gap = float(np.diff(M).min())
    P = t.prefix
    prefix_order = float(max(np.max(P[:, :-1] - P[:, 1:], initial=0.0), 0.0)) if P.size else 0.0
    simplex = nonneg = unbias = 0.0
    if t.s is not None:
        s = t.s
        simplex = float(np.max(np.abs(s.sum(axis=2) - 1.0)))
        nonneg = float(max(0.0, -s.min()))
        est = np.einsum("hqx,hx->q", s, r) / H
        unbias = float(np.max(np.abs(est - t.quantiles)))
    return TableDiagnostics(symmetry, monotonicity, boundary, min_col_gap,
                            prefix_order, simplex, nonneg, unbias)


def _serialize(t: QuantTable, include_s: bool = True) -> str:
    cfg = t.config
    lines = [f"{FORMAT_MAGIC} {FORMAT_VERSION}", cfg.header_line(), f"T={_fmt(cfg.T)}", "r:"]
    lines += [" ".join(_fmt(v) for v in row) for row in t.r]
    if include_s and t.s is not None:
        lines.append("s:")
        lines += [" ".join(_fmt(v) for v in row) for row in t.s.reshape(-1, cfg.n_messages)]
    return "\n".join(lines) + "\n"


def dumps_table(t: QuantTable) -> str:
    body = _serialize(t)
    return body + f"checksum={fnv1a64(body.encode('ascii')):016x}\n"


def _parse_row(line: str, width: int, lineno: int) -> list:
    parts = line.split()
    if len(parts) != width:
        raise TableFormatError(f"line {lineno}: expected {width} values, found {len(parts)}")
    try:
        return [float(v) for v in parts]
    except ValueError as exc:
        raise TableFormatError(f"line {lineno}: {exc}") from exc


def loads_table(text: str) -> QuantTable:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise TableFormatError("empty table file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != FORMAT_MAGIC:
        raise TableFormatError(f"line 1: bad magic {lines[0]!r}")
    if head[1] != FORMAT_VERSION:
        raise VersionError(f"unsupported table version {head[1]!r}, expected {FORMAT_VERSION}")
    last = lines[-1]
    if not last.startswith("checksum="):
        raise TableFormatError("missing checksum line")
    body = "\n".join(lines[:-1]) + "\n"
    try:
        stored = int(last[len("checksum="):], 16)
    except ValueError as exc:
        raise TableFormatError(f"malformed checksum {last!r}") from exc
    if fnv1a64(body.encode("ascii")) != stored:
        raise ChecksumError("table checksum mismatch")

    if len(lines) < 5:
        raise TableFormatError("truncated table file")
    try:
        fields = dict(tok.split("=", 1) for tok in lines[1].split())
        cfg = QuantConfig(b=int(fields["b"]), ell=int(fields["l"]), m=int(fields["m"]),
                          p=parse_rational(fields["p"]))
    except (KeyError, ValueError) as exc:
        raise TableFormatError(f"line 2: malformed config {lines[1]!r}") from exc
    if not lines[2].startswith("T="):
        raise TableFormatError("line 3: expected T=")
    try:
        T = float(lines[2][2:])
    except ValueError as exc:
        raise TableFormatError(f"line 3: {exc}") from exc
    if abs(T - cfg.T) > 1e-9:
        raise TableFormatError(f"stored T={T!r} disagrees with p={cfg.p} (T={cfg.T!r})")
    if lines[3] != "r:":
        raise TableFormatError("line 4: expected 'r:'")
    H, B, m = cfg.n_shared, cfg.n_messages, cfg.m
    pos = 4
    if len(lines) - 1 < pos + H:
        raise TableFormatError("truncated r section")
    r = np.array([_parse_row(lines[pos + i], B, pos + i + 1) for i in range(H)])
    pos += H
    s = None
    if pos < len(lines) - 1:
        if lines[pos] != "s:":
            raise TableFormatError(f"line {pos + 1}: expected 's:' or checksum")
        pos += 1
        if len(lines) - 1 != pos + H * m:
            raise TableFormatError("s section has the wrong number of rows")
        s = np.array([_parse_row(lines[pos + i], B, pos + i + 1) for i in range(H * m)])
        s = s.reshape(H, m, B)
    return QuantTable(cfg, r, s)


def write_table(t: QuantTable, path) -> None:
    Path(path).write_text(dumps_table(t), encoding="ascii")


def read_table(path) -> QuantTable:
    return loads_table(Path(path).read_text(encoding="ascii"))


def default_table_name(b: int, ell: int, m: int = 512, p: Rational = Fraction(1, 512)) -> str:
    frac = parse_rational(p)
    return f"quicfl_b{b}_l{ell}_m{m}_p{frac.numerator}-{frac.denominator}.qfl"
