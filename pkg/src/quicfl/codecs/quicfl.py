"""Shared-randomness quantization codec and its binary wire format.

The default encoder interpolates the solved sender between quantiles: for a
coordinate z it finds the lowest message ``x_lower`` whose column mean does
not exceed z and the pivot row ``h_lower``; rows below the pivot send
``x_lower + 1``, rows above send ``x_lower``, and the pivot row randomizes
between the two so that the estimate is exactly unbiased.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import prng
from .. import transform
from ..errors import DomainError, RangeError, StructuralError, WireFormatError
from ..tables import QuantTable
from . import bitpack

MAGIC = b"QFLM"
WIRE_VERSION = 1
FLAG_ALG1 = 0x1
RANGE_SLACK = 1e-9
CLAMP_SLACK = 1e-9

_HEADER = struct.Struct("<4sHHQQBBHIQQQdQ")
_OUTLIER = np.dtype([("index", "<u4"), ("value", "<f4")])
_PAYLOAD_LEN = struct.Struct("<Q")
HEADER_BYTES = _HEADER.size + _PAYLOAD_LEN.size


@dataclass(frozen=True)
class SenderDecision:
    x_lower: int
    h_lower: int
    mu: float
    p_up: float


def _decisions(z: np.ndarray, table: QuantTable):
    """Vectorized (x_lower, h_lower, mu, p_up) for in-range coordinates."""
    H, B = table.r.shape
    r = table.r
    lk = table.sender_lookup
    M = table.col_means
    z = np.clip(z, M[0], M[-1])
    k = np.searchsorted(lk["prefix_flat"], z, side="right") - 1
    k = np.clip(k, 0, (B - 1) * H - 1)
    top = z >= M[-1]
    x_lo = np.where(top, B - 1, k // H)
    h_lo = np.where(top, 0, k % H)

    xs = np.minimum(x_lo, B - 2)
    r_lo = r[h_lo, xs]
    r_hi = r[h_lo, xs + 1]
    mu = H * z - lk["upper"][xs, h_lo] - lk["lower"][xs, h_lo]
    den = r_hi - r_lo
    with np.errstate(invalid="ignore", divide="ignore"):
        p_up = np.where(den > 0, (mu - r_lo) / den, 0.0)
    mu = np.where(top, r[0, B - 1], mu)
    p_up = np.where(top, 0.0, p_up)
    if p_up.size and (p_up.min() < -CLAMP_SLACK or p_up.max() > 1.0 + CLAMP_SLACK):
        raise DomainError(
            f"sender probability left [0, 1] by {max(-p_up.min(), p_up.max() - 1):.3g}; "
            "table violates its monotonicity invariants")
    return x_lo, h_lo, mu, np.clip(p_up, 0.0, 1.0)


def _check_range(z: np.ndarray, T: float) -> None:
    if z.size and np.max(np.abs(z)) > T + RANGE_SLACK:
        raise RangeError(f"|z|={np.max(np.abs(z))!r} exceeds T={T!r}; it must be sent as an outlier")


def sender_distribution(z: float, table: QuantTable) -> SenderDecision:
    z = float(z)
    _check_range(np.array([z]), table.config.T)
    x_lo, h_lo, mu, p_up = _decisions(np.array([z]), table)
    return SenderDecision(int(x_lo[0]), int(h_lo[0]), float(mu[0]), float(p_up[0]))


def sender_moments(z, table: QuantTable):
    """Exact E[Z_hat | z] and E[(z - Z_hat)^2 | z] over shared and private randomness."""
    z = np.asarray(z, dtype=np.float64)
    _check_range(z, table.config.T)
    H, B = table.r.shape
    r = table.r
    lk = table.sender_lookup
    x_lo, h_lo, _, p = _decisions(z, table)
    top = x_lo == B - 1
    xs = np.minimum(x_lo, B - 2)
    lo, hi = r[h_lo, xs], r[h_lo, xs + 1]
    first = lk["upper"][xs, h_lo] + lk["lower"][xs, h_lo] + p * hi + (1 - p) * lo
    second = lk["upper_sq"][xs, h_lo] + lk["lower_sq"][xs, h_lo] + p * hi * hi + (1 - p) * lo * lo
    first = np.where(top, r[:, B - 1].sum(), first) / H
    second = np.where(top, (r[:, B - 1] ** 2).sum(), second) / H
    mse = second - 2.0 * z * first + z * z
    return first, np.maximum(mse, 0.0)


@dataclass(frozen=True, eq=False)
class EncodedVector:
    d: int
    d_pad: int
    b: int
    ell: int
    table_hash: int
    global_seed: int
    client_seed: int
    norm: float
    outlier_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint32))
    outlier_value: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))
    payload: bytes = b""
    version: int = WIRE_VERSION
    flags: int = 0
    prf_version: int = prng.PRF_VERSION

    @property
    def outlier_count(self) -> int:
        return int(self.outlier_index.shape[0])

    def n_bits(self) -> int:
        return 8 * (HEADER_BYTES + self.outlier_count * _OUTLIER.itemsize + len(self.payload))

    def bits_per_coordinate(self) -> float:
        """b + 64 * outliers / d_pad + header / d_pad."""
        return self.n_bits() / self.d_pad

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, self.version, self.flags, self.d, self.d_pad, self.b,
                            self.ell, 0, self.prf_version, self.table_hash,
                            self.global_seed % 2**64, self.client_seed % 2**64,
                            self.norm, self.outlier_count)
        outl = np.empty(self.outlier_count, dtype=_OUTLIER)
        outl["index"] = self.outlier_index
        outl["value"] = self.outlier_value
        return b"".join([head, outl.tobytes(), _PAYLOAD_LEN.pack(len(self.payload)), self.payload])

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncodedVector":
        if len(data) < _HEADER.size:
            raise WireFormatError("message shorter than its header")
        (magic, version, flags, d, d_pad, b, ell, _pad, prf_version, table_hash,
         gseed, cseed, norm, n_out) = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise WireFormatError(f"bad magic {magic!r}")
        if version != WIRE_VERSION:
            raise WireFormatError(f"unsupported wire version {version}")
        if prf_version != prng.PRF_VERSION:
            raise WireFormatError(f"message uses PRF version {prf_version}, this build has {prng.PRF_VERSION}")
        pos = _HEADER.size
        end = pos + n_out * _OUTLIER.itemsize
        if end + _PAYLOAD_LEN.size > len(data):
            raise WireFormatError("truncated outlier section")
        outl = np.frombuffer(data[pos:end], dtype=_OUTLIER)
        (plen,) = _PAYLOAD_LEN.unpack_from(data, end)
        start = end + _PAYLOAD_LEN.size
        if start + plen != len(data):
            raise WireFormatError(f"payload length {plen} disagrees with message size")
        msg = cls(d=d, d_pad=d_pad, b=b, ell=ell, table_hash=table_hash, global_seed=gseed,
                  client_seed=cseed, norm=norm,
                  outlier_index=outl["index"].astype(np.uint32),
                  outlier_value=outl["value"].astype(np.float32),
                  payload=bytes(data[start:]), version=version, flags=flags,
                  prf_version=prf_version)
        msg.check()
        return msg

    def check(self) -> None:
        if self.d < 1 or self.d_pad != transform.next_pow2(self.d):
            raise WireFormatError(f"inconsistent dimensions d={self.d}, d_pad={self.d_pad}")
        if not 1 <= self.b <= 8 or not 0 <= self.ell <= 8:
            raise WireFormatError(f"invalid b={self.b} / ell={self.ell}")
        if len(self.payload) != bitpack.packed_size(self.d_pad, self.b):
            raise WireFormatError(
                f"payload has {len(self.payload)} bytes, expected {bitpack.packed_size(self.d_pad, self.b)}")
        if not np.isfinite(self.norm) or self.norm < 0:
            raise WireFormatError(f"invalid norm {self.norm!r}")
        idx = self.outlier_index.astype(np.int64)
        if idx.size and (idx.max() >= self.d_pad or np.any(np.diff(idx) <= 0)):
            raise WireFormatError("outlier indices must be strictly increasing and < d_pad")
        if self.norm == 0 and (idx.size or any(self.payload)):
            raise WireFormatError("zero-norm message must carry no outliers and a zero payload")


def shared_indices(client_seed: int, d_pad: int, ell: int) -> np.ndarray:
    mask = np.uint64((1 << ell) - 1)
    return (prng.prf(client_seed, np.arange(d_pad), prng.STREAM_SHARED) & mask).astype(np.int64)


def _quantize_interpolated(z, h, u, table):
    x_lo, h_lo, _, p_up = _decisions(z, table)
    step = np.where(h < h_lo, 1, np.where(h > h_lo, 0, (u < p_up).astype(np.int64)))
    return x_lo + step


def quantile_rounding(z, quantiles):
    """Index of the quantile below z and the probability of rounding up to the next one."""
    Q = np.asarray(quantiles)
    z = np.asarray(z, dtype=np.float64)
    i = np.clip(np.searchsorted(Q, z, side="right") - 1, 0, Q.shape[0] - 2)
    lo, hi = Q[i], Q[i + 1]
    return i, np.clip((z - lo) / (hi - lo), 0.0, 1.0)


def _quantize_alg1(z, h, u_q, u_x, table):
    i, p_hi = quantile_rounding(z, table.quantiles)
    qi = i + (u_q < p_hi)
    cdf = np.cumsum(table.s[h, qi, :], axis=-1)
    msg = (u_x[:, None] >= cdf).sum(axis=-1)
    return np.minimum(msg, table.config.n_messages - 1)


def _check_table(table: QuantTable, algorithm: str) -> None:
    if algorithm == "alg1" and table.s is None:
        raise StructuralError("the quantile encoder needs a table with sender probabilities s")
    if algorithm not in ("interpolated", "alg1"):
        raise DomainError(f"unknown encoder {algorithm!r}")


def encode_rows(X, table: QuantTable, global_seed: int, client_seeds: Sequence[int],
                private_seeds: Sequence[int], algorithm: str = "interpolated") -> list:
    """Encode each row of ``X`` as one client's message (shared rotation, per-row seeds)."""
    _check_table(table, algorithm)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if d < 1:
        raise DomainError("cannot encode an empty vector")
    if len(client_seeds) != n or len(private_seeds) != n:
        raise DomainError("need one client seed and one private seed per row")
    cfg = table.config
    spec = transform.RotationSpec(d=d, seed=global_seed)
    d_pad = spec.d_pad
    Y = transform.rht_forward(X, spec)
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    counter = np.arange(d_pad)
    out = []
    for c in range(n):
        common = dict(d=d, d_pad=d_pad, b=cfg.b, ell=cfg.ell, table_hash=table.table_hash,
                      global_seed=global_seed % 2**64, client_seed=int(client_seeds[c]) % 2**64,
                      flags=FLAG_ALG1 if algorithm == "alg1" else 0)
        if norms[c] == 0.0:
            out.append(EncodedVector(norm=0.0, payload=bytes(bitpack.packed_size(d_pad, cfg.b)), **common))
            continue
        z = Y[c] * (np.sqrt(d_pad) / norms[c])
        outlier = np.abs(z) > cfg.T
        h = shared_indices(client_seeds[c], d_pad, cfg.ell)
        u = prng.uniform(private_seeds[c], counter, prng.STREAM_PRIVATE)
        msgs = np.zeros(d_pad, dtype=np.int64)
        keep = ~outlier
        if algorithm == "interpolated":
            msgs[keep] = _quantize_interpolated(z[keep], h[keep], u[keep], table)
        else:
            u_q = prng.uniform(private_seeds[c], counter, prng.STREAM_PRIVATE_AUX)
            msgs[keep] = _quantize_alg1(z[keep], h[keep], u_q[keep], u[keep], table)
        idx = np.flatnonzero(outlier)
        out.append(EncodedVector(norm=float(norms[c]), outlier_index=idx.astype(np.uint32),
                                 outlier_value=z[idx].astype(np.float32),
                                 payload=bitpack.pack(msgs, cfg.b), **common))
    return out


def encode_quicfl(x, table: QuantTable, global_seed: int, client_seed: int,
                  private_seed: int) -> EncodedVector:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DomainError("encode_quicfl takes a single vector")
    return encode_rows(x[None, :], table, global_seed, [client_seed], [private_seed])[0]


def encode_alg1(x, table: QuantTable, global_seed: int, client_seed: int,
                private_seed: int) -> EncodedVector:
    """Quantile-first encoder: round z to a neighbouring quantile, then sample from s."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DomainError("encode_alg1 takes a single vector")
    return encode_rows(x[None, :], table, global_seed, [client_seed], [private_seed],
                       algorithm="alg1")[0]


def client_estimates(msg: EncodedVector, table: QuantTable) -> np.ndarray:
    """The receiver's estimate of one client's scaled rotated vector (length d_pad)."""
    msgs = bitpack.unpack(msg.payload, msg.d_pad, msg.b)
    est = table.r[shared_indices(msg.client_seed, msg.d_pad, msg.ell), msgs]
    est[msg.outlier_index.astype(np.int64)] = msg.outlier_value.astype(np.float64)
    return est


def decode_aggregate(msgs: Sequence[EncodedVector], table: QuantTable, global_seed: int) -> np.ndarray:
    """Average of the clients' vectors, with a single inverse rotation."""
    if not msgs:
        raise WireFormatError("no messages to aggregate")
    cfg = table.config
    first = msgs[0]
    for msg in msgs:
        msg.check()
        if (msg.d, msg.d_pad) != (first.d, first.d_pad):
            raise WireFormatError("messages disagree on the vector dimension")
        if (msg.b, msg.ell) != (cfg.b, cfg.ell):
            raise WireFormatError(f"message uses b={msg.b}, l={msg.ell}; table has b={cfg.b}, l={cfg.ell}")
        if msg.table_hash != table.table_hash:
            raise WireFormatError("message was encoded with a different table")
        if msg.global_seed != global_seed % 2**64:
            raise WireFormatError("message was rotated with a different global seed")
    acc = np.zeros(first.d_pad)
    for msg in msgs:
        if msg.norm == 0.0:
            continue
        acc += (msg.norm / np.sqrt(msg.d_pad)) * client_estimates(msg, table)
    acc /= len(msgs)
    return transform.rht_inverse(acc, transform.RotationSpec(d=first.d, seed=global_seed))
