"""Fixed-width packing of b-bit messages, LSB-first within each byte."""

import numpy as np

from ..errors import DomainError


def packed_size(n: int, b: int) -> int:
    return (n * b + 7) // 8


def pack(messages, b: int) -> bytes:
    if not 1 <= b <= 8:
        raise DomainError(f"b must be in 1..8, got {b}")
    msgs = np.asarray(messages)
    if msgs.size and (msgs.min() < 0 or msgs.max() >= (1 << b)):
        raise DomainError(f"message out of range for b={b}")
    msgs = msgs.astype(np.uint8).ravel()
    bits = (msgs[:, None] >> np.arange(b, dtype=np.uint8)) & 1
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack(data: bytes, n: int, b: int) -> np.ndarray:
    if not 1 <= b <= 8:
        raise DomainError(f"b must be in 1..8, got {b}")
    if len(data) != packed_size(n, b):
        raise DomainError(f"expected {packed_size(n, b)} bytes for {n} messages, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[: n * b]
    weights = (1 << np.arange(b)).astype(np.int64)
    return bits.reshape(n, b).astype(np.int64) @ weights
