"""Counter-based 64-bit mixer used for every seeded decision in the codecs.

Each value depends only on ``(key, stream, counter)``, so encoder and
decoder can regenerate per-coordinate randomness independently and in
any order.
"""

import numpy as np

PRF_VERSION = 1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_STREAM_MULT = np.uint64(0xD1B54A32D192ED03)

# stream tags; changing any of these requires bumping PRF_VERSION
STREAM_SIGNS = 1
STREAM_SHARED = 2
STREAM_PRIVATE = 3
STREAM_PRIVATE_AUX = 4
STREAM_SEED = 5


def _mix64(z):
    # splitmix64 finalizer
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _as_u64(x):
    if isinstance(x, (int, np.integer)):
        return np.uint64(int(x) % 2**64)
    arr = np.asarray(x)
    if arr.dtype.kind == "i":
        return arr.astype(np.int64).view(np.uint64)
    return arr.astype(np.uint64)


def prf(key, counter, stream=0):
    """Return 64-bit outputs for the given key(s) and counter(s).

    ``key`` and ``counter`` broadcast against each other; a 1-D key array
    of length n and a counter ``arange(d)`` give an (n, d) block when the key
    is passed as ``key[:, None]``.
    """
    with np.errstate(over="ignore"):
        k = _mix64(_as_u64(key) ^ (np.uint64(stream) * _STREAM_MULT))
        return _mix64(k + (_as_u64(counter) + np.uint64(1)) * _GOLDEN)


def uniform(key, counter, stream):
    """Uniform doubles in [0, 1) with 53 bits of resolution."""
    return (prf(key, counter, stream) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def derive_seed(*parts):
    """Fold integers into one 64-bit seed; used to give trials/clients their own streams."""
    acc = np.uint64(0)
    for i, part in enumerate(parts):
        acc = prf(acc ^ _as_u64(int(part) % 2**64), i, STREAM_SEED)
    return int(acc)
