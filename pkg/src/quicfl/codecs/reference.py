"""The hand-written one-shared-bit scheme (b = 1, l = 1) used as an oracle for the solver."""

from __future__ import annotations

import numpy as np

from .. import prng
from ..errors import RangeError
from ..tables import compute_threshold

ALPHA = 0.8
BETA = 5.4
T_REF = compute_threshold("1/512")

# receiver values indexed [h, x]
RECEIVER = np.array([[-BETA, ALPHA], [-ALPHA, BETA]])


def _check(z: np.ndarray) -> None:
    if np.any(np.abs(z) > T_REF + 1e-9):
        raise RangeError(f"|z| exceeds T={T_REF!r} for p=1/512")


def send_probability(z, h_bit):
    """Probability of sending X = 1 given z and the shared bit."""
    z = np.asarray(z, dtype=np.float64)
    h = np.asarray(h_bit)
    scale = 2.0 / (ALPHA + BETA)
    pos = z >= 0
    return np.where(pos, np.where(h == 0, 1.0, scale * z),
                    np.where(h == 1, 0.0, 1.0 - scale * -z))


def one_bit_reference(z: float, h_bit: int, private_seed: int, counter: int = 0):
    """Return (message, reconstruction) for one coordinate."""
    _check(np.asarray(z))
    u = float(prng.uniform(private_seed, counter, prng.STREAM_PRIVATE))
    x = int(u < float(send_probability(z, h_bit)))
    return x, float(RECEIVER[h_bit, x])


def conditional_moments(z):
    """E[Z_hat | z] and E[(z - Z_hat)^2 | z], averaging over the shared bit and sender coin."""
    z = np.asarray(z, dtype=np.float64)
    _check(z)
    mean = np.zeros_like(z)
    mse = np.zeros_like(z)
    for h in (0, 1):
        p1 = send_probability(z, h)
        for x, px in ((0, 1.0 - p1), (1, p1)):
            rv = RECEIVER[h, x]
            mean += 0.5 * px * rv
            mse += 0.5 * px * (z - rv) ** 2
    return mean, mse
