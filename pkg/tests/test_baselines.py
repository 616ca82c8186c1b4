import numpy as np
import pytest

from quicfl import codecs
from quicfl.errors import DomainError


def vnmse(x, xh):
    return np.sum((x - xh) ** 2) / np.sum(x ** 2)


def mc_zscore(encode, decode, x, reps):
    est = np.stack([decode(encode(x, s)) for s in range(reps)])
    se = est.std(axis=0) / np.sqrt(reps)
    return np.max(np.abs(est.mean(axis=0) - x) / np.where(se > 0, se, np.inf))


def test_bsq_constant_vector_has_no_outliers():
    msg = codecs.bsq_encode(np.full(64, 3.0), "1/32", 1, 0)
    assert len(msg.outlier_index) == 0


def test_bsq_outlier_count_bounded():
    x = np.random.default_rng(0).standard_cauchy(4096)
    msg = codecs.bsq_encode(x, "1/32", 2, 1)
    assert len(msg.outlier_index) <= 4096 / 32
    np.testing.assert_array_equal(codecs.bsq_decode(msg)[msg.outlier_index.astype(int)],
                                  x[msg.outlier_index.astype(int)].astype(np.float32))


def test_bsq_grid_points_exact():
    # ||x||^2 = 20, d p = 20/9, so T = 3 and the b=2 grid is {-3, -1, 1, 3}
    x = np.array([3.0, 1.0, -1.0, -3.0])
    for seed in range(10):
        msg = codecs.bsq_encode(x, "5/9", 2, seed)
        assert msg.T == 3.0 and len(msg.outlier_index) == 0
        np.testing.assert_array_equal(codecs.bsq_decode(msg), x)


def test_bsq_bound_on_gaussians():
    rng = np.random.default_rng(1)
    worst = 0.0
    for i in range(100):
        x = rng.standard_normal(1 << 12)
        worst = max(worst, vnmse(x, codecs.bsq_decode(codecs.bsq_encode(x, "1/32", 1, i))))
    assert worst <= codecs.bsq_vnmse_bound("1/32", 1) == 32


def test_bsq_unbiased():
    x = np.random.default_rng(2).standard_normal(64)
    assert mc_zscore(lambda v, s: codecs.bsq_encode(v, "1/8", 2, s), codecs.bsq_decode, x, 4000) < 4.5


def test_qsgd_lossless_on_levels():
    x = np.array([0.0, 1.0])
    np.testing.assert_array_equal(codecs.qsgd_decode(codecs.qsgd_encode(x, 1, 0)), x)


def test_qsgd_half_levels():
    x = np.array([1.0, -1.0, 1.0, -1.0])  # |x_i| / ||x|| = 0.5
    vals = np.stack([codecs.qsgd_decode(codecs.qsgd_encode(x, 1, s)) for s in range(4000)])
    assert set(np.unique(np.abs(vals))) <= {0.0, 2.0}
    np.testing.assert_allclose((vals != 0).mean(axis=0), 0.5, atol=0.03)


def test_qsgd_unbiased():
    x = np.random.default_rng(3).standard_normal(64)
    assert mc_zscore(lambda v, s: codecs.qsgd_encode(v, 2, s), codecs.qsgd_decode, x, 20000) < 4.5


def test_minmax_constant_rotated_vector_exact():
    # with d = 1 the rotated vector is a single value, so min = max
    msg = codecs.minmax_hadamard_encode(np.ones(1), 2, 5)
    np.testing.assert_allclose(codecs.minmax_hadamard_decode(msg), [1.0])


def test_minmax_high_resolution():
    x = np.random.default_rng(4).standard_normal(1 << 12)
    assert vnmse(x, codecs.minmax_hadamard_decode(codecs.minmax_hadamard_encode(x, 8, 1))) <= 1e-3


def test_minmax_unbiased():
    x = np.random.default_rng(5).standard_normal(32)
    # fixed rotation seed isolates quantization randomness from the rotation
    est = []
    for s in range(4000):
        est.append(codecs.minmax_hadamard_decode(codecs.minmax_hadamard_encode(x, 2, s)))
    est = np.array(est)
    assert np.max(np.abs(est.mean(axis=0) - x) / (est.std(axis=0) / np.sqrt(4000))) < 4.5


@pytest.mark.parametrize("fn", [
    lambda x: codecs.bsq_encode(x, "1/32", 1, 0),
    lambda x: codecs.qsgd_encode(x, 1, 0),
    lambda x: codecs.minmax_hadamard_encode(x, 1, 0),
])
def test_zero_and_nonfinite_rejected(fn):
    with pytest.raises(DomainError):
        fn(np.zeros(8))
    with pytest.raises(DomainError):
        fn(np.array([1.0, np.inf]))


def test_parameter_errors():
    with pytest.raises(DomainError):
        codecs.bsq_encode(np.ones(4), 1, 1, 0)
    with pytest.raises(DomainError):
        codecs.bsq_encode(np.ones(4), "1/4", 0, 0)
    with pytest.raises(DomainError):
        codecs.qsgd_encode(np.ones(4), 0, 0)
