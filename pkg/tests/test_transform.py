import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.linalg import hadamard

from quicfl import prng, transform
from quicfl.errors import DomainError
from quicfl.tables import compute_threshold
from quicfl.transform import RotationSpec


def dense_rht(spec):
    """Explicit (1/sqrt(n)) H D matrix, restricted to the first d columns."""
    n = spec.d_pad
    D = transform.rht_signs(spec.seed, n)
    return (hadamard(n) * D[None, :] / np.sqrt(n))[:, : spec.d]


def test_d_pad():
    assert [RotationSpec(d).d_pad for d in (1, 2, 3, 4, 5, 1000, 1024)] == [1, 2, 4, 4, 8, 1024, 1024]
    with pytest.raises(DomainError):
        RotationSpec(0)
    with pytest.raises(DomainError):
        RotationSpec(5000, kind="uniform")


def test_first_hadamard_column():
    # find a seed whose first two signs are +1
    seed = next(s for s in range(100) if np.all(transform.rht_signs(s, 2) == 1))
    y = transform.rht_forward(np.array([1.0, 0.0]), RotationSpec(2, seed))
    np.testing.assert_allclose(y, [2 ** -0.5, 2 ** -0.5])


@pytest.mark.parametrize("d", [1, 2, 3, 5, 8, 17, 33, 64])
def test_matches_dense_oracle(d):
    spec = RotationSpec(d, seed=11 + d)
    M = dense_rht(spec)
    x = np.random.default_rng(d).standard_normal(d)
    np.testing.assert_allclose(transform.rht_forward(x, spec), M @ x, atol=1e-12)
    if d == spec.d_pad:
        np.testing.assert_allclose(M.T @ M, np.eye(d), atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 4, 16, 64])
def test_implicit_matrix_orthogonal(n):
    spec = RotationSpec(n, seed=3)
    cols = transform.rht_forward(np.eye(n), spec).T
    np.testing.assert_allclose(cols.T @ cols, np.eye(n), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(d=st.integers(1, 5000), seed=st.integers(0, 2**64 - 1))
def test_energy_and_inverse(d, seed):
    spec = RotationSpec(d, seed)
    x = np.random.default_rng(d).standard_normal(d)
    y = transform.rht_forward(x, spec)
    assert np.linalg.norm(y) == pytest.approx(np.linalg.norm(x), rel=1e-12)
    back = transform.rht_inverse(y, spec)
    np.testing.assert_allclose(back, x, rtol=1e-10, atol=1e-12)


def test_energy_large():
    x = np.random.default_rng(0).standard_normal(1 << 20)
    y = transform.rht_forward(x, RotationSpec(x.size, seed=1))
    assert np.linalg.norm(y) == pytest.approx(np.linalg.norm(x), rel=1e-12)


def test_roundtrip_d1000_and_basis():
    spec = RotationSpec(1000, seed=42)
    x = np.random.default_rng(1).standard_normal(1000)
    back = transform.rht_inverse(transform.rht_forward(x, spec), spec)
    assert np.max(np.abs(back - x) / np.abs(x)) <= 1e-10
    e1 = np.zeros(1000)
    e1[0] = 1
    np.testing.assert_allclose(transform.rht_inverse(transform.rht_forward(e1, spec), spec), e1, atol=1e-15)


def test_wrong_seed_detected():
    x = np.random.default_rng(2).standard_normal(64)
    y = transform.rht_forward(x, RotationSpec(64, seed=1))
    assert not np.allclose(transform.rht_inverse(y, RotationSpec(64, seed=2)), x)


def test_errors():
    spec = RotationSpec(4)
    with pytest.raises(DomainError):
        transform.rht_forward(np.array([1.0, np.nan, 0, 0]), spec)
    with pytest.raises(DomainError):
        transform.rht_forward(np.ones(3), spec)
    with pytest.raises(DomainError):
        transform.rht_inverse(np.ones(3), spec)


def test_rows_independent_and_deterministic():
    spec = RotationSpec(100, seed=9)
    X = np.random.default_rng(3).standard_normal((5, 100))
    Y = transform.rht_forward(X, spec)
    for i in range(5):
        np.testing.assert_array_equal(Y[i], transform.rht_forward(X[i], spec))
    np.testing.assert_array_equal(Y, transform.rht_forward(X, spec))


def test_signs_are_prf_low_bits():
    bits = prng.prf(5, np.arange(16), prng.STREAM_SIGNS) & np.uint64(1)
    np.testing.assert_array_equal(transform.rht_signs(5, 16), 1 - 2 * bits.astype(float))


def test_uniform_rotation_orthogonal_and_inverse():
    spec = RotationSpec(256, seed=4, kind="uniform")
    Q = transform.uniform_matrix(spec)
    assert np.max(np.abs(Q.T @ Q - np.eye(256))) <= 1e-10
    x = np.random.default_rng(5).standard_normal(256)
    y = transform.uniform_rotation(x, spec)
    assert np.linalg.norm(y) == pytest.approx(np.linalg.norm(x), rel=1e-10)
    np.testing.assert_allclose(transform.uniform_rotation(y, spec, inverse=True), x, atol=1e-9)


def test_uniform_rotation_coordinates_are_gaussian():
    # about 1e5 coordinates pooled from 98 independent rotations of a unit vector
    d = 1024
    e = np.zeros(d)
    e[0] = 1.0
    z = np.concatenate([transform.uniform_rotation(e, RotationSpec(d, seed=s, kind="uniform"))
                        for s in range(98)]) * np.sqrt(d)
    assert stats.kstest(z, "norm").pvalue > 0.01


def binomial_upper(rate, n, alpha=1e-3):
    return stats.binom.ppf(1 - alpha, n, rate)


def test_tail_bound_sparse_inputs():
    p = 1 / 512
    T = compute_threshold("1/512")
    d = 1 << 14
    e1 = np.zeros(d)
    e1[0] = 3.5
    z = transform.rht_forward(e1, RotationSpec(d, seed=0)) * np.sqrt(d) / 3.5
    assert np.sum(np.abs(z) > T) == 0
    rng = np.random.default_rng(6)
    count = 0
    for t in range(100):
        x = np.zeros(d)
        idx = rng.choice(d, size=rng.integers(1, 40), replace=False)
        x[idx] = rng.standard_normal(idx.size)
        z = transform.rht_forward(x, RotationSpec(d, seed=t)) * np.sqrt(d) / np.linalg.norm(x)
        count += int(np.sum(np.abs(z) > T))
    assert count <= binomial_upper(3.2 * p, 100 * d)
