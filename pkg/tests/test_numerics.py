import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from osplab.numerics import (
    DegenerateDistributionError, InsufficientSamplesError, NumericsError, RngState,
    excess_kurtosis, gaussian, hadamard_matrix, matmul, newton_schulz_orthogonalize,
    orthogonal_init, randint, uniform,
)


def svd_polar(g):
    u, _, vt = np.linalg.svd(g, full_matrices=False)
    return u @ vt


# --- matmul

def test_matmul_hand_product():
    out = matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0, 6], [7, 8]]))
    np.testing.assert_array_equal(out, [[19, 22], [43, 50]])


def test_matmul_identity_and_zero():
    b = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(matmul(np.eye(3), b), b)
    np.testing.assert_array_equal(matmul(b, np.zeros((4, 2))), np.zeros((3, 2)))


def test_matmul_shape_errors():
    with pytest.raises(NumericsError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(NumericsError):
        matmul(np.ones(3), np.ones((3, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_matmul_associative(m, n, p, q, seed):
    rs = np.random.default_rng(seed)
    a, b, c = rs.standard_normal((m, n)), rs.standard_normal((n, p)), rs.standard_normal((p, q))
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))


# --- Newton-Schulz

def test_ns_rotation_is_fixed():
    t = 0.7
    r = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    assert np.max(np.abs(newton_schulz_orthogonalize(r) - svd_polar(r))) <= 1e-2


def test_ns_diagonal_goes_to_identity():
    out = newton_schulz_orthogonalize(np.diag([3.0, 1.0]))
    assert np.max(np.abs(out - np.eye(2))) <= 1e-2


def test_ns_gaussian_singular_values():
    g = np.random.default_rng(0).standard_normal((16, 16))
    s = np.linalg.svd(newton_schulz_orthogonalize(g), compute_uv=False)
    assert s.min() >= 0.3 and s.max() <= 1.3


def test_ns_tall_matches_transpose():
    g = np.random.default_rng(1).standard_normal((12, 5))
    np.testing.assert_allclose(newton_schulz_orthogonalize(g), newton_schulz_orthogonalize(g.T).T, atol=1e-14)


def test_ns_rejects_zero_and_nan():
    with pytest.raises(NumericsError):
        newton_schulz_orthogonalize(np.zeros((3, 3)))
    with pytest.raises(NumericsError):
        newton_schulz_orthogonalize(np.array([[1.0, np.nan], [0, 1]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 64), st.integers(2, 64), st.integers(0, 2**31))
def test_ns_singular_values_bounded_for_conditioned_inputs(m, n, seed):
    rs = np.random.default_rng(seed)
    k = min(m, n)
    u, _ = np.linalg.qr(rs.standard_normal((m, k)))
    v, _ = np.linalg.qr(rs.standard_normal((n, k)))
    s = np.exp(rs.uniform(0, math.log(100), k))  # condition number <= 100
    s[0] = 1.0
    g = (u * s) @ v.T
    out = np.linalg.svd(newton_schulz_orthogonalize(g), compute_uv=False)
    assert out.min() >= 0.3 and out.max() <= 1.3


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2**31))
def test_ns_orthogonal_fixed_point(d, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
    assert np.max(np.abs(newton_schulz_orthogonalize(q) - q)) <= 1e-2


# --- Hadamard

def test_hadamard_small_cases():
    np.testing.assert_array_equal(hadamard_matrix(1), [[1.0]])
    np.testing.assert_allclose(hadamard_matrix(2), np.array([[1, 1], [1, -1]]) / math.sqrt(2), atol=0)
    np.testing.assert_allclose(hadamard_matrix(8)[:, 0], np.full(8, 1 / math.sqrt(8)), atol=1e-15)


@pytest.mark.parametrize("d", [2**k for k in range(11)])
def test_hadamard_orthonormal(d):
    h = hadamard_matrix(d)
    assert np.max(np.abs(h @ h.T - np.eye(d))) <= 1e-12


@pytest.mark.parametrize("d", [0, 3, 6, 12, 1000])
def test_hadamard_rejects_non_power_of_two(d):
    with pytest.raises(NumericsError):
        hadamard_matrix(d)


# --- kurtosis

def test_kurtosis_two_point():
    assert excess_kurtosis([-1, 1, -1, 1]) == pytest.approx(-2.0, abs=1e-15)


def test_kurtosis_hand_example():
    # mean 2, variance 16, fourth central moment 832
    assert excess_kurtosis([0, 0, 0, 0, 10]) == pytest.approx(832 / 256 - 3, abs=1e-12)
    assert excess_kurtosis([0, 0, 0, 0, 10]) == pytest.approx(0.25, abs=1e-12)


def test_kurtosis_gaussian():
    z = np.random.default_rng(3).standard_normal(10**6)
    assert abs(excess_kurtosis(z)) <= 0.05


def test_kurtosis_errors():
    with pytest.raises(InsufficientSamplesError):
        excess_kurtosis([1.0, 2.0, 3.0])
    with pytest.raises(DegenerateDistributionError):
        excess_kurtosis([5.0] * 10)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(8, 200), elements=st.floats(-10, 10)),
       st.floats(0.1, 10) | st.floats(-10, -0.1), st.floats(-100, 100))
def test_kurtosis_affine_invariant(x, a, b):
    if np.std(x) < 1e-3:
        return
    assert excess_kurtosis(a * x + b) == pytest.approx(excess_kurtosis(x), abs=1e-9)


# --- randomness

def test_gaussian_deterministic_and_advances():
    rng = RngState(42)
    a, r1 = gaussian(rng, 100)
    b, r2 = gaussian(rng, 100)
    np.testing.assert_array_equal(a, b)
    assert r1 == r2 and r1.position > rng.position
    c, _ = gaussian(r1, 100)
    assert not np.array_equal(a, c)


def test_gaussian_std_zero():
    x, _ = gaussian(RngState(0), 7, mean=3.5, std=0.0)
    np.testing.assert_array_equal(x, np.full(7, 3.5))


def test_gaussian_moments():
    x, _ = gaussian(RngState(1), 10**6)
    assert 0.995 <= x.std() <= 1.005
    assert abs(x.mean()) < 5 / 1000


def test_split_streams_differ():
    root = RngState(0)
    a, _ = uniform(root.split("a"), 8)
    b, _ = uniform(root.split("b"), 8)
    a2, _ = uniform(root.split("a"), 8)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, a2)


def test_resume_from_position_matches_continuous_draw():
    rng = RngState(9)
    whole, _ = uniform(rng, 16)
    first, mid = uniform(rng, 8)
    second, _ = uniform(mid, 8)
    np.testing.assert_array_equal(whole, np.concatenate([first, second]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**63), st.integers(1, 2**32), st.integers(1, 300))
def test_randint_in_range(seed, high, n):
    x, _ = randint(RngState(seed), n, high)
    assert x.shape == (n,) and x.min() >= 0 and x.max() < high


def test_orthogonal_init_square():
    q, _ = orthogonal_init(4, 4, RngState(0))
    assert np.max(np.abs(q.T @ q - np.eye(4))) <= 1e-10


def test_orthogonal_init_scalar():
    q, _ = orthogonal_init(1, 1, RngState(5))
    assert abs(abs(q[0, 0]) - 1.0) <= 1e-15


def test_orthogonal_init_tall_columns():
    q, _ = orthogonal_init(6, 3, RngState(2))
    assert q.shape == (6, 3)
    np.testing.assert_allclose(np.linalg.norm(q, axis=0), 1.0, atol=1e-10)
    gram = q.T @ q
    assert np.max(np.abs(gram - np.diag(np.diag(gram)))) <= 1e-10


def test_orthogonal_init_wide_rows():
    q, _ = orthogonal_init(3, 6, RngState(2))
    assert np.max(np.abs(q @ q.T - np.eye(3))) <= 1e-10
