import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contraction_kit.numerics import (
    DivergedError,
    NotSymmetricError,
    RngStream,
    integrate_ode,
    integrate_sde,
    is_definite,
    min_eig_sym,
    path_quadrature,
    sample_unit_sphere,
    sym,
)


def test_sym_identity_and_definition():
    np.testing.assert_array_equal(sym(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(
        sym(np.array([[0.0, 2.0], [0.0, 0.0]])), np.array([[0.0, 1.0], [1.0, 0.0]])
    )


@given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=10_000))
@settings(max_examples=40, deadline=None)
def test_sym_idempotent_and_symmetric(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    s = sym(a)
    assert np.linalg.norm(s - s.T) <= 1e-12 * max(1.0, np.linalg.norm(a))
    np.testing.assert_allclose(sym(s), s, atol=1e-15)


def test_min_eig_examples():
    assert min_eig_sym(np.eye(4)) == pytest.approx(1.0)
    assert min_eig_sym(np.diag([3.0, -2.0])) == pytest.approx(-2.0)
    a = np.array([[-2.0, 1.0], [1.0, -1.0]])
    assert min_eig_sym(a) == pytest.approx((-3.0 - np.sqrt(5.0)) / 2.0, abs=1e-12)


def test_min_eig_rejects_nonsymmetric():
    with pytest.raises(NotSymmetricError):
        min_eig_sym(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_is_definite_examples():
    assert is_definite(np.eye(2), "psd", 0.0)
    assert not is_definite(-np.eye(2), "psd", 0.0)
    assert is_definite(np.array([[-2.0, 1.0], [1.0, -1.0]]), "nsd", 0.0)
    assert is_definite(np.eye(2), "pd", 0.0)
    assert is_definite(-np.eye(2), "nd", 0.0)
    assert not is_definite(np.zeros((2, 2)), "pd", 0.0)


def test_rk4_exponential():
    _, xs = integrate_ode(lambda x, t: -x, np.array([1.0]), 0.0, 1.0, 1e-3)
    assert abs(xs[-1, 0] - np.exp(-1.0)) < 1e-8


def test_rk4_constant_and_linear_time():
    ts, xs = integrate_ode(lambda x, t: 0.0 * x, np.array([2.5]), 0.0, 2.0, 1e-2)
    np.testing.assert_array_equal(xs[:, 0], np.full(len(ts), 2.5))
    ts, xs = integrate_ode(
        lambda x, t: np.ones_like(x), np.array([0.0]), 0.0, 1.0, 1e-2
    )
    np.testing.assert_allclose(xs[:, 0], ts, atol=1e-13)


def test_rk4_order():
    # halving dt shrinks the terminal error by ~2^4; demand at least 15x
    errs = []
    for dt in (2e-2, 1e-2, 5e-3):
        _, xs = integrate_ode(lambda x, t: -x, np.array([1.0]), 0.0, 1.0, dt)
        errs.append(abs(xs[-1, 0] - np.exp(-1.0)))
    assert errs[0] / errs[1] >= 15.0
    assert errs[1] / errs[2] >= 15.0


def test_ode_divergence_raises():
    with pytest.raises(DivergedError):
        integrate_ode(lambda x, t: x * x, np.array([5.0]), 0.0, 10.0, 1e-2)


def test_em_drift_only_matches_euler():
    drift = lambda x, t: -x  # noqa: E731
    zero_diff = lambda x, t: np.zeros(x.shape + (1,))  # noqa: E731
    _, xs_sde = integrate_sde(
        drift, zero_diff, np.array([1.0]), 0.0, 1.0, 1e-2, RngStream(1, 3)
    )
    _, xs_euler = integrate_ode(drift, np.array([1.0]), 0.0, 1.0, 1e-2, method="euler")
    np.testing.assert_array_equal(xs_sde, xs_euler)


def test_em_brownian_variance():
    sigma = 0.7
    p = 10_000
    x0 = np.zeros((p, 1))
    diff = lambda x, t: np.full(x.shape[:-1] + (1, 1), sigma)  # noqa: E731
    _, xs = integrate_sde(
        lambda x, t: 0.0 * x, diff, x0, 0.0, 1.0, 1e-2, RngStream(2, 3)
    )
    var = xs[-1, :, 0].var()
    se = np.sqrt(2.0 / p)  # var of chi2-based variance estimate ~ 2 sigma^4 t^2 / p
    assert abs(var - sigma**2) <= 3.0 * se * sigma**2


def test_em_ou_stationary_variance():
    # dx = -x dt + sigma dW has stationary variance sigma^2 / 2
    sigma = 0.5
    p = 8000
    diff = lambda x, t: np.full(x.shape[:-1] + (1, 1), sigma)  # noqa: E731
    _, xs = integrate_sde(
        lambda x, t: -x, diff, np.zeros((p, 1)), 0.0, 8.0, 1e-3, RngStream(3, 3)
    )
    target = sigma**2 / 2.0
    est = (xs[-1, :, 0] ** 2).mean()
    se = (xs[-1, :, 0] ** 2).std(ddof=1) / np.sqrt(p)
    assert abs(est - target) <= 3.0 * se + 1e-3 * target  # small EM step bias


def test_em_bit_reproducible():
    diff = lambda x, t: np.full(x.shape[:-1] + (1, 1), 0.3)  # noqa: E731
    out = [
        integrate_sde(lambda x, t: -x, diff, np.array([1.0]), 0.0, 1.0, 1e-3,
                      RngStream(11, 3))[1]
        for _ in range(2)
    ]
    np.testing.assert_array_equal(out[0], out[1])


def test_sphere_sampling():
    pts = sample_unit_sphere(5, 300, RngStream(4, 2))
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)
    one_d = sample_unit_sphere(1, 64, RngStream(5, 2))
    assert set(np.unique(one_d)) <= {-1.0, 1.0}
    big = sample_unit_sphere(3, 100_000, RngStream(6, 2))
    assert np.abs(big.mean(axis=0)).max() < 0.02
    again = sample_unit_sphere(5, 300, RngStream(4, 2))
    np.testing.assert_array_equal(pts, again)


def test_path_quadrature_constant_and_linear():
    a, b = np.array([0.0, 0.0]), np.array([3.0, 4.0])
    cvec = np.array([2.0, -1.0])
    # constant vector field: line integral = c . (b - a)
    val = path_quadrature(lambda q: cvec, a, b, 7)
    assert val == pytest.approx(cvec.dot(b - a))
    # scalar path of length L with constant scalar integrand -> c * L
    val = path_quadrature(lambda q: 2.0, np.array([1.0]), np.array([4.0]), 5)
    np.testing.assert_allclose(val, np.array([6.0]))
    # integrand linear along the path: trapezoid is exact for any N
    f = lambda q: np.array([q[0], 2.0 * q[1]])  # noqa: E731
    v1 = path_quadrature(f, a, b, 1)
    v9 = path_quadrature(f, a, b, 9)
    assert v1 == pytest.approx(v9, abs=1e-13)
    assert v1 == pytest.approx(0.5 * 3 * 3 + 4 * 4)


def test_path_quadrature_quadratic_convergence():
    a, b = np.array([0.0]), np.array([1.0])
    f = lambda q: q[0] ** 2  # noqa: E731
    exact = 1.0 / 3.0
    errs = [abs(path_quadrature(f, a, b, n)[0] - exact) for n in (4, 8, 16)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.15)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.15)


def test_path_quadrature_zero_length():
    a = np.array([1.0, 2.0])
    val = path_quadrature(lambda q: np.eye(2), a, a.copy(), 4)
    np.testing.assert_array_equal(val, np.zeros(2))


def test_rng_streams_independent_and_reproducible():
    g1 = RngStream(7, 1).generator().standard_normal(5)
    g2 = RngStream(7, 2).generator().standard_normal(5)
    assert not np.allclose(g1, g2)
    np.testing.assert_array_equal(g1, RngStream(7, 1).generator().standard_normal(5))
    child = RngStream(7, 1).child(3, 4)
    np.testing.assert_array_equal(
        child.generator().standard_normal(3),
        RngStream(7, 1, (3, 4)).generator().standard_normal(3),
    )
