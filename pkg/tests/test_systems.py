import numpy as np
import pytest

from contraction_kit.numerics import RngStream
from contraction_kit.systems import (
    GRAVITY,
    PVTOL_MASS,
    TargetBoxError,
    annihilator,
    directional_matrix_derivative,
    generate_target,
    get_system,
    make_lti,
    make_pvtol,
    make_scalar_test,
    sample_initial_error,
)


def _fd_jacobian(f, x, t, h=1e-6):
    n = len(x)
    cols = []
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        cols.append((f(x + e, t) - f(x - e, t)) / (2 * h))
    return np.stack(cols, axis=1)


def test_pvtol_hover_balance():
    sysm = make_pvtol()
    hover = np.zeros(6)
    u = np.array([PVTOL_MASS * GRAVITY, 0.0])
    np.testing.assert_allclose(sysm.h(hover, u, 0.0), np.zeros(6), atol=1e-12)


@pytest.mark.parametrize(
    "system",
    [make_pvtol(), make_scalar_test(-1.0), make_lti()],
    ids=["pvtol", "scalar", "lti"],
)
def test_analytic_jacobians_match_fd(system, rng):
    lo, hi = system.state_box
    for _ in range(100):
        x = rng.uniform(lo, hi)
        jf = system.jac_f(x, 0.0)
        fd = _fd_jacobian(system.f, x, 0.0)
        assert np.abs(jf - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())


def test_pvtol_b_bounded():
    sysm = make_pvtol()
    assert np.isfinite(sysm.b_bar) and sysm.b_bar > 0
    # constant B: the stored bound is the exact 2-norm
    b = sysm.B(np.zeros(6), 0.0)
    assert sysm.b_bar == pytest.approx(np.linalg.norm(b, 2), rel=1e-6)


def test_scalar_system_examples():
    sysm = make_scalar_test(-1.0)
    assert sysm.f(np.array([2.0]), 0.0)[0] == pytest.approx(-2.0)
    assert sysm.jac_f(np.array([0.3]), 0.0)[0, 0] == pytest.approx(-1.0)
    bp = annihilator(sysm.B(np.zeros(1), 0.0))
    assert bp.shape == (0, 1)


def test_batched_evaluation_matches_single():
    sysm = make_pvtol()
    xs = np.random.default_rng(0).uniform(
        sysm.state_box[0], sysm.state_box[1], (7, 6)
    )
    fb = sysm.f(xs, 0.0)
    jb = sysm.jac_f(xs, 0.0)
    for i in range(7):
        np.testing.assert_allclose(fb[i], sysm.f(xs[i], 0.0))
        np.testing.assert_allclose(jb[i], sysm.jac_f(xs[i], 0.0))


def test_annihilator_axis_case():
    bp = annihilator(np.array([[1.0], [0.0]]))
    np.testing.assert_allclose(np.abs(bp), np.array([[0.0, 1.0]]), atol=1e-14)


def test_annihilator_full_rank_square():
    bp = annihilator(np.eye(3))
    assert bp.shape == (0, 3)


def test_annihilator_random_properties(rng):
    # 1000 random matrices, n <= 8: orthonormal rows that kill B
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, n + 1))
        b = rng.standard_normal((n, m))
        bp = annihilator(b)
        r = n - bp.shape[0]
        assert r == np.linalg.matrix_rank(b, tol=1e-9)
        if bp.shape[0]:
            assert np.linalg.norm(bp @ b) < 1e-10
            np.testing.assert_allclose(
                bp @ bp.T, np.eye(bp.shape[0]), atol=1e-10
            )


def test_annihilator_tall_full_rank(rng):
    for _ in range(50):
        b = rng.standard_normal((6, 2))
        bp = annihilator(b)
        assert bp.shape == (4, 6)
        assert np.linalg.norm(bp @ b) < 1e-10
        np.testing.assert_allclose(bp @ bp.T, np.eye(4), atol=1e-10)


def test_directional_derivative_examples():
    f1 = lambda x, t: x[0] * np.eye(2)  # noqa: E731
    out = directional_matrix_derivative(f1, np.array([1.0, 0.0]), np.array([0.3, 0.7]), 0.0)
    np.testing.assert_allclose(out, np.eye(2), atol=1e-9)
    const = lambda x, t: np.array([[1.0, 2.0], [3.0, 4.0]])  # noqa: E731
    out = directional_matrix_derivative(const, np.ones(2), np.zeros(2), 0.0)
    np.testing.assert_allclose(out, np.zeros((2, 2)), atol=1e-9)
    f2 = lambda x, t: np.diag([x[0] ** 2, x[1]])  # noqa: E731
    out = directional_matrix_derivative(f2, np.array([1.0, 0.0]), np.array([2.0, 5.0]), 0.0)
    np.testing.assert_allclose(out, np.diag([4.0, 0.0]), atol=1e-6)
    # analytic closure takes precedence
    out = directional_matrix_derivative(
        f2, np.array([1.0, 0.0]), np.array([2.0, 5.0]), 0.0,
        analytic=lambda p, x, t: np.diag([2.0 * x[0] * p[0], p[1]]),
    )
    np.testing.assert_array_equal(out, np.diag([4.0, 0.0]))


def test_generate_target_zero_amplitude_is_unforced_flow():
    sysm = make_scalar_test(-1.0)
    tr = generate_target(sysm, 2.0, seed=5, dt=1e-3, amplitude=np.zeros(1))
    np.testing.assert_array_equal(tr.us, np.zeros_like(tr.us))
    from contraction_kit.numerics import integrate_ode

    _, xs = integrate_ode(lambda x, t: sysm.f(x, t), tr.xs[0], 0.0, 2.0, 1e-3)
    np.testing.assert_allclose(tr.xs, xs, atol=1e-12)


def test_generate_target_deterministic():
    sysm = make_scalar_test(-1.0)
    t1 = generate_target(sysm, 1.0, seed=9)
    t2 = generate_target(sysm, 1.0, seed=9)
    np.testing.assert_array_equal(t1.xs, t2.xs)
    np.testing.assert_array_equal(t1.us, t2.us)
    t3 = generate_target(sysm, 1.0, seed=10)
    assert not np.array_equal(t1.xs, t3.xs)


@pytest.mark.parametrize("system", [make_scalar_test(-1.0), make_pvtol()],
                         ids=["scalar", "pvtol"])
def test_target_dynamics_residual(system):
    # finite-difference time derivative of x_d matches f + B u_d
    tr = generate_target(system, 2.0, seed=3, dt=1e-3)
    xd_dot = (tr.xs[2:] - tr.xs[:-2]) / (tr.ts[2] - tr.ts[0])
    rhs = np.stack(
        [system.h(tr.xs[i], tr.us[i], tr.ts[i]) for i in range(1, len(tr.ts) - 1)]
    )
    assert np.abs(xd_dot - rhs).max() < 1e-4


def test_target_stays_in_box_and_u_fn_matches_grid():
    sysm = make_pvtol()
    tr = generate_target(sysm, 3.0, seed=1, dt=2e-3)
    lo, hi = sysm.state_box
    assert np.all(tr.xs >= lo) and np.all(tr.xs <= hi)
    np.testing.assert_allclose(tr.u_fn(tr.ts), tr.us, atol=1e-12)


def test_target_retry_budget_error():
    sysm = make_scalar_test(3.0)  # strongly unstable: always leaves the box
    with pytest.raises(TargetBoxError):
        generate_target(sysm, 5.0, seed=0, dt=1e-2)


def test_initial_error_sampling():
    sysm = make_pvtol()
    e = sample_initial_error(sysm, RngStream(3, 6), count=64)
    assert np.all(e >= sysm.error_box[0]) and np.all(e <= sysm.error_box[1])
    x0 = generate_target(sysm, 1.0, seed=2, dt=2e-3).xs[0] + e[0]
    assert x0.shape == (6,)


def test_get_system_registry():
    assert get_system("pvtol").name == "pvtol"
    assert get_system("scalar", a=-2.0).jac_f(np.zeros(1), 0.0)[0, 0] == -2.0
    assert get_system("lti").n == 2
    with pytest.raises(KeyError):
        get_system("quadrotor")
