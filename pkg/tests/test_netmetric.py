import numpy as np
import pytest

from contraction_kit.netmetric import (
    CHECKPOINT_VERSION,
    Mlp,
    eval_M,
    eval_W,
    eval_theta,
    eval_u,
    init_mlp,
    load_checkpoint,
    make_controller_net,
    make_metric_net,
    metric_time_and_flow_derivatives,
    mlp_eval_with_grads,
    save_checkpoint,
)
from contraction_kit.numerics import RngStream, eig_sym
from contraction_kit.systems import make_lti


def test_mlp_eval_zero_weights():
    net = Mlp(
        [np.zeros((4, 3)), np.zeros((2, 4))],
        [np.zeros(4), np.array([0.5, -1.0])],
    )
    y, jac, _ = mlp_eval_with_grads(net, np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(y, [0.5, -1.0])
    np.testing.assert_array_equal(jac, np.zeros((2, 3)))


def test_mlp_eval_single_linear_layer():
    w = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    net = Mlp([w.copy()], [np.zeros(3)])
    y, jac, grad_fn = mlp_eval_with_grads(net, np.array([1.0, -1.0]))
    np.testing.assert_allclose(jac, w)
    g = grad_fn(np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(g[0], np.array([[1.0, -1.0], [0, 0], [0, 0]]))
    np.testing.assert_allclose(g[1], np.array([1.0, 0.0, 0.0]))


def test_mlp_parameter_gradients_match_fd(rng):
    net = init_mlp([3, 8, 4], RngStream(1, 5))
    for p in net.params():
        p += 0.2 * rng.standard_normal(p.shape)
    x = rng.standard_normal(3)
    ybar = rng.standard_normal(4)
    _, _, grad_fn = mlp_eval_with_grads(net, x)
    grads = grad_fn(ybar)
    for arr, grad in zip(net.params(), grads):
        flat, gflat = arr.ravel(), np.asarray(grad).ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + 1e-6
            fp = ybar.dot(mlp_eval_with_grads(net, x)[0])
            flat[i] = old - 1e-6
            fm = ybar.dot(mlp_eval_with_grads(net, x)[0])
            flat[i] = old
            fd = (fp - fm) / 2e-6
            assert abs(fd - gflat[i]) <= 1e-5 * max(abs(fd), abs(gflat[i]), 1e-3)


def test_eval_w_floor_and_zero_theta():
    metric = make_metric_net(3, width=8, m_bar=2.0, m_under=0.5, seed=0)
    for w in metric.net.weights:
        w[:] = 0.0
    np.testing.assert_allclose(eval_W(metric, np.ones(3)), 0.5 * np.eye(3), atol=1e-15)
    np.testing.assert_allclose(eval_M(metric, np.ones(3)), 2.0 * np.eye(3), atol=1e-12)


def test_eval_w_eigenvalue_floor_random(rng):
    metric = make_metric_net(4, width=16, m_bar=7.0, seed=3)
    for p in metric.params():
        p += rng.standard_normal(p.shape)
    xs = rng.uniform(-2, 2, (50, 4))
    for x in xs:
        w = eval_W(metric, x)
        np.testing.assert_allclose(w, w.T, atol=1e-12)
        assert eig_sym(w)[0][0] >= 1.0 / 7.0 - 1e-9
        th = eval_theta(metric, x)
        np.testing.assert_allclose(w - th.T @ th, np.eye(4) / 7.0, atol=1e-12)


def test_eval_m_inverse_and_spectral_bound(rng):
    metric = make_metric_net(4, width=8, m_bar=5.0, seed=1)
    for p in metric.params():
        p += 0.5 * rng.standard_normal(p.shape)
    x = rng.uniform(-1, 1, 4)
    w = eval_W(metric, x)
    m = eval_M(metric, x)
    assert np.linalg.norm(m @ w - np.eye(4)) < 1e-9
    assert eig_sym(m)[0][-1] <= 5.0 + 1e-9
    np.testing.assert_allclose(
        np.sort(1.0 / eig_sym(w)[0]), eig_sym(m)[0][::-1].copy()[::-1], atol=1e-9
    )


def test_eval_u_reproduces_ud_exactly(rng):
    ctrl = make_controller_net(3, 2, width=8, h=6, seed=2)
    for p in ctrl.params():
        p += rng.standard_normal(p.shape)
    for _ in range(1000):
        x = rng.uniform(-3, 3, 3)
        u_d = rng.uniform(-2, 2, 2)
        u = eval_u(ctrl, x, x, u_d)
        assert np.array_equal(u, u_d)  # exact, not approximate


def test_eval_u_zero_w2_and_norm_bound(rng):
    ctrl = make_controller_net(3, 2, width=8, h=6, seed=4)
    for p in ctrl.w2_net.params():
        p[:] = 0.0
    x, xd = rng.standard_normal(3), rng.standard_normal(3)
    ud = rng.standard_normal(2)
    np.testing.assert_array_equal(eval_u(ctrl, x, xd, ud), ud)

    ctrl2 = make_controller_net(3, 2, width=8, h=6, seed=5)
    for p in ctrl2.params():
        p += rng.standard_normal(p.shape)
    from contraction_kit._backend import kernels

    for _ in range(50):
        x, xd = rng.standard_normal(3), rng.standard_normal(3)
        ud = rng.standard_normal(2)
        z = np.concatenate([x, xd])[None]
        w2 = kernels.mlp_forward(ctrl2.w2_net.weights, ctrl2.w2_net.biases, z)[0]
        w2 = w2.reshape(2, 6)
        bound = np.linalg.norm(w2, 2) * np.sqrt(6)
        assert np.linalg.norm(eval_u(ctrl2, x, xd, ud) - ud) <= bound + 1e-12


def test_metric_derivatives_trivial_cases():
    sysm = make_lti()
    metric = make_metric_net(2, width=8, m_bar=4.0, seed=0)
    dw_dt, flow_dw, dm_dt = metric_time_and_flow_derivatives(
        metric, sysm, np.array([0.3, -0.2]), np.array([0.1]), 0.0
    )
    np.testing.assert_array_equal(dw_dt, np.zeros((2, 2)))  # no time input
    for w in metric.net.weights:
        w[:] = 0.0
    dw_dt, flow_dw, dm_dt = metric_time_and_flow_derivatives(
        metric, sysm, np.array([0.3, -0.2]), np.array([0.1]), 0.0
    )
    np.testing.assert_array_equal(flow_dw, np.zeros((2, 2)))
    np.testing.assert_array_equal(dm_dt, np.zeros((2, 2)))


def test_metric_flow_derivative_matches_fd(rng):
    # Mdot = -M Wdot M along the closed-loop flow, vs finite differences of M
    sysm = make_lti()
    metric = make_metric_net(2, width=8, m_bar=4.0, seed=6)
    for p in metric.params():
        p += 0.4 * rng.standard_normal(p.shape)
    x = np.array([0.5, -0.3])
    u = np.array([0.2])
    _, _, dm_dt = metric_time_and_flow_derivatives(metric, sysm, x, u, 0.0)
    h = 1e-5
    xdot = sysm.h(x, u, 0.0)
    m_plus = eval_M(metric, x + h * xdot)
    m_minus = eval_M(metric, x - h * xdot)
    fd = (m_plus - m_minus) / (2 * h)
    assert np.abs(fd - dm_dt).max() <= 1e-4 * max(1.0, np.abs(fd).max())


def test_time_input_metric_has_time_derivative(rng):
    sysm = make_lti()
    metric = make_metric_net(2, width=8, m_bar=4.0, time_input=True, seed=7)
    for p in metric.params():
        p += 0.4 * rng.standard_normal(p.shape)
    x = np.array([0.1, 0.2])
    dw_dt, _, _ = metric_time_and_flow_derivatives(metric, sysm, x, np.array([0.0]), 0.5)
    h = 1e-5
    fd = (eval_W(metric, x, 0.5 + h) - eval_W(metric, x, 0.5 - h)) / (2 * h)
    np.testing.assert_allclose(dw_dt, fd, atol=1e-6)


def test_checkpoint_roundtrip(tmp_path):
    metric = make_metric_net(3, width=8, m_bar=6.0, m_under=0.7, seed=8)
    ctrl = make_controller_net(3, 1, width=8, h=4, seed=8)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, metric, ctrl, alpha=0.4, seed=8, extra={"system": "lti"})
    m2, c2, doc = load_checkpoint(path)
    assert doc["version"] == CHECKPOINT_VERSION
    assert doc["alpha"] == 0.4
    for a, b in zip(metric.params() + ctrl.params(), m2.params() + c2.params()):
        np.testing.assert_array_equal(a, b)
    assert m2.m_bar == 6.0 and m2.m_under == 0.7


def test_checkpoint_rejects_unknown_version(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"version": "other/v9"}')
    with pytest.raises(ValueError):
        load_checkpoint(path)
