"""Kernel contracts, checked identically on the pure and compiled backends."""

import numpy as np
import pytest

from contraction_kit._backend import available_backends, get_kernels


def _random_net(rng, sizes, scale=0.7):
    ws = [
        np.ascontiguousarray(rng.standard_normal((sizes[i + 1], sizes[i])) * scale)
        for i in range(len(sizes) - 1)
    ]
    bs = [
        np.ascontiguousarray(rng.standard_normal(sizes[i + 1]) * 0.3)
        for i in range(len(sizes) - 1)
    ]
    return ws, bs


def test_eigh_reconstruction(kernels, rng):
    for n in range(1, 13):
        a = rng.standard_normal((n, n))
        a = 0.5 * (a + a.T)
        w, v = kernels.eigh_sym(a)
        recon = v @ np.diag(w) @ v.T
        assert np.linalg.norm(recon - a) <= 1e-9 * max(np.linalg.norm(a), 1e-12)
        assert np.all(np.diff(w) >= 0)
        np.testing.assert_allclose(v.T @ v, np.eye(n), atol=1e-12)


def test_eigh_matches_lapack(kernels, rng):
    for _ in range(50):
        n = int(rng.integers(2, 10))
        a = rng.standard_normal((n, n))
        a = 0.5 * (a + a.T) * 10.0 ** float(rng.integers(-2, 3))
        w, _ = kernels.eigh_sym(a)
        ref = np.linalg.eigvalsh(a)
        np.testing.assert_allclose(w, ref, atol=1e-10 * max(1, abs(ref).max()))


def test_eigh_batch(kernels, rng):
    a = rng.standard_normal((7, 5, 5))
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    ws, vs = kernels.eigh_sym_batch(a)
    for i in range(7):
        w, v = kernels.eigh_sym(a[i])
        np.testing.assert_allclose(ws[i], w, atol=1e-13)
        np.testing.assert_allclose(vs[i], v, atol=1e-13)


@pytest.mark.parametrize("sizes", [(4, 8, 5), (3, 6, 6, 4), (4, 5)])
def test_mlp_jacobian_matches_fd(kernels, rng, sizes):
    ws, bs = _random_net(rng, sizes)
    x = rng.standard_normal((3, sizes[0]))
    dirs = np.eye(sizes[0])
    y, cache = kernels.mlp_forward(ws, bs, x)
    j, _ = kernels.mlp_jvp(ws, bs, cache, dirs)
    h = 1e-6
    for k in range(sizes[0]):
        yp, _ = kernels.mlp_forward(ws, bs, x + h * dirs[k])
        ym, _ = kernels.mlp_forward(ws, bs, x - h * dirs[k])
        np.testing.assert_allclose((yp - ym) / (2 * h), np.asarray(j)[:, k, :], atol=1e-7)


@pytest.mark.parametrize("sizes", [(4, 8, 5), (3, 6, 6, 4), (4, 5)])
def test_mlp_vjp_matches_fd(kernels, rng, sizes):
    """The scalar ybar.y + jbar.J is differentiated exactly w.r.t. parameters."""
    ws, bs = _random_net(rng, sizes)
    x = rng.standard_normal((2, sizes[0]))
    dirs = np.eye(sizes[0])
    ybar = rng.standard_normal((2, sizes[-1]))
    jbar = rng.standard_normal((2, sizes[0], sizes[-1]))

    def scalar():
        y, cache = kernels.mlp_forward(ws, bs, x)
        j, _ = kernels.mlp_jvp(ws, bs, cache, dirs)
        return float((ybar * y).sum() + (jbar * np.asarray(j)).sum())

    y, cache = kernels.mlp_forward(ws, bs, x)
    _, us = kernels.mlp_jvp(ws, bs, cache, dirs)
    wg, bg = kernels.mlp_vjp(ws, bs, cache, us, dirs, ybar, jbar)
    for arr, grad in list(zip(ws, wg)) + list(zip(bs, bg)):
        flat, gflat = arr.ravel(), np.asarray(grad).ravel()
        for i in range(0, flat.size, max(1, flat.size // 10)):
            old = flat[i]
            flat[i] = old + 1e-6
            fp = scalar()
            flat[i] = old - 1e-6
            fm = scalar()
            flat[i] = old
            fd = (fp - fm) / 2e-6
            assert abs(fd - gflat[i]) <= 1e-4 * max(abs(fd), abs(gflat[i]), 1e-3)


def test_hinge_psd_values_and_gradient(kernels, rng):
    c = rng.standard_normal((4, 5, 5))
    c = 0.5 * (c + np.swapaxes(c, 1, 2))
    p = rng.standard_normal((16, 5))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    vals, cbar = kernels.hinge_psd(c, p)
    q = np.einsum("ki,bij,kj->bk", p, c, p)
    np.testing.assert_allclose(vals, np.maximum(q, 0).mean(axis=1), atol=1e-13)
    h = 1e-7
    for b in range(4):
        for idx in [(0, 0), (1, 3), (4, 2)]:
            cpert = c.copy()
            cpert[b][idx] += h
            vp, _ = kernels.hinge_psd(cpert, p)
            fd = (vp[b] - vals[b]) / h
            np.testing.assert_allclose(fd, cbar[b][idx], atol=1e-5)


def test_backends_agree(rng):
    names = available_backends()
    if len(names) < 2:
        pytest.skip("only one backend built")
    mods = [get_kernels(n) for n in names]
    sizes = (5, 16, 12)
    ws, bs = _random_net(rng, sizes)
    x = rng.standard_normal((6, sizes[0]))
    dirs = np.eye(sizes[0])[:3]
    ybar = rng.standard_normal((6, sizes[-1]))
    jbar = rng.standard_normal((6, 3, sizes[-1]))
    outs = []
    for mod in mods:
        y, cache = mod.mlp_forward(ws, bs, x)
        j, us = mod.mlp_jvp(ws, bs, cache, dirs)
        wg, bg = mod.mlp_vjp(ws, bs, cache, us, dirs, ybar, jbar)
        outs.append((y, np.asarray(j), [np.asarray(g) for g in wg + bg]))
    for y2, j2, g2 in outs[1:]:
        np.testing.assert_allclose(outs[0][0], y2, atol=1e-12)
        np.testing.assert_allclose(outs[0][1], j2, atol=1e-12)
        for a, b in zip(outs[0][2], g2):
            np.testing.assert_allclose(a, b, atol=1e-11)
