"""NumPy implementations of the numerical kernels.

The compiled extension ``contraction_kit._backend._kernels`` mirrors every
public function in this module; ``contraction_kit._backend`` picks one of the
two at import time.  All kernels operate on float64 arrays.

MLP convention used throughout the package: an MLP is a pair of lists
``(ws, bs)`` with ``ws[l]`` of shape ``(d_out, d_in)`` and ``bs[l]`` of shape
``(d_out,)``.  Hidden layers apply tanh, the output layer is linear.  Batched
inputs have shape ``(B, d_in)``.

The second-order kernel :func:`mlp_vjp` backpropagates a scalar that depends
both on the network output and on entries of its input Jacobian (the loss
functions in this package contain such terms), so tanh curvature shows up as
a ``sigma''`` contribution in the hidden-layer recursion.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "pure"


# ---------------------------------------------------------------------------
# symmetric eigensolver (cyclic Jacobi)
# ---------------------------------------------------------------------------

def eigh_sym(a, max_sweeps=60, tol=1e-14):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, v)`` with eigenvalues ``w`` ascending and eigenvectors in
    the columns of ``v`` (``a = v @ diag(w) @ v.T``).  Intended for the small
    dense matrices used everywhere in this package (n <= ~20).
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a[0].copy(), v
    scale = np.sqrt((a * a).sum())
    if scale == 0.0:
        return np.zeros(n), v
    off_idx = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt((a[off_idx] ** 2).sum())
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:  # avoid overflow in theta**2
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                app, aqq = a[p, p], a[q, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    if k == p or k == q:
                        continue
                    akp, akq = a[k, p], a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[p, k] = a[k, p]
                    a[k, q] = s * akp + c * akq
                    a[q, k] = a[k, q]
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def eigh_sym_batch(a, max_sweeps=60, tol=1e-14):
    """Batched :func:`eigh_sym` for an array of shape (B, n, n)."""
    a = np.asarray(a, dtype=np.float64)
    nb, n = a.shape[0], a.shape[1]
    ws = np.empty((nb, n))
    vs = np.empty((nb, n, n))
    for i in range(nb):
        ws[i], vs[i] = eigh_sym(a[i], max_sweeps=max_sweeps, tol=tol)
    return ws, vs


# ---------------------------------------------------------------------------
# tanh MLP kernels
# ---------------------------------------------------------------------------

def mlp_forward(ws, bs, x):
    """Forward pass.  Returns ``(y, cache)``.

    ``cache`` holds the layer inputs: ``cache[0]`` is ``x`` and ``cache[l+1]``
    is the tanh output of hidden layer ``l``; it is consumed by
    :func:`mlp_jvp` and :func:`mlp_vjp`.
    """
    x = np.asarray(x, dtype=np.float64)
    a = x
    cache = [x]
    for l in range(len(ws) - 1):
        a = np.tanh(a @ ws[l].T + bs[l])
        cache.append(a)
    y = a @ ws[-1].T + bs[-1]
    return y, cache


def mlp_jvp(ws, bs, cache, dirs):
    """Propagate input tangent directions through the network.

    ``dirs`` has shape (ndir, d_in), shared across the batch.  Returns
    ``(jcols, us)`` where ``jcols[b, k]`` is the Jacobian-vector product
    ``J(x_b) @ dirs[k]`` and ``us`` caches the hidden pre-activation tangents
    needed by :func:`mlp_vjp`.
    """
    t = np.asarray(dirs, dtype=np.float64)
    us = []
    for l in range(len(ws) - 1):
        u = t @ ws[l].T
        us.append(u)
        s = cache[l + 1]
        if u.ndim == 2:  # first hidden layer: tangents not yet batch-dependent
            t = (1.0 - s * s)[:, None, :] * u[None, :, :]
        else:
            t = (1.0 - s * s)[:, None, :] * u
    j = t @ ws[-1].T
    if j.ndim == 2:  # purely linear network: Jacobian independent of input
        j = np.broadcast_to(j, (cache[0].shape[0],) + j.shape)
    return j, us


def mlp_vjp(ws, bs, cache, us, dirs, ybar, jbar):
    """Parameter gradients of ``sum(ybar * y) + sum(jbar * jcols)``.

    ``ybar`` (B, d_out) is the cotangent on the network output; ``jbar``
    (B, ndir, d_out) the cotangent on :func:`mlp_jvp` results for the same
    ``dirs`` (pass ``None`` when the scalar does not touch the Jacobian).
    Gradients are summed over the batch.  Returns ``(wbars, bbars)``.
    """
    nlayers = len(ws)
    ybar = np.asarray(ybar, dtype=np.float64)
    with_tan = jbar is not None

    def tangent_in(l):
        # tangent input of layer l: dirs for l == 0 else tanh'(z) * u
        if l == 0:
            return dirs
        s = cache[l]
        u = us[l - 1]
        if u.ndim == 2:
            return (1.0 - s * s)[:, None, :] * u[None, :, :]
        return (1.0 - s * s)[:, None, :] * u

    wbars = [None] * nlayers
    bbars = [None] * nlayers
    abar = ybar
    tbar = jbar
    for l in range(nlayers - 1, -1, -1):
        if l == nlayers - 1:
            zbar = abar
            ubar = tbar
        else:
            s = cache[l + 1]
            sp = 1.0 - s * s
            zbar = sp * abar
            if with_tan:
                u = us[l]
                ubar = sp[:, None, :] * tbar
                # sigma'' term: the tangent path bends the primal cotangent
                if u.ndim == 2:
                    zbar = zbar + np.einsum("bd,kd,bkd->bd", -2.0 * s * sp, u, tbar)
                else:
                    zbar = zbar + np.einsum("bd,bkd,bkd->bd", -2.0 * s * sp, u, tbar)
        a_prev = cache[l]
        wb = np.einsum("bo,bi->oi", zbar, a_prev)
        if with_tan:
            t_prev = tangent_in(l)
            if t_prev.ndim == 2:
                wb = wb + np.einsum("bko,ki->oi", ubar, t_prev)
            else:
                wb = wb + np.einsum("bko,bki->oi", ubar, t_prev)
        wbars[l] = wb
        bbars[l] = zbar.sum(axis=0)
        if l > 0:
            abar = zbar @ ws[l]
            if with_tan:
                tbar = ubar @ ws[l]
    return wbars, bbars


# ---------------------------------------------------------------------------
# sampled positive-definiteness hinge
# ---------------------------------------------------------------------------

def hinge_psd(c, points):
    """Sampled penalty that ``c`` fails to be negative semidefinite.

    ``c`` has shape (B, n, n), ``points`` (K, n) unit vectors.  Returns
    ``(vals, cbar)`` with ``vals[b] = mean_k max(0, p_k^T c_b p_k)`` and
    ``cbar[b]`` its gradient with respect to ``c_b``.
    """
    c = np.asarray(c, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    k = p.shape[0]
    q = np.einsum("ki,bij,kj->bk", p, c, p)
    act = (q > 0.0).astype(np.float64)
    vals = (q * act).sum(axis=1) / k
    cbar = np.einsum("bk,ki,kj->bij", act, p, p) / k
    return vals, cbar
