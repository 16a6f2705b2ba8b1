# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: cyclic Jacobi eigensolver, tanh-MLP forward/JVP/VJP,
and the sampled definiteness hinge.

Mirrors ``contraction_kit._backend.pure`` function for function; the opaque
cache formats may differ between backends, so caches must not be shared
across them.  Built by setup.py; the package falls back to the pure backend
when this module is missing.
"""

import numpy as np

from libc.math cimport fabs, sqrt, tanh

BACKEND_NAME = "compiled"


# ---------------------------------------------------------------------------
# symmetric eigensolver (cyclic Jacobi)
# ---------------------------------------------------------------------------

cdef int _jacobi(double[:, ::1] a, double[:, ::1] v, int n,
                 int max_sweeps, double tol) nogil:
    cdef int sweep, p, q, k
    cdef double scale = 0.0, off, apq, theta, t, c, s
    cdef double app, aqq, akp, akq, vp, vq
    for p in range(n):
        for q in range(n):
            scale += a[p, q] * a[p, q]
    scale = sqrt(scale)
    if scale == 0.0:
        return 0
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += 2.0 * a[p, q] * a[p, q]
        if sqrt(off) <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if fabs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if fabs(theta) > 1e150:  # avoid overflow in theta**2
                    t = 0.5 / theta
                else:
                    t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                app = a[p, p]
                aqq = a[q, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    if k == p or k == q:
                        continue
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[p, k] = a[k, p]
                    a[k, q] = s * akp + c * akq
                    a[q, k] = a[k, q]
                for k in range(n):
                    vp = v[k, p]
                    vq = v[k, q]
                    v[k, p] = c * vp - s * vq
                    v[k, q] = s * vp + c * vq
    return 0


def eigh_sym(a, int max_sweeps=60, double tol=1e-14):
    """Ascending eigenvalues and column eigenvectors of a symmetric matrix."""
    cdef object aa = np.array(a, dtype=np.float64, order="C")
    cdef int n = aa.shape[0]
    cdef object vv = np.eye(n)
    if n == 1:
        return aa[0].copy(), vv
    _jacobi(aa, vv, n, max_sweeps, tol)
    w = np.diagonal(aa).copy()
    order = np.argsort(w, kind="stable")
    return w[order], vv[:, order]


def eigh_sym_batch(a, int max_sweeps=60, double tol=1e-14):
    cdef object aa = np.array(a, dtype=np.float64, order="C")
    cdef int nb = aa.shape[0]
    cdef int n = aa.shape[1]
    ws = np.empty((nb, n))
    vs = np.empty((nb, n, n))
    cdef object eye = np.eye(n)
    cdef int i
    for i in range(nb):
        v = eye.copy()
        if n > 1:
            _jacobi(aa[i], v, n, max_sweeps, tol)
        w = np.diagonal(aa[i]).copy()
        order = np.argsort(w, kind="stable")
        ws[i] = w[order]
        vs[i] = v[:, order]
    return ws, vs


# ---------------------------------------------------------------------------
# tanh MLP kernels
# ---------------------------------------------------------------------------

cdef void _linear(const double[:, ::1] a, const double[:, ::1] w,
                  const double[::1] b, double[:, ::1] out) nogil:
    # out[i, o] = sum_j a[i, j] w[o, j] + b[o]
    cdef int nb = a.shape[0], din = a.shape[1], dout = w.shape[0]
    cdef int i, o, j
    cdef double acc
    for i in range(nb):
        for o in range(dout):
            acc = b[o]
            for j in range(din):
                acc += a[i, j] * w[o, j]
            out[i, o] = acc


cdef void _tanh_inplace(double[:, ::1] z) nogil:
    cdef int i, j
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            z[i, j] = tanh(z[i, j])


cdef void _tangent_linear(const double[:, :, ::1] t, const double[:, ::1] w,
                          double[:, :, ::1] out) nogil:
    # out[b, k, o] = sum_j t[b, k, j] w[o, j]
    cdef int nb = t.shape[0], nd = t.shape[1], din = t.shape[2]
    cdef int dout = w.shape[0]
    cdef int b, k, o, j
    cdef double acc
    for b in range(nb):
        for k in range(nd):
            for o in range(dout):
                acc = 0.0
                for j in range(din):
                    acc += t[b, k, j] * w[o, j]
                out[b, k, o] = acc


cdef void _tangent_act(const double[:, ::1] s, const double[:, :, ::1] u,
                       double[:, :, ::1] out) nogil:
    # out[b, k, d] = (1 - s[b, d]^2) * u[b, k, d]
    cdef int b, k, d
    cdef double sp
    for b in range(u.shape[0]):
        for k in range(u.shape[1]):
            for d in range(u.shape[2]):
                sp = 1.0 - s[b, d] * s[b, d]
                out[b, k, d] = sp * u[b, k, d]


def mlp_forward(ws, bs, x):
    """Forward pass; cache holds layer inputs (same layout as the pure backend)."""
    cdef object a = np.ascontiguousarray(x, dtype=np.float64)
    cache = [a]
    cdef int nlayers = len(ws)
    cdef int l
    cdef object z
    for l in range(nlayers - 1):
        z = np.empty((a.shape[0], ws[l].shape[0]))
        _linear(a, ws[l], bs[l], z)
        _tanh_inplace(z)
        cache.append(z)
        a = z
    z = np.empty((a.shape[0], ws[nlayers - 1].shape[0]))
    _linear(a, ws[nlayers - 1], bs[nlayers - 1], z)
    return z, cache


def mlp_jvp(ws, bs, cache, dirs):
    """Tangent propagation for shared input directions; returns (jcols, us)."""
    cdef object d0 = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef int nb = cache[0].shape[0]
    cdef int nd = d0.shape[0]
    cdef int nlayers = len(ws)
    cdef int l
    us = []
    # tangents at the input, tiled across the batch
    cdef object t = np.broadcast_to(d0, (nb, nd, d0.shape[1]))
    t = np.ascontiguousarray(t)
    cdef object u, tn
    for l in range(nlayers - 1):
        u = np.empty((nb, nd, ws[l].shape[0]))
        _tangent_linear(t, ws[l], u)
        us.append(u)
        tn = np.empty_like(u)
        _tangent_act(cache[l + 1], u, tn)
        t = tn
    u = np.empty((nb, nd, ws[nlayers - 1].shape[0]))
    _tangent_linear(t, ws[nlayers - 1], u)
    return u, us


cdef void _accum_wbar_primal(const double[:, ::1] zbar, const double[:, ::1] a_prev,
                             double[:, ::1] wbar) nogil:
    cdef int b, o, i
    for b in range(zbar.shape[0]):
        for o in range(zbar.shape[1]):
            for i in range(a_prev.shape[1]):
                wbar[o, i] += zbar[b, o] * a_prev[b, i]


cdef void _accum_wbar_tangent(const double[:, :, ::1] ubar, const double[:, :, ::1] tprev,
                              double[:, ::1] wbar) nogil:
    cdef int b, k, o, i
    for b in range(ubar.shape[0]):
        for k in range(ubar.shape[1]):
            for o in range(ubar.shape[2]):
                for i in range(tprev.shape[2]):
                    wbar[o, i] += ubar[b, k, o] * tprev[b, k, i]


cdef void _back_linear(const double[:, ::1] zbar, const double[:, ::1] w,
                       double[:, ::1] out) nogil:
    # out[b, i] = sum_o zbar[b, o] w[o, i]
    cdef int b, o, i
    cdef double g
    for b in range(zbar.shape[0]):
        for i in range(w.shape[1]):
            out[b, i] = 0.0
        for o in range(w.shape[0]):
            g = 0.0
            for i in range(w.shape[1]):
                out[b, i] += zbar[b, o] * w[o, i]


cdef void _back_tangent_linear(const double[:, :, ::1] ubar, const double[:, ::1] w,
                               double[:, :, ::1] out) nogil:
    cdef int b, k, o, i
    for b in range(ubar.shape[0]):
        for k in range(ubar.shape[1]):
            for i in range(w.shape[1]):
                out[b, k, i] = 0.0
            for o in range(w.shape[0]):
                for i in range(w.shape[1]):
                    out[b, k, i] += ubar[b, k, o] * w[o, i]


cdef void _hidden_cotangents(const double[:, ::1] s, const double[:, ::1] abar,
                             const double[:, :, ::1] u, const double[:, :, ::1] tbar,
                             double[:, ::1] zbar, double[:, :, ::1] ubar) nogil:
    # zbar = sigma' abar + sum_k sigma'' u_k tbar_k ; ubar = sigma' tbar
    cdef int b, d, k
    cdef double sv, sp, spp, acc
    for b in range(s.shape[0]):
        for d in range(s.shape[1]):
            sv = s[b, d]
            sp = 1.0 - sv * sv
            acc = sp * abar[b, d]
            spp = -2.0 * sv * sp
            for k in range(u.shape[1]):
                acc += spp * u[b, k, d] * tbar[b, k, d]
                ubar[b, k, d] = sp * tbar[b, k, d]
            zbar[b, d] = acc


cdef void _hidden_cotangents_primal(const double[:, ::1] s, const double[:, ::1] abar,
                                    double[:, ::1] zbar) nogil:
    cdef int b, d
    cdef double sv
    for b in range(s.shape[0]):
        for d in range(s.shape[1]):
            sv = s[b, d]
            zbar[b, d] = (1.0 - sv * sv) * abar[b, d]


def mlp_vjp(ws, bs, cache, us, dirs, ybar, jbar):
    """Parameter gradients of sum(ybar * y) + sum(jbar * jcols), batch-summed."""
    cdef int nlayers = len(ws)
    cdef int nb = cache[0].shape[0]
    cdef bint with_tan = jbar is not None
    cdef object abar = np.ascontiguousarray(ybar, dtype=np.float64)
    cdef object tbar = None
    cdef object d0 = None
    cdef int nd = 0
    if with_tan:
        tbar = np.ascontiguousarray(jbar, dtype=np.float64)
        d0 = np.ascontiguousarray(dirs, dtype=np.float64)
        nd = tbar.shape[1]
    wbars = [None] * nlayers
    bbars = [None] * nlayers
    cdef int l
    cdef object zbar, ubar, a_prev, t_prev, wb, nxt_a, nxt_t
    for l in range(nlayers - 1, -1, -1):
        if l == nlayers - 1:
            zbar = abar
            ubar = tbar
        else:
            zbar = np.empty((nb, ws[l].shape[0]))
            if with_tan:
                ubar = np.empty((nb, nd, ws[l].shape[0]))
                _hidden_cotangents(cache[l + 1], abar, us[l], tbar, zbar, ubar)
            else:
                ubar = None
                _hidden_cotangents_primal(cache[l + 1], abar, zbar)
        a_prev = cache[l]
        wb = np.zeros((ws[l].shape[0], ws[l].shape[1]))
        _accum_wbar_primal(zbar, a_prev, wb)
        if with_tan:
            if l == 0:
                t_prev = np.ascontiguousarray(
                    np.broadcast_to(d0, (nb, nd, d0.shape[1]))
                )
            else:
                t_prev = np.empty((nb, nd, cache[l].shape[1]))
                _tangent_act(cache[l], us[l - 1], t_prev)
            _accum_wbar_tangent(ubar, t_prev, wb)
        wbars[l] = wb
        bbars[l] = np.asarray(zbar).sum(axis=0)
        if l > 0:
            nxt_a = np.empty((nb, ws[l].shape[1]))
            _back_linear(zbar, ws[l], nxt_a)
            abar = nxt_a
            if with_tan:
                nxt_t = np.empty((nb, nd, ws[l].shape[1]))
                _back_tangent_linear(ubar, ws[l], nxt_t)
                tbar = nxt_t
    return wbars, bbars


# ---------------------------------------------------------------------------
# sampled positive-definiteness hinge
# ---------------------------------------------------------------------------

def hinge_psd(c, points):
    """(vals, cbar): vals[b] = mean_k max(0, p_k^T c_b p_k) and its gradient."""
    cdef object cc = np.ascontiguousarray(c, dtype=np.float64)
    cdef object pp = np.ascontiguousarray(points, dtype=np.float64)
    cdef int nb = cc.shape[0], n = cc.shape[1], kk = pp.shape[0]
    vals = np.zeros(nb)
    cbar = np.zeros((nb, n, n))
    cdef const double[:, :, ::1] cv = cc
    cdef const double[:, ::1] pv = pp
    cdef double[::1] vv = vals
    cdef double[:, :, ::1] gv = cbar
    cdef int b, k, i, j
    cdef double q, acc
    with nogil:
        for b in range(nb):
            acc = 0.0
            for k in range(kk):
                q = 0.0
                for i in range(n):
                    for j in range(n):
                        q += pv[k, i] * cv[b, i, j] * pv[k, j]
                if q > 0.0:
                    acc += q
                    for i in range(n):
                        for j in range(n):
                            gv[b, i, j] += pv[k, i] * pv[k, j]
            vv[b] = acc / kk
            for i in range(n):
                for j in range(n):
                    gv[b, i, j] /= kk
    return vals, cbar
