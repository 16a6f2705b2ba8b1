"""Penalty losses for joint metric/controller learning.

Per sample (x, x_d, u_d, t), four terms are assembled:

* contraction:   L_PD(-C_u) with C_u = Mdot + 2 sym(M dh/dx) + 2 alpha M
  evaluated at u = u(x, x_d, u_d, t), including the controller Jacobian
  du/dx inside dh/dx;
* boundedness:   L_PD(I / m_under - W), pushing max_eig(W) <= 1 / m_under;
* weak condition 1: L_PD(-C1) with C1 the annihilator-projected metric
  contraction matrix (no controller);
* weak condition 2: sum_j |C2_j|_F, the projected input-column Killing
  residuals.

L_PD(A) = mean_k max(0, -p_k^T A p_k) over K random unit vectors, so it is
zero exactly when A is PSD along every sampled direction.  The whole scalar
loss is backpropagated to every network parameter in closed form; the
network-Jacobian dependence (through dW/dx_k and du/dx) makes this a
second-order computation, handled by the kernel backend's ``mlp_vjp``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._backend import kernels
from .netmetric import ControllerNet, MetricNet
from .numerics import RngStream, sym
from .systems import SystemModel, annihilator

_TINY = 1e-30


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    """One training point (x, x_d, u_d, t) from the compact sampling set."""

    x: np.ndarray
    x_d: np.ndarray
    u_d: np.ndarray
    t: float


class SampleBatch:
    """Column-major storage for many samples; behaves like a sequence."""

    def __init__(self, x, x_d, u_d, t):
        self.x = np.asarray(x, dtype=np.float64)
        self.x_d = np.asarray(x_d, dtype=np.float64)
        self.u_d = np.asarray(u_d, dtype=np.float64)
        self.t = np.asarray(t, dtype=np.float64)

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice) or isinstance(i, np.ndarray):
            return SampleBatch(self.x[i], self.x_d[i], self.u_d[i], self.t[i])
        return Sample(self.x[i], self.x_d[i], self.u_d[i], float(self.t[i]))

    @staticmethod
    def from_samples(samples):
        if isinstance(samples, SampleBatch):
            return samples
        return SampleBatch(
            np.stack([s.x for s in samples]),
            np.stack([s.x_d for s in samples]),
            np.stack([s.u_d for s in samples]),
            np.array([s.t for s in samples]),
        )


@dataclass
class LossReport:
    """Batch means of each loss component; total sums the enabled ones."""

    l_u: float
    l_c: float
    l_w1: float
    l_w2: float
    l_cv: float
    total: float
    n_samples: int
    per_sample: Optional[dict] = None


@dataclass
class LossGradients:
    """Parameter gradients aligned with net.params() of each network."""

    metric: list
    w1: list
    w2: list

    def as_list(self):
        return self.metric + self.w1 + self.w2


# ---------------------------------------------------------------------------
# sampled definiteness penalty
# ---------------------------------------------------------------------------

def l_pd(a, points) -> float:
    """mean_k max(0, -p_k^T a p_k): zero iff ``a`` is PSD along the points."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[0] == 0:
        return 0.0
    vals, _ = kernels.hinge_psd(-a[None], np.asarray(points, dtype=np.float64))
    return float(vals[0])


def sphere_points(n, count, rng: RngStream):
    from .numerics import sample_unit_sphere

    return sample_unit_sphere(n, count, rng)


# ---------------------------------------------------------------------------
# batched forward pass
# ---------------------------------------------------------------------------

def _system_terms(system: SystemModel, batch: SampleBatch):
    x, t = batch.x, batch.t
    fx = system.f(x, t)
    bx = system.B(x, t)
    jf = system.jac_f(x, t)
    jb = system.jac_b(x, t)
    if system.constant_b:
        bp1 = annihilator(bx[0])
        bp = np.broadcast_to(bp1, (len(batch),) + bp1.shape)
    else:
        rows = [annihilator(bx[i]) for i in range(len(batch))]
        ncols = {r.shape[0] for r in rows}
        if len(ncols) != 1:
            raise ValueError("annihilator dimension varies across the batch")
        bp = np.stack(rows)
    return fx, bx, jf, jb, bp


def _metric_forward(metric: MetricNet, x, t):
    from .netmetric import metric_inputs

    nb, n = x.shape[0], metric.n
    z, _ = metric_inputs(metric, x, t)
    yw, cache = kernels.mlp_forward(metric.net.weights, metric.net.biases, z)
    th = yw.reshape(nb, metric.r, n)
    dirs = np.eye(z.shape[1])
    jcols, us = kernels.mlp_jvp(metric.net.weights, metric.net.biases, cache, dirs)
    tk = jcols.reshape(nb, z.shape[1], metric.r, n)
    txk = tk[:, :n]  # dTheta/dx_k
    w = np.einsum("bri,brj->bij", th, th)
    idx = np.arange(n)
    w[:, idx, idx] += 1.0 / metric.m_bar
    wx = np.einsum("bkri,brj->bkij", txk, th)
    wx = wx + np.swapaxes(wx, -1, -2)
    if metric.time_input:
        tt = tk[:, n] / metric.t_scale
        wt = np.einsum("bri,brj->bij", tt, th)
        wt = wt + np.swapaxes(wt, -1, -2)
    else:
        wt = np.zeros_like(w)
    m = sym(np.linalg.inv(w))
    return {
        "z": z, "cache": cache, "us": us, "dirs": dirs,
        "th": th, "tk": tk, "w": w, "wx": wx, "wt": wt, "m": m,
    }


def _controller_forward(controller: ControllerNet, x, x_d, u_d):
    nb, n = x.shape[0], controller.n
    m, h = controller.m, controller.h
    z = np.concatenate([x, x_d], axis=1)
    y1, cache1 = kernels.mlp_forward(controller.w1_net.weights, controller.w1_net.biases, z)
    y2, cache2 = kernels.mlp_forward(controller.w2_net.weights, controller.w2_net.biases, z)
    w1 = y1.reshape(nb, h, n)
    w2 = y2.reshape(nb, m, h)
    dirs = np.eye(2 * n)[:n]  # only d/dx tangents enter the losses
    j1, us1 = kernels.mlp_jvp(controller.w1_net.weights, controller.w1_net.biases, cache1, dirs)
    j2, us2 = kernels.mlp_jvp(controller.w2_net.weights, controller.w2_net.biases, cache2, dirs)
    p1 = j1.reshape(nb, n, h, n)
    p2 = j2.reshape(nb, n, m, h)
    e = x - x_d
    v = np.einsum("bhn,bn->bh", w1, e)
    s = np.tanh(v)
    sp = 1.0 - s * s
    u = np.einsum("bmh,bh->bm", w2, s) + u_d
    g = np.einsum("bkhn,bn->bkh", p1, e) + np.swapaxes(w1, 1, 2)
    ju = np.einsum("bkmh,bh->bkm", p2, s) + np.einsum(
        "bmh,bkh->bkm", w2, sp[:, None, :] * g
    )  # ju[b, k, :] = du/dx_k
    return {
        "z": z, "cache1": cache1, "cache2": cache2, "us1": us1, "us2": us2,
        "dirs": dirs, "w1": w1, "w2": w2, "p1": p1, "p2": p2,
        "e": e, "s": s, "sp": sp, "g": g, "u": u, "ju": ju,
    }


def _assemble_matrices(system, mf, cf, fx, bx, jf, jb, bp, alpha):
    """C_u, C1, C2 and enough intermediates for the reverse pass."""
    w, wx, wt, m = mf["w"], mf["wx"], mf["wt"], mf["m"]
    u, ju = cf["u"], cf["ju"]
    xdot = fx + np.einsum("bij,bj->bi", bx, u)
    wdot = np.einsum("bkij,bk->bij", wx, xdot) + wt
    mdot = -np.einsum("bij,bjk,bkl->bil", m, wdot, m)
    a_cl = jf + np.einsum("bj,bjik->bik", u, jb) + np.einsum("bij,bkj->bik", bx, ju)
    ma = np.einsum("bij,bjk->bik", m, a_cl)
    c_u = mdot + ma + np.swapaxes(ma, -1, -2) + 2.0 * alpha * m
    x1 = (
        -wt
        - np.einsum("bkij,bk->bij", wx, fx)
        + 2.0 * sym(np.einsum("bik,bkj->bij", jf, w))
        + 2.0 * alpha * w
    )
    c1 = np.einsum("bci,bij,bdj->bcd", bp, x1, bp)
    x2 = np.einsum("bkij,bkm->bmij", wx, bx) - 2.0 * sym(
        np.einsum("bmik,bkj->bmij", jb, w)
    )
    c2 = np.einsum("bci,bmij,bdj->bmcd", bp, x2, bp)
    return {
        "xdot": xdot, "wdot": wdot, "mdot": mdot, "a_cl": a_cl,
        "c_u": c_u, "x1": x1, "c1": c1, "x2": x2, "c2": c2,
    }


# ---------------------------------------------------------------------------
# public single-sample operations
# ---------------------------------------------------------------------------

def _forward_all(metric, controller, system, batch, alpha):
    fx, bx, jf, jb, bp = _system_terms(system, batch)
    mf = _metric_forward(metric, batch.x, batch.t)
    cf = _controller_forward(controller, batch.x, batch.x_d, batch.u_d)
    mats = _assemble_matrices(system, mf, cf, fx, bx, jf, jb, bp, alpha)
    return fx, bx, jf, jb, bp, mf, cf, mats


def c_u_matrix(metric, controller, system, sample: Sample, alpha) -> np.ndarray:
    """Closed-loop contraction matrix Mdot + 2 sym(M dh/dx) + 2 alpha M."""
    batch = SampleBatch.from_samples([sample])
    *_, mats = _forward_all(metric, controller, system, batch, alpha)
    return sym(mats["c_u"][0])


def weak_ccm_matrices(metric, system, x, t, alpha):
    """(C1, [C2_j]) at one state; empty matrices when B has full row rank."""
    x = np.asarray(x, dtype=np.float64)
    bx = system.B(x, t)
    bp = annihilator(bx)
    fx = system.f(x, t)
    jf = system.jac_f(x, t)
    jb = system.jac_b(x, t)
    mf = _metric_forward(metric, x[None], np.array([t]))
    w, wx, wt = mf["w"][0], mf["wx"][0], mf["wt"][0]
    x1 = -wt - np.einsum("kij,k->ij", wx, fx) + 2.0 * sym(jf @ w) + 2.0 * alpha * w
    c1 = bp @ x1 @ bp.T
    c2 = []
    for j in range(system.m):
        x2 = np.einsum("kij,k->ij", wx, bx[:, j]) - 2.0 * sym(jb[j] @ w)
        c2.append(bp @ x2 @ bp.T)
    return sym(c1), [sym(c) for c in c2]


# ---------------------------------------------------------------------------
# empirical loss with exact parameter gradients
# ---------------------------------------------------------------------------

def cvstem_objective_value(alpha, m_bar, m_under, d_bar=0.0, g_bar=0.0,
                           l_u=0.0, eps0=0.0, alpha_d=None, alpha_g=1.0):
    """Steady-state bound value (C / (2 alpha_l)) * (m_bar / m_under).

    C = g_bar^2 (2/alpha_g + 1) + (L_u eps0 + d_bar)^2 / alpha_d and
    alpha_l = alpha - alpha_d / 2.  Constant with respect to the network
    parameters under fixed hyperparameters; reported, not differentiated.
    """
    alpha_d = alpha if alpha_d is None else alpha_d
    c = g_bar**2 * (2.0 / alpha_g + 1.0) + (l_u * eps0 + d_bar) ** 2 / alpha_d
    alpha_l = alpha - alpha_d / 2.0
    if alpha_l <= 0.0:
        return float("inf")
    return (c / (2.0 * alpha_l)) * (m_bar / m_under)


def empirical_loss(
    metric: MetricNet,
    controller: ControllerNet,
    system: SystemModel,
    batch,
    alpha: float,
    k_points: int = 32,
    rng: Optional[RngStream] = None,
    points: Optional[np.ndarray] = None,
    points_perp: Optional[np.ndarray] = None,
    with_grads: bool = True,
    include_cv: bool = False,
    margin: float = 0.0,
    keep_per_sample: bool = False,
):
    """Batch loss (and exact parameter gradients) over samples from rho(S).

    Sphere points are drawn once per call and shared across the batch; pass
    ``points`` / ``points_perp`` explicitly to freeze them (gradient tests).
    ``margin`` shifts the contraction hinge to hinge(C_u + margin I),
    training toward a strict eigenvalue margin; the reported loss keeps the
    shifted value.  Returns ``(LossReport, LossGradients | None)``.
    """
    batch = SampleBatch.from_samples(batch)
    nb = len(batch)
    if nb == 0:
        raise ValueError("empirical_loss requires a nonempty batch")
    n = system.n
    fx, bx, jf, jb, bp, mf, cf, mats = _forward_all(
        metric, controller, system, batch, alpha
    )
    ncon = bp.shape[1]

    if points is None:
        if rng is None:
            raise ValueError("need either frozen points or an RngStream")
        points = sphere_points(n, k_points, rng.child(0))
    if ncon > 0 and points_perp is None:
        if rng is None:
            raise ValueError("need either frozen points_perp or an RngStream")
        points_perp = sphere_points(ncon, k_points, rng.child(1))

    c_u = mats["c_u"]
    if margin != 0.0:
        c_u = c_u.copy()
        idx = np.arange(n)
        c_u[:, idx, idx] += margin
    hu, cu_bar = kernels.hinge_psd(c_u, points)
    w_shift = mf["w"].copy()
    idx = np.arange(n)
    w_shift[:, idx, idx] -= 1.0 / metric.m_under
    hw, w_bar_h = kernels.hinge_psd(w_shift, points)
    if ncon > 0:
        h1, c1_bar = kernels.hinge_psd(mats["c1"], points_perp)
        c2 = mats["c2"]
        fro = np.sqrt(np.einsum("bmij,bmij->bm", c2, c2))
        h2 = fro.sum(axis=1)
        c2_bar = c2 / np.maximum(fro, _TINY)[:, :, None, None]
        c2_bar[fro <= _TINY] = 0.0
    else:
        h1 = np.zeros(nb)
        h2 = np.zeros(nb)

    l_u_val = float(hu.mean())
    l_c_val = float(hw.mean())
    l_w1_val = float(h1.mean())
    l_w2_val = float(h2.mean())
    l_cv_val = (
        cvstem_objective_value(
            alpha, metric.m_bar, metric.m_under,
            d_bar=system.d_bar, g_bar=system.g_bar, l_u=system.L_u,
        )
        if include_cv
        else 0.0
    )
    total = l_u_val + l_c_val + l_w1_val + l_w2_val + l_cv_val
    report = LossReport(
        l_u=l_u_val, l_c=l_c_val, l_w1=l_w1_val, l_w2=l_w2_val,
        l_cv=l_cv_val, total=total, n_samples=nb,
        per_sample={"l_u": hu, "l_c": hw, "l_w1": h1, "l_w2": h2}
        if keep_per_sample
        else None,
    )
    if not with_grads:
        return report, None

    # ---- reverse pass (gradients of the per-sample sum; scaled by 1/nb) ----
    w, wx, m = mf["w"], mf["wx"], mf["m"]
    th, tk = mf["th"], mf["tk"]
    w1, w2, p1, p2 = cf["w1"], cf["w2"], cf["p1"], cf["p2"]
    e, s, sp, g, ju = cf["e"], cf["s"], cf["sp"], cf["g"], cf["ju"]
    wdot, a_cl, xdot = mats["wdot"], mats["a_cl"], mats["xdot"]

    cu_b = cu_bar  # symmetric by construction
    w_b = w_bar_h.copy()
    if ncon > 0:
        x1_b = np.einsum("bci,bcd,bdj->bij", bp, c1_bar, bp)
        x2_b = np.einsum("bci,bmcd,bdj->bmij", bp, c2_bar, bp)
    else:
        x1_b = None
        x2_b = None

    # C_u = Mdot + M A + A^T M + 2 alpha M
    mdot_b = cu_b
    a_b = 2.0 * np.einsum("bij,bjk->bik", m, cu_b)
    m_b = 2.0 * alpha * cu_b
    m_b += np.einsum("bij,bkj->bik", cu_b, a_cl) + np.einsum(
        "bij,bjk->bik", a_cl, cu_b
    )
    # Mdot = -M Wdot M
    wdot_b = -np.einsum("bij,bjk,bkl->bil", m, mdot_b, m)
    m_b -= np.einsum("bij,bjk,bkl->bil", mdot_b, m, wdot) + np.einsum(
        "bij,bjk,bkl->bil", wdot, m, mdot_b
    )
    # M = W^{-1}
    w_b -= np.einsum("bij,bjk,bkl->bil", m, m_b, m)
    # Wdot = sum_k Wx_k xdot_k + Wt
    wx_b = np.einsum("bij,bk->bkij", wdot_b, xdot)
    xdot_b = np.einsum("bij,bkij->bk", wdot_b, wx)
    wt_b = wdot_b.copy()
    # xdot = f + B u
    u_b = np.einsum("bij,bi->bj", bx, xdot_b)
    # A_cl = Jf + sum_j u_j Jb_j + B du/dx
    u_b += np.einsum("bik,bjik->bj", a_b, jb)
    ju_b = np.einsum("bij,bik->bkj", bx, a_b)
    # X1 = -Wt - sum_k Wx_k f_k + 2 sym(Jf W) + 2 alpha W
    if x1_b is not None:
        wt_b -= x1_b
        wx_b -= np.einsum("bij,bk->bkij", x1_b, fx)
        w_b += 2.0 * alpha * x1_b
        w_b += np.einsum("bki,bkj->bij", jf, x1_b) + np.einsum(
            "bik,bkj->bij", x1_b, jf
        )
    # X2_j = sum_k Wx_k (b_j)_k - 2 sym(Jb_j W)
    if x2_b is not None:
        wx_b += np.einsum("bmij,bkm->bkij", x2_b, bx)
        w_b -= np.einsum("bmki,bmkj->bij", jb, x2_b) + np.einsum(
            "bmik,bmkj->bij", x2_b, jb
        )

    # ---- controller chain ----
    w2_b = np.einsum("bm,bh->bmh", u_b, s)
    s_b = np.einsum("bmh,bm->bh", w2, u_b)
    p2_b = np.einsum("bkm,bh->bkmh", ju_b, s)
    s_b += np.einsum("bkmh,bkm->bh", p2, ju_b)
    q_b = np.einsum("bmh,bkm->bkh", w2, ju_b)
    w2_b += np.einsum("bkm,bkh->bmh", ju_b, sp[:, None, :] * g)
    g_b = sp[:, None, :] * q_b
    s_b += -2.0 * s * np.einsum("bkh,bkh->bh", g, q_b)
    p1_b = np.einsum("bkh,bn->bkhn", g_b, e)
    w1_b = np.swapaxes(g_b, 1, 2).copy()
    v_b = sp * s_b
    w1_b += np.einsum("bh,bn->bhn", v_b, e)

    # ---- metric chain ----
    wsym = w_b + np.swapaxes(w_b, -1, -2)
    th_b = 0.5 * np.einsum("bri,bij->brj", th, wsym + np.swapaxes(wsym, -1, -2))
    wx_sym = wx_b + np.swapaxes(wx_b, -1, -2)
    th_b += np.einsum("bkri,bkij->brj", tk[:, :n], wx_sym)
    tk_b = np.zeros_like(tk)
    tk_b[:, :n] = np.einsum("bri,bkij->bkrj", th, wx_sym)
    if metric.time_input:
        wt_sym = (wt_b + np.swapaxes(wt_b, -1, -2)) / metric.t_scale
        th_b += np.einsum("bri,bij->brj", tk[:, n], wt_sym)
        tk_b[:, n] = np.einsum("bri,bij->brj", th, wt_sym)

    nbatch = float(nb)
    ybar_w = th_b.reshape(nb, -1) / nbatch
    jbar_w = tk_b.reshape(nb, tk.shape[1], -1) / nbatch
    gw, gb = kernels.mlp_vjp(
        metric.net.weights, metric.net.biases, mf["cache"], mf["us"], mf["dirs"],
        ybar_w, jbar_w,
    )
    metric_grads = []
    for a, b in zip(gw, gb):
        metric_grads.append(a)
        metric_grads.append(b)

    ybar_1 = w1_b.reshape(nb, -1) / nbatch
    jbar_1 = p1_b.reshape(nb, n, -1) / nbatch
    g1w, g1b = kernels.mlp_vjp(
        controller.w1_net.weights, controller.w1_net.biases,
        cf["cache1"], cf["us1"], cf["dirs"], ybar_1, jbar_1,
    )
    ybar_2 = w2_b.reshape(nb, -1) / nbatch
    jbar_2 = p2_b.reshape(nb, n, -1) / nbatch
    g2w, g2b = kernels.mlp_vjp(
        controller.w2_net.weights, controller.w2_net.biases,
        cf["cache2"], cf["us2"], cf["dirs"], ybar_2, jbar_2,
    )
    w1_grads = []
    for a, b in zip(g1w, g1b):
        w1_grads.append(a)
        w1_grads.append(b)
    w2_grads = []
    for a, b in zip(g2w, g2b):
        w2_grads.append(a)
        w2_grads.append(b)

    return report, LossGradients(metric=metric_grads, w1=w1_grads, w2=w2_grads)
