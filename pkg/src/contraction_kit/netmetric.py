"""Dual-metric and controller networks.

The dual metric is W(x,t) = Theta(x,t)^T Theta(x,t) + I / m_bar with Theta
an (r x n) matrix produced by a tanh MLP, so W is positive definite with
eigenvalues >= 1/m_bar by construction.  The controller is
u(x, x_d, u_d, t) = w2(x, x_d) @ tanh(w1(x, x_d) @ (x - x_d)) + u_d with w1
and w2 matrix-valued tanh MLPs, so it reproduces u_d exactly at x = x_d.

All derivatives used by the losses (network input Jacobians and the
backpropagation of scalars that touch them) are exact, computed by the
kernel backend; finite differences appear only in tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .numerics import STREAM_IDS, RngStream, sym

CHECKPOINT_VERSION = "contraction-kit/ckpt-v1"


# ---------------------------------------------------------------------------
# MLP container
# ---------------------------------------------------------------------------

@dataclass
class Mlp:
    """tanh MLP: weights[l] is (d_out, d_in); hidden tanh, linear output."""

    weights: list
    biases: list

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def sizes(self):
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def params(self):
        """Flat list of parameter arrays, weights and biases interleaved."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(sizes, rng: RngStream) -> Mlp:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    gen = rng.generator()
    ws, bs = [], []
    for i in range(len(sizes) - 1):
        bound = 1.0 / np.sqrt(sizes[i])
        ws.append(gen.uniform(-bound, bound, (sizes[i + 1], sizes[i])))
        bs.append(np.zeros(sizes[i + 1]))
    return Mlp(ws, bs)


def mlp_eval_with_grads(net: Mlp, x):
    """Evaluate a network with its input Jacobian and a gradient closure.

    Returns ``(y, jac, grad_fn)`` for a single input ``(d_in,)``:
    ``jac[i, k] = dy_i/dx_k`` and ``grad_fn(cotangent)`` gives the exact
    per-parameter gradients of ``cotangent . y``, ordered like
    ``net.params()``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != net.in_dim:
        raise ValueError(f"expected input of shape ({net.in_dim},)")
    xb = x[None, :]
    y, cache = kernels.mlp_forward(net.weights, net.biases, xb)
    dirs = np.eye(net.in_dim)
    jcols, _ = kernels.mlp_jvp(net.weights, net.biases, cache, dirs)

    def grad_fn(ybar):
        ybar = np.asarray(ybar, dtype=np.float64).reshape(1, net.out_dim)
        wg, bg = kernels.mlp_vjp(net.weights, net.biases, cache, None, None, ybar, None)
        out = []
        for w, b in zip(wg, bg):
            out.append(w)
            out.append(b)
        return out

    return y[0], np.ascontiguousarray(jcols[0].T), grad_fn


# ---------------------------------------------------------------------------
# metric and controller containers
# ---------------------------------------------------------------------------

@dataclass
class MetricNet:
    """W(x,t) = Theta^T Theta + I/m_bar with Theta = reshape(net(x[,t]), (r, n))."""

    net: Mlp
    n: int
    r: int
    m_bar: float
    m_under: float
    time_input: bool = False
    t_scale: float = 1.0

    def params(self):
        return self.net.params()


@dataclass
class ControllerNet:
    """u = w2(x,x_d) @ tanh(w1(x,x_d) @ (x - x_d)) + u_d."""

    w1_net: Mlp  # (2n,) -> h*n entries
    w2_net: Mlp  # (2n,) -> m*h entries
    n: int
    m: int
    h: int

    def params(self):
        return self.w1_net.params() + self.w2_net.params()


def make_metric_net(n, width=64, m_bar=10.0, m_under=0.5, time_input=False, seed=0):
    in_dim = n + (1 if time_input else 0)
    net = init_mlp([in_dim, width, n * n], RngStream(seed, STREAM_IDS["init"], (0,)))
    return MetricNet(net=net, n=n, r=n, m_bar=m_bar, m_under=m_under, time_input=time_input)


def make_controller_net(n, m, width=64, h=None, seed=0):
    h = width if h is None else h
    w1 = init_mlp([2 * n, width, h * n], RngStream(seed, STREAM_IDS["init"], (1,)))
    w2 = init_mlp([2 * n, width, m * h], RngStream(seed, STREAM_IDS["init"], (2,)))
    return ControllerNet(w1_net=w1, w2_net=w2, n=n, m=m, h=h)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def metric_inputs(metric: MetricNet, x, t):
    """Network input for the metric: the state, plus normalized time if used."""
    x, squeeze = _as_batch(x)
    if not metric.time_input:
        return x, squeeze
    tcol = np.broadcast_to(
        np.asarray(t, dtype=np.float64) / metric.t_scale, (x.shape[0],)
    )
    return np.concatenate([x, tcol[:, None]], axis=1), squeeze


def eval_theta(metric: MetricNet, x, t=0.0):
    z, squeeze = metric_inputs(metric, x, t)
    y, _ = kernels.mlp_forward(metric.net.weights, metric.net.biases, z)
    th = y.reshape(-1, metric.r, metric.n)
    return th[0] if squeeze else th


def eval_W(metric: MetricNet, x, t=0.0):
    """Dual metric W(x,t); symmetric with eigenvalues >= 1/m_bar."""
    th = eval_theta(metric, x, t)
    w = np.einsum("...ki,...kj->...ij", th, th)
    idx = np.arange(metric.n)
    w[..., idx, idx] += 1.0 / metric.m_bar
    return w


def eval_M(metric: MetricNet, x, t=0.0):
    """Contraction metric M = W^{-1} (uniformly well conditioned)."""
    return sym(np.linalg.inv(eval_W(metric, x, t)))


def eval_u(controller: ControllerNet, x, x_d, u_d, t=0.0):
    """Controller output u(x, x_d, u_d, t); equals u_d exactly at x = x_d."""
    x, squeeze = _as_batch(x)
    x_d = np.broadcast_to(np.asarray(x_d, dtype=np.float64), x.shape)
    u_d = np.asarray(u_d, dtype=np.float64)
    u_d = np.broadcast_to(u_d, (x.shape[0], controller.m))
    z = np.concatenate([x, x_d], axis=1)
    w1f, _ = kernels.mlp_forward(controller.w1_net.weights, controller.w1_net.biases, z)
    w2f, _ = kernels.mlp_forward(controller.w2_net.weights, controller.w2_net.biases, z)
    w1 = w1f.reshape(-1, controller.h, controller.n)
    w2 = w2f.reshape(-1, controller.m, controller.h)
    s = np.tanh(np.einsum("bhn,bn->bh", w1, x - x_d))
    u = np.einsum("bmh,bh->bm", w2, s) + u_d
    return u[0] if squeeze else u


def metric_time_and_flow_derivatives(metric: MetricNet, system, x, u, t=0.0):
    """(dW/dt, flow derivative of W, dM/dt along the flow) at one point.

    The flow derivative is sum_k (dW/dx_k) xdot_k with xdot = f + B u; the
    metric derivative along the flow is -M (dW/dt + flow_dW) M.  Network
    derivatives are exact (one tangent pass per coordinate).
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    n = metric.n
    z, _ = metric_inputs(metric, x, t)
    yw, cache = kernels.mlp_forward(metric.net.weights, metric.net.biases, z)
    th = yw.reshape(n, n) if metric.r == n else yw.reshape(metric.r, n)
    dirs = np.eye(z.shape[1])
    jcols, _ = kernels.mlp_jvp(metric.net.weights, metric.net.biases, cache, dirs)
    tk = jcols[0].reshape(z.shape[1], metric.r, n)  # dTheta/dz_k
    dw_dx = np.einsum("kri,rj->kij", tk[:n], th) + np.einsum(
        "ri,krj->kij", th, tk[:n]
    )
    if metric.time_input:
        dw_dt = (tk[n].T @ th + th.T @ tk[n]) / metric.t_scale
    else:
        dw_dt = np.zeros((n, n))
    xdot = system.h(x, u, t)
    flow_dw = np.einsum("kij,k->ij", dw_dx, xdot)
    w = th.T @ th + np.eye(n) / metric.m_bar
    m = np.linalg.inv(w)
    dm_dt = -m @ (dw_dt + flow_dw) @ m
    return dw_dt, flow_dw, sym(dm_dt)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _mlp_to_dict(net: Mlp):
    return {
        "sizes": net.sizes,
        "weights": [w.ravel().tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def _mlp_from_dict(d) -> Mlp:
    sizes = d["sizes"]
    ws = [
        np.array(flat, dtype=np.float64).reshape(sizes[i + 1], sizes[i])
        for i, flat in enumerate(d["weights"])
    ]
    bs = [np.array(b, dtype=np.float64) for b in d["biases"]]
    return Mlp(ws, bs)


def save_checkpoint(path, metric: MetricNet, controller: ControllerNet, alpha, seed, extra=None):
    doc = {
        "version": CHECKPOINT_VERSION,
        "alpha": float(alpha),
        "seed": int(seed),
        "metric": {
            "net": _mlp_to_dict(metric.net),
            "n": metric.n,
            "r": metric.r,
            "m_bar": metric.m_bar,
            "m_under": metric.m_under,
            "time_input": metric.time_input,
            "t_scale": metric.t_scale,
        },
        "controller": {
            "w1_net": _mlp_to_dict(controller.w1_net),
            "w2_net": _mlp_to_dict(controller.w2_net),
            "n": controller.n,
            "m": controller.m,
            "h": controller.h,
        },
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {doc.get('version')!r}")
    md = doc["metric"]
    metric = MetricNet(
        net=_mlp_from_dict(md["net"]),
        n=md["n"],
        r=md["r"],
        m_bar=md["m_bar"],
        m_under=md["m_under"],
        time_input=md["time_input"],
        t_scale=md["t_scale"],
    )
    cd = doc["controller"]
    controller = ControllerNet(
        w1_net=_mlp_from_dict(cd["w1_net"]),
        w2_net=_mlp_from_dict(cd["w2_net"]),
        n=cd["n"],
        m=cd["m"],
        h=cd["h"],
    )
    return metric, controller, doc
