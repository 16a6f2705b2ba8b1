"""Benchmark control-affine systems: dynamics, Jacobians, annihilators,
disturbance bounds, and sinusoidal target-trajectory generation.

Evaluation convention: ``f(x, t)``, ``B(x, t)``, ``jac_f(x, t)`` and
``jac_b(x, t)`` accept a single state ``(n,)`` or a batch ``(N, n)`` and
return correspondingly shaped arrays (``jac_b`` stacks the per-input-column
Jacobians as ``(..., m, n, n)``).  ``t`` is a float or an ``(N,)`` array.
All registered systems are immutable and their closures are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .numerics import RngStream, eig_sym, integrate_ode

GRAVITY = 9.81


class TargetBoxError(RuntimeError):
    """Raised when target resampling keeps leaving the state box."""


@dataclass(frozen=True)
class SystemModel:
    """Control-affine system dx = (f + B u) dt + d dt + G dW with metadata."""

    name: str
    n: int
    m: int
    f: Callable
    B: Callable
    jac_f: Callable
    jac_b: Callable
    state_box: np.ndarray  # (2, n) rows: lower, upper
    input_box: np.ndarray  # (2, m)
    time_box: tuple = (0.0, 10.0)
    d_bar: float = 0.0
    g_bar: float = 0.0
    b_bar: float = 0.0  # sup of ||B(x,t)|| over the boxes
    L_u: float = 0.0  # input-Lipschitz constant of h; equals b_bar here
    constant_b: bool = False
    u_trim: np.ndarray = None  # steady input added to target sinusoids
    target_x0_box: np.ndarray = None  # (2, n) initial set for targets
    error_box: np.ndarray = None  # (2, n) initial tracking-error set
    target_amplitude: np.ndarray = None  # per-channel sinusoid weight scale

    def h(self, x, u, t):
        """Nominal dynamics f(x,t) + B(x,t) u."""
        return self.f(x, t) + np.einsum(
            "...ij,...j->...i", self.B(x, t), np.asarray(u, dtype=np.float64)
        )


# frequencies (Hz) of the target input sinusoids; weights and phases are drawn
TARGET_FREQS = np.array([0.1, 0.2, 0.4, 0.8])


@dataclass(frozen=True)
class TargetTrajectory:
    """A target rollout xdot_d = f + B u_d plus the closure that made u_d."""

    ts: np.ndarray
    xs: np.ndarray
    us: np.ndarray
    seed: int
    weights: np.ndarray  # (m, n_freq)
    phases: np.ndarray  # (m, n_freq)
    u_trim: np.ndarray

    def u_fn(self, t):
        """Target input at arbitrary times (scalar t or any array shape)."""
        t = np.asarray(t, dtype=np.float64)
        arg = 2.0 * np.pi * TARGET_FREQS * t[..., None, None] + self.phases
        return self.u_trim + (self.weights * np.sin(arg)).sum(axis=-1)


def _estimate_b_bar(B, state_box, time_box, n_samples=512, seed=1234):
    gen = np.random.default_rng(seed)
    lo, hi = state_box
    xs = lo + (hi - lo) * gen.random((n_samples, len(lo)))
    ts = time_box[0] + (time_box[1] - time_box[0]) * gen.random(n_samples)
    bmats = B(xs, ts)
    # 2-norm via the Gram matrix; m is tiny everywhere in this package
    grams = np.einsum("...ki,...kj->...ij", bmats, bmats)
    top = 0.0
    for g in grams:
        top = max(top, float(eig_sym(g)[0][-1]))
    return float(np.sqrt(top))


def _finalize(model: SystemModel) -> SystemModel:
    b_bar = _estimate_b_bar(model.B, model.state_box, model.time_box)
    defaults = {}
    if model.u_trim is None:
        defaults["u_trim"] = np.zeros(model.m)
    if model.target_x0_box is None:
        lo, hi = model.state_box
        mid, half = 0.5 * (lo + hi), 0.25 * (hi - lo)
        defaults["target_x0_box"] = np.stack([mid - half, mid + half])
    if model.error_box is None:
        lo, hi = model.state_box
        half = 0.1 * (hi - lo)
        defaults["error_box"] = np.stack([-half, half])
    if model.target_amplitude is None:
        defaults["target_amplitude"] = np.ones(model.m)
    return replace(model, b_bar=b_bar, L_u=b_bar, **defaults)


# ---------------------------------------------------------------------------
# PVTOL
# ---------------------------------------------------------------------------

PVTOL_MASS = 0.486
PVTOL_INERTIA = 0.00383


def make_pvtol(d_bar=0.5, g_bar=0.1) -> SystemModel:
    """Planar VTOL vehicle, 6 states, 2 inputs.

    State (p_x, p_z, phi, v_x, v_z, phidot) with body-frame velocities;
    inputs are total thrust u1 and differential thrust u2:

        p_x'   = v_x cos(phi) - v_z sin(phi)
        p_z'   = v_x sin(phi) + v_z cos(phi)
        phi'   = phidot
        v_x'   = v_z phidot - g sin(phi)
        v_z'   = -v_x phidot - g cos(phi) + u1 / mass
        phidot'= u2 / inertia
    """
    g, mv, jv = GRAVITY, PVTOL_MASS, PVTOL_INERTIA
    n, m = 6, 2

    def f(x, t):
        x = np.asarray(x, dtype=np.float64)
        phi, vx, vz, om = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
        c, s = np.cos(phi), np.sin(phi)
        out = np.empty_like(x)
        out[..., 0] = vx * c - vz * s
        out[..., 1] = vx * s + vz * c
        out[..., 2] = om
        out[..., 3] = vz * om - g * s
        out[..., 4] = -vx * om - g * c
        out[..., 5] = 0.0
        return out

    bmat = np.zeros((n, m))
    bmat[4, 0] = 1.0 / mv
    bmat[5, 1] = 1.0 / jv

    def B(x, t):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(bmat, x.shape[:-1] + (n, m)).copy()

    def jac_f(x, t):
        x = np.asarray(x, dtype=np.float64)
        phi, vx, vz, om = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
        c, s = np.cos(phi), np.sin(phi)
        jf = np.zeros(x.shape[:-1] + (n, n))
        jf[..., 0, 2] = -vx * s - vz * c
        jf[..., 0, 3] = c
        jf[..., 0, 4] = -s
        jf[..., 1, 2] = vx * c - vz * s
        jf[..., 1, 3] = s
        jf[..., 1, 4] = c
        jf[..., 2, 5] = 1.0
        jf[..., 3, 2] = -g * c
        jf[..., 3, 4] = om
        jf[..., 3, 5] = vz
        jf[..., 4, 2] = g * s
        jf[..., 4, 3] = -om
        jf[..., 4, 5] = -vx
        return jf

    def jac_b(x, t):
        x = np.asarray(x, dtype=np.float64)
        return np.zeros(x.shape[:-1] + (m, n, n))

    state_box = np.array(
        [
            [-4.0, -4.0, -1.0, -2.0, -2.0, -2.0],
            [4.0, 4.0, 1.0, 2.0, 2.0, 2.0],
        ]
    )
    trim = mv * g
    input_box = np.array([[trim - 2.0, -0.08], [trim + 2.0, 0.08]])
    target_x0_box = np.array(
        [
            [-1.0, -1.0, -0.05, -0.3, -0.3, -0.05],
            [1.0, 1.0, 0.05, 0.3, 0.3, 0.05],
        ]
    )
    error_box = np.array(
        [
            [-0.5, -0.5, -0.1, -0.3, -0.3, -0.1],
            [0.5, 0.5, 0.1, 0.3, 0.3, 0.1],
        ]
    )
    # sinusoid weight scales sized so the open-loop response (phi and the
    # body velocities integrate 1/J and 1/m gains) stays inside the box
    return _finalize(
        SystemModel(
            name="pvtol",
            n=n,
            m=m,
            f=f,
            B=B,
            jac_f=jac_f,
            jac_b=jac_b,
            state_box=state_box,
            input_box=input_box,
            d_bar=d_bar,
            g_bar=g_bar,
            constant_b=True,
            u_trim=np.array([trim, 0.0]),
            target_x0_box=target_x0_box,
            error_box=error_box,
            target_amplitude=np.array([0.1, 1e-4]),
        )
    )


# ---------------------------------------------------------------------------
# analytic test systems
# ---------------------------------------------------------------------------

def make_scalar_test(a: float, d_bar=0.0, g_bar=0.0) -> SystemModel:
    """Hand-checkable system xdot = a x + u."""

    def f(x, t):
        return a * np.asarray(x, dtype=np.float64)

    def B(x, t):
        x = np.asarray(x, dtype=np.float64)
        return np.ones(x.shape[:-1] + (1, 1))

    def jac_f(x, t):
        x = np.asarray(x, dtype=np.float64)
        return np.full(x.shape[:-1] + (1, 1), a)

    def jac_b(x, t):
        x = np.asarray(x, dtype=np.float64)
        return np.zeros(x.shape[:-1] + (1, 1, 1))

    return _finalize(
        SystemModel(
            name="scalar",
            n=1,
            m=1,
            f=f,
            B=B,
            jac_f=jac_f,
            jac_b=jac_b,
            state_box=np.array([[-2.0], [2.0]]),
            input_box=np.array([[-4.0], [4.0]]),
            d_bar=d_bar,
            g_bar=g_bar,
            constant_b=True,
        )
    )


def make_lti(a_mat=None, b_mat=None, d_bar=0.0, g_bar=0.0, name="lti") -> SystemModel:
    """LTI system xdot = A x + B u (default: double integrator)."""
    a_mat = np.array([[0.0, 1.0], [0.0, 0.0]]) if a_mat is None else np.asarray(
        a_mat, dtype=np.float64
    )
    b_mat = np.array([[0.0], [1.0]]) if b_mat is None else np.asarray(
        b_mat, dtype=np.float64
    )
    n, m = b_mat.shape

    def f(x, t):
        return np.asarray(x, dtype=np.float64) @ a_mat.T

    def B(x, t):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(b_mat, x.shape[:-1] + (n, m)).copy()

    def jac_f(x, t):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(a_mat, x.shape[:-1] + (n, n)).copy()

    def jac_b(x, t):
        x = np.asarray(x, dtype=np.float64)
        return np.zeros(x.shape[:-1] + (m, n, n))

    box = np.stack([-2.0 * np.ones(n), 2.0 * np.ones(n)])
    return _finalize(
        SystemModel(
            name=name,
            n=n,
            m=m,
            f=f,
            B=B,
            jac_f=jac_f,
            jac_b=jac_b,
            state_box=box,
            input_box=np.stack([-4.0 * np.ones(m), 4.0 * np.ones(m)]),
            d_bar=d_bar,
            g_bar=g_bar,
            constant_b=True,
        )
    )


SYSTEM_FACTORIES = {
    "pvtol": make_pvtol,
    "scalar": lambda **kw: make_scalar_test(kw.pop("a", -1.0), **kw),
    "lti": make_lti,
}


def get_system(name: str, **kwargs) -> SystemModel:
    """Construct a registered system by config name."""
    try:
        factory = SYSTEM_FACTORIES[name]
    except KeyError:
        raise KeyError(
            f"unknown system {name!r}; registered: {sorted(SYSTEM_FACTORIES)}"
        ) from None
    return factory(**kwargs)


# ---------------------------------------------------------------------------
# annihilator and directional derivatives
# ---------------------------------------------------------------------------

def annihilator(b_mat, rank_tol=1e-12):
    """Orthonormal rows spanning the left null space of ``b_mat``.

    Returns a ((n - rank), n) matrix ``bp`` with ``bp @ b_mat == 0`` (to
    machine precision after an explicit re-projection pass) and
    ``bp @ bp.T == I``.  Full-row-rank inputs give a 0-row result.
    """
    b = np.atleast_2d(np.asarray(b_mat, dtype=np.float64))
    n = b.shape[0]
    w, v = eig_sym(b @ b.T)
    cut = rank_tol * max(w[-1], 1e-30)
    null_cols = v[:, w <= cut]
    range_cols = v[:, w > cut]
    # two modified Gram-Schmidt passes against the range make bp @ b ~ eps
    q = range_cols
    for _ in range(2):
        null_cols = null_cols - q @ (q.T @ null_cols)
        for j in range(null_cols.shape[1]):
            for i in range(j):
                null_cols[:, j] -= null_cols[:, i].dot(null_cols[:, j]) * null_cols[:, i]
            null_cols[:, j] /= np.linalg.norm(null_cols[:, j])
    return np.ascontiguousarray(null_cols.T)


def directional_matrix_derivative(matrix_field, p, x, t, analytic=None, step=1e-5):
    """Directional derivative sum_k (dF/dx_k) p_k of a matrix field at (x, t).

    Central finite differences with step ``1e-5 * (1 + |x|)`` along ``p``,
    unless an analytic closure ``analytic(p, x, t)`` is supplied.
    """
    if analytic is not None:
        return np.asarray(analytic(p, x, t), dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    h = step * (1.0 + np.linalg.norm(x))
    out = (
        np.asarray(matrix_field(x + h * p, t), dtype=np.float64)
        - np.asarray(matrix_field(x - h * p, t), dtype=np.float64)
    ) / (2.0 * h)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite directional derivative")
    return out


# ---------------------------------------------------------------------------
# target trajectories
# ---------------------------------------------------------------------------

def generate_target(
    system: SystemModel,
    horizon: float,
    seed: int,
    dt: float = 1e-3,
    max_retries: int = 20,
    amplitude=None,
) -> TargetTrajectory:
    """Sample a sinusoidal target input and integrate the target trajectory.

    Per input channel, u_d(t) = u_trim + sum_k w_k sin(2 pi f_k t + phi_k)
    over the fixed frequency set, with weights uniform in +-amplitude and
    phases uniform in [0, 2 pi).  x_d(0) is uniform in the system's target
    box.  Draws are retried (fresh weights and initial state) until the
    whole trajectory stays inside the state box; exhausting the retry
    budget raises :class:`TargetBoxError`.
    """
    from .numerics import STREAM_IDS

    gen = RngStream(seed, STREAM_IDS["targets"]).generator()
    amp = system.target_amplitude if amplitude is None else np.asarray(amplitude)
    lo, hi = system.state_box
    nf = len(TARGET_FREQS)
    for _ in range(max_retries):
        weights = amp[:, None] * gen.uniform(-1.0, 1.0, (system.m, nf))
        phases = gen.uniform(0.0, 2.0 * np.pi, (system.m, nf))
        x0 = gen.uniform(system.target_x0_box[0], system.target_x0_box[1])
        traj = TargetTrajectory(
            ts=None,
            xs=None,
            us=None,
            seed=seed,
            weights=weights,
            phases=phases,
            u_trim=system.u_trim,
        )
        rhs = lambda x, t: system.h(x, traj.u_fn(t), t)  # noqa: E731
        ts, xs = integrate_ode(rhs, x0, 0.0, horizon, dt)
        if np.all(xs >= lo) and np.all(xs <= hi):
            return TargetTrajectory(
                ts=ts,
                xs=xs,
                us=traj.u_fn(ts),
                seed=seed,
                weights=weights,
                phases=phases,
                u_trim=system.u_trim,
            )
    raise TargetBoxError(
        f"target left the state box for {max_retries} consecutive draws"
    )


def sample_initial_error(system: SystemModel, rng: RngStream, count=1):
    """Uniform draws e(0) from the system's initial-error box."""
    gen = rng.generator()
    e = gen.uniform(system.error_box[0], system.error_box[1], (count, system.n))
    return e[0] if count == 1 else e
