"""Measure bound constants, build tracking-error envelopes, and verify
simulated closed loops against them.

Deterministic envelope (no diffusion):

    |x - x_d|(t) <= (V(0)/sqrt(m_under)) e^{-alpha_l t}
                    + ((L_u eps0 + d_bar)/alpha_l) sqrt(chi) (1 - e^{-alpha_l t})

with chi = m_over/m_under and alpha_l = alpha - L_u eps1 sqrt(chi).

Stochastic mean-square envelope:

    E|x - x_d|^2(t) <= (C/(2 alpha_l)) chi + E[V_s(0)] e^{-2 alpha_l t} / m_under

with C = g_bar^2 (2/alpha_G + 1) + (L_u eps0 + d_bar)^2 / alpha_d and
alpha_l = alpha - (alpha_d/2 + L_u eps1 sqrt(chi)).

Initial path energies V(0) and V_s(0) are trapezoid integrals of
sqrt(e^T M e) and e^T M e along the straight line from x_d(0) to x(0); the
straight line overestimates the geodesic, and the certificate JSON flags
this approximation.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .losses import SampleBatch, c_u_matrix
from .netmetric import ControllerNet, MetricNet, eval_M, eval_u
from .numerics import RngStream, eig_sym, max_eig_sym
from .systems import SystemModel, TargetTrajectory, generate_target

_ENV_ABS_TOL = 1e-9


@dataclass
class BoundConstants:
    m_under: float
    m_over: float
    alpha: float
    alpha_ell: float
    alpha_d: float
    alpha_g: float
    L_u: float
    L_m: float
    eps0: float
    eps1: float
    d_bar: float
    g_bar: float
    C: float
    mode: str  # "deterministic" | "stochastic"

    @property
    def chi(self) -> float:
        return self.m_over / self.m_under

    @property
    def valid(self) -> bool:
        return self.alpha_ell > 0.0


@dataclass
class CertificateReport:
    constants: BoundConstants
    mode: str
    tolerance: float
    passes: list
    max_violation: float
    contraction_margin: float  # max over grid of max_eig(C_u)
    contraction_fraction: float  # fraction of grid points with max_eig < 0
    ts: np.ndarray
    errors: np.ndarray  # (P, T) tracking errors, or (T,) ensemble mean square
    envelopes: np.ndarray  # matching shape
    normalized: np.ndarray  # x_e curves (P, T)
    stderr: Optional[np.ndarray] = None  # stochastic mode only
    notes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(all(self.passes))


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------

def state_lattice(system: SystemModel, points_per_dim=5, cap=100_000):
    """Uniform lattice over the state box, truncated at ``cap`` points."""
    axes = [
        np.linspace(system.state_box[0][i], system.state_box[1][i], points_per_dim)
        for i in range(system.n)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return pts[:cap]


def _metric_eval(metric_source, x, t=0.0):
    """M at a batch of states for any supported metric source."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if isinstance(metric_source, MetricNet):
        return eval_M(metric_source, x, t)
    from .cvstem import CvstemSolution

    if isinstance(metric_source, CvstemSolution):
        mconst = metric_source.metric
    elif isinstance(metric_source, np.ndarray):
        mconst = np.asarray(metric_source, dtype=np.float64)
    else:
        return np.stack([np.asarray(metric_source(xi, t)) for xi in x])
    return np.broadcast_to(mconst, (x.shape[0],) + mconst.shape)


def _metric_dx(metric_source, x, t=0.0):
    """dM/dx_k at a batch of states, (B, n, n, n); zero for constant sources."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    nb, n = x.shape
    if not isinstance(metric_source, MetricNet):
        return np.zeros((nb, n, n, n))
    from .losses import _metric_forward

    mf = _metric_forward(metric_source, x, np.full(nb, float(t)))
    m, wx = mf["m"], mf["wx"]
    return -np.einsum("bij,bkjl,blp->bkip", m, wx, m)


def estimate_constants(
    metric_source,
    controller,
    system: SystemModel,
    grid,
    alpha,
    reference_controller=None,
    mode="deterministic",
    alpha_d=None,
    alpha_g=1.0,
    metric_error=None,
    r_weight=None,
    rng: Optional[RngStream] = None,
    n_quotient_pairs=200,
) -> BoundConstants:
    """Measure every constant of the tracking-error bounds on a grid.

    m_under/m_over are extreme metric eigenvalues over the grid.  L_u is the
    largest input-to-dynamics gain |B(x)| over the grid (the exact supremum
    of the Lipschitz quotient for control-affine dynamics).  L_m is a
    sampled Lipschitz quotient of dM/dx_i between grid-point pairs.

    Learning errors: with a ``reference_controller``, (eps0, eps1) come from
    a nonnegativity-clipped least-squares fit of |u - u_ref| against the
    straight-line path length |x - x_d|; with ``metric_error`` given (or a
    reference metric in ``metric_error``), eps0 = 0 and
    eps1 = rho_bar * b_bar^2 * eps_metric.  Constants are always returned,
    even when alpha_ell <= 0 (the certificate is then refused downstream).
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    t0 = system.time_box[0]
    alpha_d = alpha if alpha_d is None else alpha_d

    mgrid = _metric_eval(metric_source, grid, t0)
    eigs = np.stack([eig_sym(mi)[0] for mi in mgrid])
    m_under = float(eigs[:, 0].min())
    m_over = float(eigs[:, -1].max())

    bmats = system.B(grid, t0)
    b_norms = [np.sqrt(max(eig_sym(b.T @ b)[0][-1], 0.0)) for b in bmats]
    l_u = float(max(b_norms))
    b_bar = l_u
    r_inv = np.eye(system.m) if r_weight is None else np.linalg.inv(r_weight)
    rho_bar = float(np.sqrt(max(eig_sym(r_inv.T @ r_inv)[0][-1], 0.0)))

    # Lipschitz constant of dM/dx_i via sampled quotients between pairs
    l_m = 0.0
    if isinstance(metric_source, MetricNet):
        gen = (rng or RngStream(0, 0)).generator()
        idx = gen.integers(0, len(grid), size=(n_quotient_pairs, 2))
        keep = idx[:, 0] != idx[:, 1]
        a_pts, b_pts = grid[idx[keep, 0]], grid[idx[keep, 1]]
        dma = _metric_dx(metric_source, a_pts, t0)
        dmb = _metric_dx(metric_source, b_pts, t0)
        gaps = np.linalg.norm(a_pts - b_pts, axis=1)
        for i in range(len(gaps)):
            diff = dma[i] - dmb[i]
            for k in range(system.n):
                q = max_eig_sym(diff[k] @ diff[k].T) ** 0.5 / gaps[i]
                l_m = max(l_m, float(q))

    eps0, eps1 = 0.0, 0.0
    if reference_controller is not None and controller is not None:
        gen = (rng or RngStream(0, 0)).child(7).generator()
        q = min(len(grid), 400)
        pick = gen.permutation(len(grid))[:q]
        xs = grid[pick]
        xds = grid[gen.permutation(len(grid))[:q]]
        uds = gen.uniform(system.input_box[0], system.input_box[1], (q, system.m))
        ul = _control_eval(controller, xs, xds, uds, t0)
        ur = _control_eval(reference_controller, xs, xds, uds, t0)
        y = np.linalg.norm(ul - ur, axis=1)
        ell = np.linalg.norm(xs - xds, axis=1)
        design = np.stack([np.ones_like(ell), ell], axis=1)
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        eps0 = float(max(coef[0], 0.0))
        eps1 = float(max(coef[1], 0.0))
    elif metric_error is not None:
        if np.ndim(metric_error) == 0:
            eps_m = float(metric_error)
        else:  # a reference metric source: measure sup |M_L - M_ref|
            ref = _metric_eval(metric_error, grid, t0)
            eps_m = max(
                float(np.sqrt(max(eig_sym(d @ d.T)[0][-1], 0.0)))
                for d in (mgrid - ref)
            )
        eps0 = 0.0
        eps1 = rho_bar * b_bar**2 * eps_m

    chi = m_over / m_under
    if mode == "stochastic":
        alpha_ell = alpha - (alpha_d / 2.0 + l_u * eps1 * np.sqrt(chi))
    else:
        alpha_ell = alpha - l_u * eps1 * np.sqrt(chi)
    c_const = system.g_bar**2 * (2.0 / alpha_g + 1.0) + (
        l_u * eps0 + system.d_bar
    ) ** 2 / alpha_d
    return BoundConstants(
        m_under=m_under,
        m_over=m_over,
        alpha=float(alpha),
        alpha_ell=float(alpha_ell),
        alpha_d=float(alpha_d),
        alpha_g=float(alpha_g),
        L_u=l_u,
        L_m=l_m,
        eps0=eps0,
        eps1=eps1,
        d_bar=system.d_bar,
        g_bar=system.g_bar,
        C=float(c_const),
        mode=mode,
    )


def theorem5_eps1(rho_bar, b_bar, eps_metric):
    """Metric-error-to-control-error conversion: eps1 = rho_bar b_bar^2 eps."""
    return rho_bar * b_bar**2 * eps_metric


# ---------------------------------------------------------------------------
# envelopes
# ---------------------------------------------------------------------------

def bound_envelope_det(constants: BoundConstants, v_ell_0: float) -> Callable:
    """Deterministic tracking-error envelope as a function of time."""
    if constants.alpha_ell <= 0.0:
        raise ValueError("alpha_ell <= 0: no certificate")
    ru = np.sqrt(constants.m_under)
    chi_rt = np.sqrt(constants.chi)
    drive = (constants.L_u * constants.eps0 + constants.d_bar) / constants.alpha_ell

    def envelope(t):
        t = np.asarray(t, dtype=np.float64)
        decay = np.exp(-constants.alpha_ell * t)
        return (v_ell_0 / ru) * decay + drive * chi_rt * (1.0 - decay)

    return envelope


def bound_envelope_stoch(constants: BoundConstants, v_sl_0_mean: float) -> Callable:
    """Mean-square tracking-error envelope as a function of time."""
    if constants.alpha_ell <= 0.0:
        raise ValueError("alpha_ell <= 0: no certificate")
    asym = (constants.C / (2.0 * constants.alpha_ell)) * constants.chi

    def envelope(t):
        t = np.asarray(t, dtype=np.float64)
        return asym + (v_sl_0_mean / constants.m_under) * np.exp(
            -2.0 * constants.alpha_ell * t
        )

    return envelope


def path_energies(metric_source, x, x_d, t=0.0, n_segments=16):
    """(V(0), V_s(0)) on the straight line x_d -> x by trapezoid quadrature."""
    x = np.asarray(x, dtype=np.float64)
    x_d = np.asarray(x_d, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    x_d = np.atleast_2d(x_d)
    e = x - x_d
    svals = np.linspace(0.0, 1.0, n_segments + 1)
    quad = np.zeros((2, x.shape[0]))
    prev = None
    for s in svals:
        q = x_d + s * e
        m = _metric_eval(metric_source, q, t)
        val = np.einsum("bi,bij,bj->b", e, m, e)
        cur = np.stack([np.sqrt(np.maximum(val, 0.0)), val])
        if prev is not None:
            quad += 0.5 * (prev + cur) / n_segments
        prev = cur
    return (quad[0][0], quad[1][0]) if squeeze else (quad[0], quad[1])


# ---------------------------------------------------------------------------
# closed-loop rollouts
# ---------------------------------------------------------------------------

def _control_eval(controller, x, x_d, u_d, t):
    if isinstance(controller, ControllerNet):
        return eval_u(controller, x, x_d, u_d, t)
    return np.asarray(controller(x, x_d, u_d, t), dtype=np.float64)


def _target_input_fn(targets):
    """Batched u_d(t) closure over a list of targets (stacked once)."""
    w = np.stack([tr.weights for tr in targets])  # (P, m, F)
    ph = np.stack([tr.phases for tr in targets])
    trim = targets[0].u_trim
    from .systems import TARGET_FREQS

    omega = 2.0 * np.pi * TARGET_FREQS

    def ud(t):
        return trim + (w * np.sin(omega * t + ph)).sum(axis=-1)

    return ud


def _worst_case_disturbance(system, e):
    """d = d_bar * e/|e| (worst radial direction), fixed direction at e = 0."""
    norms = np.linalg.norm(e, axis=-1, keepdims=True)
    unit = np.where(norms > 1e-12, e / np.maximum(norms, 1e-12), 0.0)
    fallback = np.zeros_like(e)
    fallback[..., 0] = 1.0
    unit = np.where(norms > 1e-12, unit, fallback)
    return system.d_bar * unit


def rollout_closed_loop(
    system: SystemModel,
    controller,
    targets,
    x0,
    horizon,
    dt,
    mode="deterministic",
    rng: Optional[RngStream] = None,
    disturbance=True,
):
    """Joint RK4 (or Euler-Maruyama) rollout of P closed loops and targets.

    The target state is re-integrated jointly with the plant so both see the
    same substeps.  Returns ``(ts, xs, xds)`` with shapes (T,), (T, P, n).
    """
    from .numerics import integrate_ode, integrate_sde

    n = system.n
    p = len(targets)
    xd0 = np.stack([tr.xs[0] for tr in targets])
    z0 = np.concatenate([np.atleast_2d(x0), xd0], axis=1)
    ud_fn = _target_input_fn(targets)

    def drift(z, t):
        x, xd = z[:, :n], z[:, n:]
        ud = ud_fn(t)
        u = _control_eval(controller, x, xd, ud, t)
        dx = system.f(x, t) + np.einsum("bij,bj->bi", system.B(x, t), u)
        if disturbance and system.d_bar > 0.0:
            dx = dx + _worst_case_disturbance(system, x - xd)
        dxd = system.f(xd, t) + np.einsum("bij,bj->bi", system.B(xd, t), ud)
        return np.concatenate([dx, dxd], axis=1)

    if mode == "deterministic":
        ts, zs = integrate_ode(drift, z0, 0.0, horizon, dt)
    else:
        gmat = np.zeros((2 * n, n))
        gmat[:n, :n] = (system.g_bar / np.sqrt(n)) * np.eye(n)

        def diffusion(z, t):
            return np.broadcast_to(gmat, (p, 2 * n, n))

        if rng is None:
            raise ValueError("stochastic rollout needs an RngStream")
        ts, zs = integrate_sde(drift, diffusion, z0, 0.0, horizon, dt, rng, n_noise=n)
    return ts, zs[:, :, :n], zs[:, :, n:]


def contraction_margins(metric, controller, system, samples: SampleBatch, alpha):
    """max_eig(C_u) at every certification sample."""
    out = np.empty(len(samples))
    for i in range(len(samples)):
        out[i] = max_eig_sym(c_u_matrix(metric, controller, system, samples[i], alpha))
    return out


def verify_tracking(
    metric_source,
    controller,
    system: SystemModel,
    constants: BoundConstants,
    n_traj: int,
    mode: str,
    rng: RngStream,
    horizon: float = 5.0,
    dt: float = 1e-3,
    tolerance: float = 0.05,
    n_targets: Optional[int] = None,
    margin_samples: Optional[SampleBatch] = None,
    alpha_for_margin: Optional[float] = None,
    disturbance: bool = True,
    path_segments: int = 16,
) -> CertificateReport:
    """Roll out perturbed closed loops and check them against the envelopes.

    Deterministic mode: one target per trajectory, worst-radial-direction
    disturbance of size d_bar, pointwise check
    ``error <= envelope * (1 + tolerance)``.  Stochastic mode: ``n_traj``
    noise paths spread over ``n_targets`` targets, ensemble mean square
    checked against the stochastic envelope plus three standard errors.
    """
    if constants.alpha_ell <= 0.0:
        raise ValueError("alpha_ell <= 0: certificate refused")
    base_seed = rng.seed

    if mode == "deterministic":
        n_targets = n_traj
    else:
        n_targets = n_targets or min(n_traj, 8)
    targets = [
        generate_target(system, horizon, seed=base_seed + 1000 + i, dt=dt)
        for i in range(n_targets)
    ]
    reps = int(np.ceil(n_traj / n_targets))
    targets = (targets * reps)[:n_traj]

    e0 = rng.child(1).generator().uniform(
        system.error_box[0], system.error_box[1], (n_traj, system.n)
    )
    xd0 = np.stack([tr.xs[0] for tr in targets])
    x0 = xd0 + e0
    v0, vs0 = path_energies(metric_source, x0, xd0, t=0.0, n_segments=path_segments)

    ts, xs, xds = rollout_closed_loop(
        system, controller, targets, x0, horizon, dt,
        mode=mode, rng=rng.child(2), disturbance=disturbance,
    )
    err = np.linalg.norm(xs - xds, axis=2).T  # (P, T)
    e0n = np.maximum(err[:, :1], 1e-300)
    normalized = err / e0n

    if mode == "deterministic":
        envs = np.stack([bound_envelope_det(constants, v)(ts) for v in v0])
        slack = err - envs * (1.0 + tolerance) - _ENV_ABS_TOL
        passes = [bool(np.all(slack[i] <= 0.0)) for i in range(n_traj)]
        with np.errstate(divide="ignore", invalid="ignore"):
            viol = np.where(envs > 0, err / envs - 1.0, 0.0)
        max_violation = float(np.max(viol))
        errors_out, env_out, stderr = err, envs, None
    else:
        ms = (err**2).mean(axis=0)
        se = (err**2).std(axis=0, ddof=1) / np.sqrt(n_traj)
        env = bound_envelope_stoch(constants, float(np.mean(vs0)))(ts)
        slack = ms - env - 3.0 * se
        passes = [bool(np.all(slack <= 0.0))]
        max_violation = float(np.max((ms - env) / np.maximum(env, 1e-300)))
        errors_out, env_out, stderr = ms, env, se

    cmargin, cfrac = np.nan, np.nan
    if margin_samples is not None and isinstance(controller, ControllerNet):
        margins = contraction_margins(
            metric_source, controller, system, margin_samples,
            alpha_for_margin if alpha_for_margin is not None else constants.alpha,
        )
        cmargin = float(margins.max())
        cfrac = float((margins < 0.0).mean())

    return CertificateReport(
        constants=constants,
        mode=mode,
        tolerance=tolerance,
        passes=passes,
        max_violation=max_violation,
        contraction_margin=cmargin,
        contraction_fraction=cfrac,
        ts=ts,
        errors=errors_out,
        envelopes=env_out,
        normalized=normalized,
        stderr=stderr,
        notes={
            "path_energy": "straight-line trapezoid approximation of the "
            "geodesic integral (overestimates it)",
            "n_traj": n_traj,
            "horizon": horizon,
            "dt": dt,
        },
    )


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def write_certificate(report: CertificateReport, outdir, prefix="certificate"):
    """Write the JSON summary and per-trajectory CSVs; returns their paths."""
    os.makedirs(outdir, exist_ok=True)
    paths = []
    if report.mode == "deterministic":
        for i in range(report.errors.shape[0]):
            path = os.path.join(outdir, f"{prefix}_traj{i:03d}.csv")
            with open(path, "w", newline="", encoding="utf-8") as fh:
                wr = csv.writer(fh)
                wr.writerow(["t", "tracking_error", "envelope", "x_e"])
                for j, t in enumerate(report.ts):
                    wr.writerow(
                        [
                            repr(float(t)),
                            repr(float(report.errors[i, j])),
                            repr(float(report.envelopes[i, j])),
                            repr(float(report.normalized[i, j])),
                        ]
                    )
            paths.append(path)
    else:
        path = os.path.join(outdir, f"{prefix}_ensemble.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "mean_square_error", "envelope", "stderr"])
            for j, t in enumerate(report.ts):
                wr.writerow(
                    [
                        repr(float(t)),
                        repr(float(report.errors[j])),
                        repr(float(report.envelopes[j])),
                        repr(float(report.stderr[j])),
                    ]
                )
        paths.append(path)
    c = report.constants
    summary = {
        "mode": report.mode,
        "passed": report.passed,
        "passes": report.passes,
        "tolerance": report.tolerance,
        "max_violation": report.max_violation,
        "contraction_margin": None
        if np.isnan(report.contraction_margin)
        else report.contraction_margin,
        "contraction_fraction": None
        if np.isnan(report.contraction_fraction)
        else report.contraction_fraction,
        "constants": {
            "m_under": c.m_under, "m_over": c.m_over, "alpha": c.alpha,
            "alpha_ell": c.alpha_ell, "alpha_d": c.alpha_d, "alpha_g": c.alpha_g,
            "L_u": c.L_u, "L_m": c.L_m, "eps0": c.eps0, "eps1": c.eps1,
            "d_bar": c.d_bar, "g_bar": c.g_bar, "C": c.C,
        },
        "notes": report.notes,
    }
    jpath = os.path.join(outdir, f"{prefix}.json")
    with open(jpath, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    paths.append(jpath)
    return paths
