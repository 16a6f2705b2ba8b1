"""Constant-metric convex synthesis of an optimal contraction metric.

The program minimizes the steady-state tracking-error bound
(C / (2 alpha_l)) * chi over (nu, chi, W_bar) subject to, at every grid
point,

    [[H + 2 alpha W_bar,  W_bar          ]
     [W_bar,             -(nu/alpha_s) I ]]  <= 0,
    -d_{b_i} W_bar + 2 sym((db_i/dx) W_bar) = 0   for each input column,
    I <= W_bar <= chi I,

with H = -dW_bar/dt - d_f W_bar + 2 sym((df/dx) W_bar) - nu B R^{-1} B^T.
For a constant W_bar the derivative terms vanish.  When alpha_s = 0 the
block degenerates to H + 2 alpha W_bar <= 0 (the Schur limit).  The search
is a bisection on chi with an inner projected-subgradient feasibility pass
over W_bar (eigenvalue clipping onto I <= W_bar <= chi I); nu is handled by
monotonicity (every margin is non-increasing in nu) and shrunk to the
smallest feasible value afterwards.

The recovered metric is M = nu W_bar^{-1}, giving m_under = nu / chi and
m_over = nu.  The associated tracking controller integrates
-R^{-1} B^T M along the straight path from the target state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .netmetric import MetricNet, eval_M
from .numerics import eig_sym, path_quadrature, sym
from .systems import SystemModel


class InfeasibleError(RuntimeError):
    """No contraction metric exists on the grid at the requested rate."""


@dataclass
class CvstemProblem:
    system: SystemModel
    grid: np.ndarray  # (G, n) sample states
    times: np.ndarray = None  # (G,), zeros by default
    alpha: float = 1.0
    alpha_s: float = 0.0  # L_m g_bar^2 (alpha_G + 1/2); 0 = deterministic
    alpha_d: float = None  # defaults to alpha
    alpha_g: float = 1.0
    r_weight: np.ndarray = None  # constant PD input weight, identity default
    eps0: float = 0.0
    feas_tol: float = 1e-7
    chi_max: float = 1e6
    chi_resolution: float = 1e-4
    nu_max: float = 1e6
    inner_iters: int = 400

    def __post_init__(self):
        self.grid = np.atleast_2d(np.asarray(self.grid, dtype=np.float64))
        if self.times is None:
            self.times = np.zeros(len(self.grid))
        if self.alpha_d is None:
            self.alpha_d = self.alpha
        if self.r_weight is None:
            self.r_weight = np.eye(self.system.m)
        self.r_inv = np.linalg.inv(self.r_weight)
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if self.alpha_s < 0.0:
            raise ValueError("alpha_s must be >= 0")


@dataclass
class CvstemSolution:
    nu: float
    chi: float
    w_bar: np.ndarray
    objective: float
    margins: dict  # per-grid-point worst margins by constraint family
    alpha: float
    alpha_s: float

    @property
    def metric(self) -> np.ndarray:
        """Constant contraction metric M = nu * W_bar^{-1}."""
        return sym(self.nu * np.linalg.inv(self.w_bar))

    @property
    def m_under(self) -> float:
        return self.nu / self.chi

    @property
    def m_over(self) -> float:
        return self.nu


def h_matrix(problem: CvstemProblem, nu, w_bar, x, t) -> np.ndarray:
    """H(nu, W_bar) at one grid point; constant W_bar drops the derivatives."""
    sysm = problem.system
    jf = sysm.jac_f(np.asarray(x, dtype=np.float64), t)
    b = sysm.B(np.asarray(x, dtype=np.float64), t)
    return 2.0 * sym(jf @ w_bar) - nu * (b @ problem.r_inv @ b.T)


def lmi_residuals(problem: CvstemProblem, nu, chi, w_bar, x, t):
    """(block_margin, killing_margins, bound_margins) at one grid point.

    All values are <= the feasibility tolerance exactly when (nu, chi,
    W_bar) is feasible at (x, t).  The block margin is the top eigenvalue of
    the stochastic block LMI (of H + 2 alpha W_bar when alpha_s = 0).
    """
    sysm = problem.system
    x = np.asarray(x, dtype=np.float64)
    hh = h_matrix(problem, nu, w_bar, x, t) + 2.0 * problem.alpha * w_bar
    if problem.alpha_s > 0.0:
        n = sysm.n
        block = np.zeros((2 * n, 2 * n))
        block[:n, :n] = hh
        block[:n, n:] = w_bar
        block[n:, :n] = w_bar
        block[n:, n:] = -(nu / problem.alpha_s) * np.eye(n)
        block_margin = float(eig_sym(block)[0][-1])
    else:
        block_margin = float(eig_sym(hh)[0][-1])
    jb = sysm.jac_b(x, t)
    killing = []
    for i in range(sysm.m):
        resid = 2.0 * sym(jb[i] @ w_bar)  # d_{b_i} W_bar = 0 for constant W_bar
        killing.append(float(np.linalg.norm(resid)))
    wb_eigs = eig_sym(w_bar)[0]
    bound = (float(1.0 - wb_eigs[0]), float(wb_eigs[-1] - chi))
    return block_margin, killing, bound


def schur_equivalent(problem: CvstemProblem, nu, w_bar, x, t) -> np.ndarray:
    """Reduced matrix H + 2 alpha W_bar + (alpha_s/nu) W_bar^2.

    Negative semidefinite exactly when the block LMI is; undefined for
    alpha_s = 0 or nu = 0 (use the degenerate block form instead).
    """
    if problem.alpha_s <= 0.0 or nu <= 0.0:
        raise ValueError("Schur reduction needs alpha_s > 0 and nu > 0")
    hh = h_matrix(problem, nu, w_bar, x, t) + 2.0 * problem.alpha * w_bar
    return hh + (problem.alpha_s / nu) * (w_bar @ w_bar)


def disturbance_constant(problem: CvstemProblem) -> float:
    """C = g_bar^2 (2/alpha_G + 1) + (L_u eps0 + d_bar)^2 / alpha_d."""
    sysm = problem.system
    return sysm.g_bar**2 * (2.0 / problem.alpha_g + 1.0) + (
        sysm.L_u * problem.eps0 + sysm.d_bar
    ) ** 2 / problem.alpha_d


def _worst_margins(problem, nu, chi, w_bar):
    worst = {"block": -np.inf, "killing": 0.0}
    for x, t in zip(problem.grid, problem.times):
        bm, km, _ = lmi_residuals(problem, nu, chi, w_bar, x, t)
        worst["block"] = max(worst["block"], bm)
        if km:
            worst["killing"] = max(worst["killing"], max(km))
    eigs = eig_sym(w_bar)[0]
    worst["lower"] = float(1.0 - eigs[0])
    worst["upper"] = float(eigs[-1] - chi)
    return worst


def _project_w(w_bar, chi):
    w, v = eig_sym(sym(w_bar))
    return sym(v @ np.diag(np.clip(w, 1.0, chi)) @ v.T)


def _margin_and_subgrad(problem, nu, w_bar):
    """max constraint margin over the grid and its subgradient in W_bar.

    Bound constraints are enforced by projection, so only the block and
    killing margins enter.  Every margin is non-increasing in nu, which is
    why the search can pin nu at its cap and shrink it afterwards.
    """
    sysm = problem.system
    n = sysm.n
    best = -np.inf
    grad = np.zeros((n, n))
    for x, t in zip(problem.grid, problem.times):
        jf = sysm.jac_f(x, t)
        b = sysm.B(x, t)
        jb = sysm.jac_b(x, t)
        hh = (
            2.0 * sym(jf @ w_bar)
            - nu * (b @ problem.r_inv @ b.T)
            + 2.0 * problem.alpha * w_bar
        )
        if problem.alpha_s > 0.0:
            block = np.zeros((2 * n, 2 * n))
            block[:n, :n] = hh
            block[:n, n:] = w_bar
            block[n:, :n] = w_bar
            block[n:, n:] = -(nu / problem.alpha_s) * np.eye(n)
            w, v = eig_sym(block)
            lam, vec = w[-1], v[:, -1]
            v1, v2 = vec[:n], vec[n:]
            g = (
                np.outer(jf.T @ v1, v1)
                + np.outer(v1, jf.T @ v1)
                + 2.0 * problem.alpha * np.outer(v1, v1)
                + np.outer(v1, v2)
                + np.outer(v2, v1)
            )
        else:
            w, v = eig_sym(hh)
            lam, v1 = w[-1], v[:, -1]
            g = (
                np.outer(jf.T @ v1, v1)
                + np.outer(v1, jf.T @ v1)
                + 2.0 * problem.alpha * np.outer(v1, v1)
            )
        if lam > best:
            best, grad = lam, sym(g)
        for i in range(sysm.m):
            resid = 2.0 * sym(jb[i] @ w_bar)
            rnorm = np.linalg.norm(resid)
            if rnorm > best:
                best = rnorm
                if rnorm > 1e-300:
                    khat = resid / rnorm
                    grad = sym(jb[i].T @ khat + khat @ jb[i])
    return best, grad


def _feasible_w(problem, chi, w_init=None):
    """Projected-subgradient search for W_bar at nu = nu_max; None if it fails."""
    n = problem.system.n
    nu = problem.nu_max
    starts = [np.eye(n), 0.5 * (1.0 + chi) * np.eye(n)]
    if w_init is not None:
        starts.insert(0, w_init)
    best_w, best_m = None, np.inf
    for w0 in starts:
        w_bar = _project_w(w0, chi)
        margin, _ = _margin_and_subgrad(problem, nu, w_bar)
        if margin < best_m:
            best_m, best_w = margin, w_bar
        if margin <= problem.feas_tol:
            return w_bar
        for it in range(problem.inner_iters):
            margin, grad = _margin_and_subgrad(problem, nu, w_bar)
            if margin < best_m:
                best_m, best_w = margin, w_bar
            if margin <= problem.feas_tol:
                return w_bar
            gn = np.linalg.norm(grad)
            if gn < 1e-14:
                break
            step = max(chi - 1.0, 1.0) / (2.0 + it) ** 0.75
            w_bar = _project_w(w_bar - step * (grad / gn), chi)
    if best_m <= problem.feas_tol:
        return best_w
    return None


def _shrink_nu(problem, chi, w_bar):
    """Smallest feasible nu for a fixed witness (margins non-increasing in nu)."""
    def ok(nu):
        m, _ = _margin_and_subgrad(problem, nu, w_bar)
        return m <= problem.feas_tol

    lo, hi = 0.0, problem.nu_max
    if ok(max(lo, 1e-12)):
        return max(lo, 1e-12)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-9 * max(1.0, hi):
            break
    return hi


def solve_cvstem(problem: CvstemProblem) -> CvstemSolution:
    """Bisection on chi with an inner feasibility search over (nu, W_bar).

    Raises :class:`InfeasibleError` when even chi_max admits no witness.
    The returned objective is (C / (2 alpha_l)) * chi.
    """
    if len(problem.grid) == 0:
        raise ValueError("grid must be nonempty")

    witness = {}

    def feasible(chi):
        w = _feasible_w(problem, chi, witness.get("w"))
        if w is not None:
            witness["w"] = w
            witness["chi"] = chi
        return w is not None

    if feasible(1.0):
        chi_star = 1.0
    else:
        lo, hi = 1.0, None
        chi = 2.0
        while chi <= problem.chi_max:
            if feasible(chi):
                hi = chi
                break
            lo = chi
            chi *= 4.0
        if hi is None:
            if not feasible(problem.chi_max):
                raise InfeasibleError(
                    f"no contraction metric at alpha={problem.alpha} up to "
                    f"chi_max={problem.chi_max}"
                )
            hi = problem.chi_max
        while hi - lo > problem.chi_resolution:
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                hi = mid
            else:
                lo = mid
        chi_star = hi
        if witness.get("chi") != chi_star:
            feasible(chi_star)
    w_star = witness["w"]
    nu_star = _shrink_nu(problem, chi_star, w_star)
    margins = _worst_margins(problem, nu_star, chi_star, w_star)
    c_const = disturbance_constant(problem)
    alpha_l = problem.alpha - problem.alpha_d / 2.0 if problem.alpha_s > 0.0 else problem.alpha
    objective = (c_const / (2.0 * alpha_l)) * chi_star if alpha_l > 0 else float("inf")
    return CvstemSolution(
        nu=float(nu_star),
        chi=float(chi_star),
        w_bar=w_star,
        objective=float(objective),
        margins=margins,
        alpha=problem.alpha,
        alpha_s=problem.alpha_s,
    )


# ---------------------------------------------------------------------------
# path-integral tracking controller
# ---------------------------------------------------------------------------

def _metric_fn(metric_source):
    if isinstance(metric_source, CvstemSolution):
        mconst = metric_source.metric
        return lambda q, t: mconst
    if isinstance(metric_source, MetricNet):
        return lambda q, t: eval_M(metric_source, q, t)
    if isinstance(metric_source, np.ndarray):
        mconst = sym(np.asarray(metric_source, dtype=np.float64))
        return lambda q, t: mconst
    if callable(metric_source):
        return metric_source
    raise TypeError(f"unsupported metric source: {type(metric_source)!r}")


def geodesic_control(
    metric_source, system: SystemModel, x, x_d, u_d, t=0.0,
    r_weight=None, n_quad: int = 8,
):
    """u = u_d - integral of R^{-1} B^T M along the straight path x_d -> x.

    ``metric_source`` may be a :class:`CvstemSolution`, a trained
    :class:`~contraction_kit.netmetric.MetricNet`, a constant matrix, or a
    callable ``(q, t) -> M``.  Exact for constant M and B regardless of
    ``n_quad``; otherwise the trapezoid error falls off as n_quad^{-2}.
    """
    x = np.asarray(x, dtype=np.float64)
    x_d = np.asarray(x_d, dtype=np.float64)
    u_d = np.asarray(u_d, dtype=np.float64)
    r_inv = (
        np.eye(system.m) if r_weight is None else np.linalg.inv(r_weight)
    )
    mfun = _metric_fn(metric_source)

    def integrand(q):
        return r_inv @ system.B(q, t).T @ mfun(q, t)

    return u_d - path_quadrature(integrand, x_d, x, n_quad)
