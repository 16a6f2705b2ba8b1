"""Dense symmetric linear algebra, fixed-step integrators, path quadrature,
and seeded random streams.

Everything here is deterministic given explicit inputs; randomness always
flows through an :class:`RngStream` so that runs are reproducible bit for
bit.  Integrators are fixed-step on purpose: certificate checks compare
trajectories against analytic envelopes on a shared grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._backend import kernels

SYM_TOL = 1e-9


class NotSymmetricError(ValueError):
    """Raised when a symmetric-only operation receives a non-symmetric matrix."""


class DivergedError(RuntimeError):
    """Raised when an integrator produces a non-finite state."""


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

# named sub-streams hanging off the one global seed
STREAM_IDS = {
    "dataset": 1,
    "sphere": 2,
    "wiener": 3,
    "targets": 4,
    "init": 5,
    "certify": 6,
}


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random stream: (seed, stream_id[, lineage])."""

    seed: int
    stream_id: int = 0
    lineage: tuple = ()

    def generator(self) -> np.random.Generator:
        """Fresh generator; identical streams reproduce identical draws."""
        key = (int(self.seed), int(self.stream_id)) + tuple(
            int(i) for i in self.lineage
        )
        if any(k < 0 for k in key):
            raise ValueError("RngStream entries must be non-negative")
        return np.random.default_rng(key)

    def child(self, *indices: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.lineage + tuple(indices))


def named_stream(seed: int, name: str) -> RngStream:
    return RngStream(seed, STREAM_IDS[name])


# ---------------------------------------------------------------------------
# symmetric matrix helpers
# ---------------------------------------------------------------------------

def sym(a):
    """Symmetric part (a + a.T) / 2; batched on leading axes."""
    a = np.asarray(a, dtype=np.float64)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _check_symmetric(a, tol=SYM_TOL):
    dev = np.linalg.norm(a - a.T)
    if dev > tol * max(1.0, np.linalg.norm(a)):
        raise NotSymmetricError(
            f"matrix is not symmetric: |A - A^T|_F = {dev:.3e}"
        )


def eig_sym(a, tol=SYM_TOL):
    """Ascending eigenvalues and orthonormal eigenvectors of a symmetric matrix.

    The input is symmetrized before the solve; inputs farther than ``tol``
    (relative) from symmetric are rejected.
    """
    a = np.asarray(a, dtype=np.float64)
    _check_symmetric(a, tol)
    return kernels.eigh_sym(sym(a))


def eigvals_sym(a, tol=SYM_TOL):
    return eig_sym(a, tol)[0]


def min_eig_sym(a, tol=SYM_TOL) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    return float(eig_sym(a, tol)[0][0])


def max_eig_sym(a, tol=SYM_TOL) -> float:
    return float(eig_sym(a, tol)[0][-1])


def is_definite(a, sense: str, tol: float = 0.0) -> bool:
    """Definiteness check with tolerance: sense in {psd, nsd, pd, nd}."""
    w = eigvals_sym(a)
    if sense == "psd":
        return bool(w[0] >= -tol)
    if sense == "nsd":
        return bool(w[-1] <= tol)
    if sense == "pd":
        return bool(w[0] > tol)
    if sense == "nd":
        return bool(w[-1] < -tol)
    raise ValueError(f"unknown definiteness sense: {sense!r}")


# ---------------------------------------------------------------------------
# integrators
# ---------------------------------------------------------------------------

def _time_grid(t0, t1, dt):
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if t1 <= t0:
        raise ValueError("t1 must exceed t0")
    n = max(1, int(round((t1 - t0) / dt)))
    return np.linspace(t0, t1, n + 1), (t1 - t0) / n


def integrate_ode(rhs, x0, t0, t1, dt, method="rk4"):
    """Fixed-step integration of ``xdot = rhs(x, t)``.

    Returns ``(ts, xs)`` on the uniform grid including both endpoints
    (``dt`` is rounded so the grid lands exactly on ``t1``).  ``method`` is
    ``"rk4"`` (classical 4th order) or ``"euler"``.  States may carry a
    leading batch axis; ``rhs`` must then broadcast.
    """
    ts, h = _time_grid(t0, t1, dt)
    x = np.array(x0, dtype=np.float64)
    xs = np.empty((len(ts),) + x.shape)
    xs[0] = x
    for i in range(len(ts) - 1):
        t = ts[i]
        if method == "rk4":
            k1 = rhs(x, t)
            k2 = rhs(x + 0.5 * h * k1, t + 0.5 * h)
            k3 = rhs(x + 0.5 * h * k2, t + 0.5 * h)
            k4 = rhs(x + h * k3, t + h)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        elif method == "euler":
            x = x + h * rhs(x, t)
        else:
            raise ValueError(f"unknown method: {method!r}")
        if not np.all(np.isfinite(x)):
            raise DivergedError(f"non-finite state at t = {ts[i + 1]:.6g}")
        xs[i + 1] = x
    return ts, xs


def integrate_sde(drift, diffusion, x0, t0, t1, dt, rng: RngStream, n_noise=None):
    """Euler-Maruyama for ``dx = drift dt + diffusion dW``.

    ``diffusion(x, t)`` returns the (n, w) noise matrix, or pass ``None`` for
    the drift-only (plain Euler) case.  Wiener increments are drawn from
    ``rng`` as ``sqrt(dt) * N(0, I_w)``; identical streams give bit-identical
    paths.  Batched states of shape (B, n) are supported, with independent
    increments per batch element.
    """
    ts, h = _time_grid(t0, t1, dt)
    x = np.array(x0, dtype=np.float64)
    xs = np.empty((len(ts),) + x.shape)
    xs[0] = x
    gen = rng.generator()
    sqh = np.sqrt(h)
    for i in range(len(ts) - 1):
        t = ts[i]
        step = h * np.asarray(drift(x, t), dtype=np.float64)
        if diffusion is not None:
            g = np.asarray(diffusion(x, t), dtype=np.float64)
            w = n_noise if n_noise is not None else g.shape[-1]
            dw = sqh * gen.standard_normal(x.shape[:-1] + (w,))
            step = step + np.einsum("...ij,...j->...i", g, dw)
        x = x + step
        if not np.all(np.isfinite(x)):
            raise DivergedError(f"non-finite state at t = {ts[i + 1]:.6g}")
        xs[i + 1] = x
    return ts, xs


# ---------------------------------------------------------------------------
# sampling and quadrature
# ---------------------------------------------------------------------------

def sample_unit_sphere(n, count, rng: RngStream):
    """``count`` unit vectors uniform on the sphere in R^n (Gaussian trick)."""
    if n < 1 or count < 1:
        raise ValueError("n and count must be >= 1")
    gen = rng.generator()
    p = gen.standard_normal((count, n))
    norms = np.linalg.norm(p, axis=1)
    while np.any(norms < 1e-12):  # essentially never
        bad = norms < 1e-12
        p[bad] = gen.standard_normal((int(bad.sum()), n))
        norms = np.linalg.norm(p, axis=1)
    return p / norms[:, None]


def path_quadrature(integrand, a, b, n_segments):
    """Composite trapezoid line integral along the straight path a -> b.

    ``integrand(q)`` is evaluated at the n_segments+1 path nodes and each
    value is applied to the segment increment (b - a)/n_segments: matrices
    act by matvec, vectors by dot product, scalars by scaling.  ``a == b``
    returns zero.
    """
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dq = (b - a) / n_segments
    if not np.any(dq):
        f0 = np.asarray(integrand(a.copy()), dtype=np.float64)
        return np.zeros(f0.shape[:-1]) if f0.ndim >= 1 else 0.0
    total = None
    prev = None
    for i in range(n_segments + 1):
        q = a + (i / n_segments) * (b - a)
        f = np.asarray(integrand(q), dtype=np.float64)
        contrib = f * dq if f.ndim == 0 else f @ dq if f.ndim >= 2 else f.dot(dq)
        if i == 0:
            total = 0.0 * contrib
        else:
            total = total + 0.5 * (prev + contrib)
        prev = contrib
    return total
