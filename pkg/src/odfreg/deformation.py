"""Momentum-driven flows of grid points under a Gaussian kernel.

Time-dependent momenta ``alpha[t]`` (one 3-vector per support point) generate
the velocity ``v_t(x) = sum_j k(x, q_j(t)) alpha_j(t)`` where ``q_j(t)`` are the
current support positions.  Positions are advanced with forward Euler over
``T`` steps of length ``1 / T``.  Everything here is discretise-then-
differentiate: :func:`adjoint_backward` is the exact transpose of the Euler
recursion, so gradients agree with finite differences of the discrete
objective to round-off.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import backend
from .grid import Grid
from .reorient import FoldedDeformationError


@dataclass(frozen=True)
class KernelParams:
    """Gaussian kernel width ``sigma_V`` in voxels (converted to mm with the mean spacing)."""

    sigma_V: float = 5.0

    def __post_init__(self):
        if not self.sigma_V > 0:
            raise ValueError("sigma_V must be positive")

    def sigma_mm(self, grid: Grid) -> float:
        return float(self.sigma_V * np.mean(grid.voxel_size))


def kernel_eval(x, y, sigma: float):
    """``exp(-|x - y|^2 / (2 sigma^2))``, broadcasting over leading axes."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return np.exp(-0.5 * np.sum(d * d, axis=-1) / sigma**2)


def gram(x, y, sigma: float) -> np.ndarray:
    """Dense kernel matrix between point sets (P, 3) and (Q, 3)."""
    return kernel_eval(np.asarray(x)[:, None, :], np.asarray(y)[None, :, :], sigma)


@dataclass
class MomentumField:
    """Momenta ``alpha`` of shape (T, M, 3) carried by the grid nodes ``support`` (M,)."""

    alpha: np.ndarray
    support: np.ndarray
    grid: Grid

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.support = np.asarray(self.support, dtype=np.intp)
        if self.alpha.ndim != 3 or self.alpha.shape[1:] != (len(self.support), 3):
            raise ValueError("alpha must have shape (T, len(support), 3)")
        if not np.all(np.isfinite(self.alpha)):
            raise ValueError("non-finite momentum")

    @classmethod
    def zeros(cls, grid: Grid, T: int = 10, support=None) -> "MomentumField":
        support = np.arange(grid.n_points) if support is None else np.asarray(support)
        return cls(np.zeros((T, len(support), 3)), support, grid)

    @property
    def T(self) -> int:
        return self.alpha.shape[0]

    @property
    def dt(self) -> float:
        return 1.0 / self.T

    def with_alpha(self, alpha) -> "MomentumField":
        return MomentumField(alpha, self.support, self.grid)


@dataclass
class Trajectory:
    """Positions ``(T + 1, N, 3)`` of the grid nodes and the Jacobians of ``phi_1``.

    ``inverse`` holds ``phi_1^-1`` at the nodes once :func:`invert_endpoint` ran.
    """

    positions: np.ndarray
    jacobians: np.ndarray
    inverse: np.ndarray | None = None
    inverse_residual: float | None = None

    @property
    def endpoint(self) -> np.ndarray:
        return self.positions[-1]

    @property
    def dets(self) -> np.ndarray:
        return np.linalg.det(self.jacobians)


def velocity(m: MomentumField, positions, t: int, x, sigma: float) -> np.ndarray:
    """Velocity at time step ``t`` evaluated at points ``x`` (P, 3)."""
    q = np.ascontiguousarray(positions[t][m.support])
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
    return backend.gauss_matvec(x, q, np.ascontiguousarray(m.alpha[t]), sigma)


def flow_forward(m: MomentumField, kernel: KernelParams, check_folds: bool = True) -> Trajectory:
    """Integrate all grid nodes from the identity with forward Euler.

    Raises :class:`FoldedDeformationError` (worst voxel and determinant) when a
    Jacobian determinant of ``phi_1`` is not positive and ``check_folds`` is set.
    """
    g = m.grid
    sigma = kernel.sigma_mm(g)
    pos = np.empty((m.T + 1, g.n_points, 3))
    pos[0] = g.points()
    for t in range(m.T):
        pos[t + 1] = pos[t] + m.dt * velocity(m, pos, t, pos[t], sigma)
    jac = g.jacobian(pos[-1])
    if check_folds:
        dets = np.linalg.det(jac)
        if np.any(~(dets > 0)):
            worst = int(np.nanargmin(np.where(np.isnan(dets), -np.inf, dets)))
            raise FoldedDeformationError(worst, dets[worst])
    return Trajectory(pos, jac)


def flow_points(m: MomentumField, traj: Trajectory, kernel: KernelParams, x0) -> np.ndarray:
    """Carry arbitrary points through the same Euler steps (support motion taken from ``traj``)."""
    sigma = kernel.sigma_mm(m.grid)
    x = np.array(x0, dtype=float)
    for t in range(m.T):
        x = x + m.dt * velocity(m, traj.positions, t, x, sigma)
    return x


class InverseResidualWarning(UserWarning):
    pass


class InverseResidualError(RuntimeError):
    pass


def invert_endpoint(m: MomentumField, traj: Trajectory, kernel: KernelParams,
                    warn_at: float = 0.5, fail_at: float = 2.0) -> Trajectory:
    """Approximate ``phi_1^-1`` on the grid by integrating the velocities backwards.

    Stores the inverse and its round-trip residual ``max |phi_1(phi_1^-1(x)) - x|``
    (in voxels) on ``traj`` and returns it.  A residual above ``warn_at``
    issues :class:`InverseResidualWarning`; above ``fail_at`` raises
    :class:`InverseResidualError`.
    """
    g = m.grid
    sigma = kernel.sigma_mm(g)
    x = g.points()
    for t in reversed(range(m.T)):
        x = x - m.dt * velocity(m, traj.positions, t, x, sigma)
    back = flow_points(m, traj, kernel, x)
    resid = float(np.max(np.linalg.norm(back - g.points(), axis=1)) / np.mean(g.voxel_size))
    traj.inverse, traj.inverse_residual = x, resid
    if resid > fail_at:
        raise InverseResidualError(f"inverse map residual {resid:.3g} voxels")
    if resid > warn_at:
        warnings.warn(f"inverse map residual {resid:.3g} voxels", InverseResidualWarning,
                      stacklevel=2)
    return traj


def path_energy(m: MomentumField, traj: Trajectory, kernel: KernelParams) -> float:
    """``sum_t dt * alpha_t . K(q_t, q_t) alpha_t``."""
    sigma = kernel.sigma_mm(m.grid)
    total = 0.0
    for t in range(m.T):
        q = np.ascontiguousarray(traj.positions[t][m.support])
        ka = backend.gauss_matvec(q, q, np.ascontiguousarray(m.alpha[t]), sigma)
        total += m.dt * float(np.sum(ka * m.alpha[t]))
    return total


def adjoint_backward(m: MomentumField, traj: Trajectory, kernel: KernelParams,
                     grad_E_at_1, lam: float = 1.0) -> np.ndarray:
    """Transport the endpoint gradient backwards through the flow.

    Returns ``eta`` of shape (T + 1, N, 3) with ``eta[T] = grad_E_at_1`` and

        eta[t] = eta[t+1] + dt * d/dq_t [ (eta[t+1] + alpha_t / lam) . v_t ]

    where the derivative acts on every position the step-``t`` velocity
    depends on (evaluation points and support points).  The ``alpha / lam``
    term accounts for the path energy's own dependence on positions.
    ``eta[t + 1]`` pairs with ``alpha[t]`` in :func:`grad_J`.
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    g = m.grid
    sigma = kernel.sigma_mm(g)
    eta = np.empty((m.T + 1, g.n_points, 3))
    eta[m.T] = grad_E_at_1
    for t in reversed(range(m.T)):
        x = np.ascontiguousarray(traj.positions[t])
        q = np.ascontiguousarray(x[m.support])
        a = np.ascontiguousarray(m.alpha[t])
        w = eta[t + 1].copy()
        w[m.support] += a / lam
        gx, gy = backend.gauss_adjoint(x, q, a, w, sigma)
        gx[m.support] += gy
        eta[t] = eta[t + 1] + m.dt * gx
    return eta


def grad_J(m: MomentumField, eta, lam: float) -> np.ndarray:
    """Kernel-metric gradient ``2 alpha_t + lam * eta_{t+1}`` restricted to the support."""
    return 2.0 * m.alpha + lam * np.asarray(eta)[1:, m.support]


def euclidean_gradient(m: MomentumField, traj: Trajectory, kernel: KernelParams,
                       eta, lam: float) -> np.ndarray:
    """Partial derivatives of the discrete objective with respect to every ``alpha`` entry."""
    sigma = kernel.sigma_mm(m.grid)
    out = np.empty_like(m.alpha)
    for t in range(m.T):
        x = np.ascontiguousarray(traj.positions[t])
        q = np.ascontiguousarray(x[m.support])
        a = np.ascontiguousarray(m.alpha[t])
        out[t] = 2.0 * backend.gauss_matvec(q, q, a, sigma)
        out[t] += backend.gauss_matvec(q, x, np.ascontiguousarray(lam * eta[t + 1]), sigma)
    return m.dt * out
