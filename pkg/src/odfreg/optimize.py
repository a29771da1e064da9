"""Conjugate-gradient registration over time-dependent momenta.

Each iteration flows the grid, evaluates the matching term and its gradient
at ``phi_1``, transports that gradient backwards with the adjoint, forms the
kernel-metric gradient ``2 alpha + lambda eta``, updates a Polak-Ribiere
direction, and takes a golden-section step along it.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import backend
from .deformation import (KernelParams, MomentumField, Trajectory, adjoint_backward,
                          euclidean_gradient, flow_forward, grad_J, invert_endpoint,
                          path_energy)
from .fields import ODFField
from .matching import match
from .reorient import FoldedDeformationError, InvalidAffineError, group_action
from .sphere import distance

log = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
# mean squared distance per voxel below which two fields count as already
# matched; arccos of an inner product rounded near 1 leaves about this much
MATCHED_PER_VOXEL = 1e-12


class ConfigError(ValueError):
    """Invalid or unknown registration setting."""


@dataclass
class RegistrationConfig:
    """Settings of :func:`register`.

    ``sigma_V`` is in voxels.  ``max_step`` bounds, in voxels, how far one
    line-search step may move any point during a single Euler step.
    When a golden-section search finds no decrease, the bracket is shrunk by
    ``line_search_tol`` and searched again, at most ``bracket_shrinks`` times.
    ``mask_threshold`` excludes voxels within that distance of the uniform
    ODF in both images from the momentum support (0 keeps every voxel).
    ``threads`` of 0 uses the backend default.
    """

    sigma_V: float = 5.0
    lam: float = 1.0
    timesteps: int = 10
    max_iterations: int = 100
    grad_tol: float = 1e-4
    energy_tol: float = 1e-6
    stall_window: int = 3
    max_step: float = 0.5
    line_search_tol: float = 0.02
    bracket_shrinks: int = 2
    mask_threshold: float = 1e-3
    threads: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            try:
                setattr(self, f.name, int(v) if f.type == "int" else float(v))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{f.name}: cannot parse {v!r}") from exc
        if self.sigma_V <= 0:
            raise ConfigError("sigma_V: must be positive")
        if self.lam < 0:
            raise ConfigError("lam: must be non-negative")
        if self.timesteps < 2:
            raise ConfigError("timesteps: must be at least 2")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations: must be non-negative")
        for name in ("grad_tol", "energy_tol", "max_step", "line_search_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive")
        if self.bracket_shrinks < 0:
            raise ConfigError("bracket_shrinks: must be non-negative")
        if self.stall_window < 1:
            raise ConfigError("stall_window: must be at least 1")
        if self.mask_threshold < 0 or self.threads < 0:
            raise ConfigError("mask_threshold and threads must be non-negative")

    KEY_ALIASES = {"lambda": "lam", "T": "timesteps"}

    @classmethod
    def from_mapping(cls, items: dict, required=()) -> "RegistrationConfig":
        names = {f.name for f in fields(cls)}
        kw = {}
        for key, val in items.items():
            name = cls.KEY_ALIASES.get(key, key)
            if name not in names:
                raise ConfigError(f"{key}: unknown configuration key")
            kw[name] = val
        for key in required:
            if cls.KEY_ALIASES.get(key, key) not in kw:
                raise ConfigError(f"{key}: missing configuration key")
        return cls(**kw)

    def to_mapping(self) -> dict:
        return {k: repr(v) for k, v in asdict(self).items()}


@dataclass
class RegistrationResult:
    """Outcome of :func:`register`.  ``trace`` holds one record per accepted iterate."""

    momentum: MomentumField
    trajectory: Trajectory
    trace: list
    iterations: int
    reason: str
    deformed: ODFField | None = None
    diagnostics: dict = field(default_factory=dict)


def foreground_support(template: ODFField, target: ODFField, threshold: float) -> np.ndarray:
    """Flat indices of voxels farther than ``threshold`` from uniform in either image."""
    if threshold <= 0:
        return np.arange(template.grid.n_points)
    S = template.sampling
    far = ((distance(template.flat, S.uniform, S) > threshold)
           | (distance(target.flat, S.uniform, S) > threshold))
    return np.flatnonzero(far)


def line_search_golden(f, hi: float, tol: float, f0: float | None = None):
    """Golden-section search for the minimiser of ``f`` on ``[0, hi]``.

    Stops when the bracket is narrower than ``tol * hi``.  Returns
    ``(eps, f(eps), evaluations)`` for the best sample seen, including both
    ends; ``eps`` is 0 when no sample improves on ``f0 = f(0)``.  ``f`` may
    return ``inf`` for infeasible steps.
    """
    f0 = f(0.0) if f0 is None else f0
    samples = {0.0: f0}

    def ev(x):
        if x not in samples:
            samples[x] = f(x)
        return samples[x]

    a, b = 0.0, float(hi)
    ev(b)
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = ev(c), ev(d)
    while b - a > tol * hi:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = ev(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = ev(d)
    best = min(samples, key=lambda x: (samples[x], x))
    return best, samples[best], len(samples) - 1


class Objective:
    """``J(alpha) = path energy + lam * matching term`` with the last evaluations cached."""

    def __init__(self, template, target, config: RegistrationConfig, support):
        self.template, self.target, self.config = template, target, config
        self.kernel = KernelParams(config.sigma_V)
        self.grid = template.grid
        self.support = support
        self.n_evals = 0

    def momentum(self, alpha) -> MomentumField:
        return MomentumField(alpha, self.support, self.grid)

    def value(self, alpha, gradient=False):
        """Returns ``(J, R, E, trajectory, match_result)``; raises on folding."""
        self.n_evals += 1
        m = self.momentum(alpha)
        traj = flow_forward(m, self.kernel)
        R = path_energy(m, traj, self.kernel)
        res = match(self.template, self.target, traj.endpoint, gradient=gradient)
        return R + self.config.lam * res.energy, R, res.energy, traj, res

    def gradients(self, alpha, traj, res):
        m = self.momentum(alpha)
        eta = adjoint_backward(m, traj, self.kernel, res.gradient, self.config.lam)
        return (grad_J(m, eta, self.config.lam),
                euclidean_gradient(m, traj, self.kernel, eta, self.config.lam))

    def max_step_displacement(self, direction, traj) -> float:
        """Largest per-Euler-step point displacement caused by the momentum ``direction``."""
        m = self.momentum(direction)
        sigma = self.kernel.sigma_mm(self.grid)
        worst = 0.0
        for t in range(m.T):
            x = np.ascontiguousarray(traj.positions[t])
            q = np.ascontiguousarray(x[self.support])
            v = backend.gauss_matvec(x, q, np.ascontiguousarray(direction[t]), sigma)
            worst = max(worst, m.dt * float(np.max(np.linalg.norm(v, axis=1))))
        return worst


def evaluate_J(m: MomentumField, template: ODFField, target: ODFField,
               config: RegistrationConfig):
    """``(J, path energy, matching term)`` for a momentum field."""
    kernel = KernelParams(config.sigma_V)
    traj = flow_forward(m, kernel)
    R = path_energy(m, traj, kernel)
    E = match(template, target, traj.endpoint).energy
    return R + config.lam * E, R, E


def _check_inputs(template, target):
    if template.sampling != target.sampling:
        from .sphere import IncompatibleSamplingError
        raise IncompatibleSamplingError("template and target use different samplings")
    if template.grid != target.grid:
        raise ValueError("template and target grids differ")


def register(template: ODFField, target: ODFField,
             config: RegistrationConfig | None = None, callback=None) -> RegistrationResult:
    """Register ``template`` onto ``target``.

    ``callback(record)`` is called after every accepted iteration.  Stops on
    a small gradient (``grad_tol`` times the initial norm), on a relative J
    decrease below ``energy_tol`` over ``stall_window`` iterations, on
    ``max_iterations``, or when the line search cannot improve J.
    """
    config = config or RegistrationConfig()
    _check_inputs(template, target)
    prev_threads = backend.get_threads()
    if config.threads:
        backend.set_threads(config.threads)
    try:
        return _register(template, target, config, callback)
    finally:
        backend.set_threads(prev_threads)


def _register(template, target, config, callback):
    t_start = time.perf_counter()
    g = template.grid
    support = foreground_support(template, target, config.mask_threshold)
    obj = Objective(template, target, config, support)
    frozen = [a for a in range(3) if g.dims[a] == 1]
    alpha = np.zeros((config.timesteps, len(support), 3))

    J, R, E, traj, res = obj.value(alpha, gradient=True)
    trace = [dict(iteration=0, J=J, energy=R, matching=E, step=0.0, grad_norm=np.nan)]

    def finish(reason, iterations):
        m = obj.momentum(alpha)
        invert_endpoint(m, traj, obj.kernel)
        deformed = group_action(template, traj.inverse)
        diag = dict(min_det=float(traj.dets.min()),
                    inverse_residual=float(traj.inverse_residual),
                    max_drift=float(np.max(np.abs(res.workspace.drift))),
                    support_size=int(len(support)), evaluations=obj.n_evals,
                    seconds=time.perf_counter() - t_start)
        log.info("registration finished: %s after %d iterations", reason, iterations)
        return RegistrationResult(m, traj, trace, iterations, reason, deformed, diag)

    if (config.lam == 0 or len(support) == 0
            or E <= MATCHED_PER_VOXEL * g.n_points):
        return finish("converged", 0)

    def directions(alpha, traj, res):
        gm, ge = obj.gradients(alpha, traj, res)
        gm[..., frozen] = 0.0
        ge[..., frozen] = 0.0
        return gm, ge

    gm, ge = directions(alpha, traj, res)
    g0 = float(np.linalg.norm(gm))
    trace[0]["grad_norm"] = g0
    if g0 == 0.0:
        return finish("converged", 0)
    d = gm.copy()
    reason, it = "max_iterations", 0
    for it in range(1, config.max_iterations + 1):
        slope = float(np.sum(ge * d))
        if not slope > 0:
            d = gm.copy()
            if not float(np.sum(ge * d)) > 0:
                d = ge.copy()
        disp = obj.max_step_displacement(d, traj)
        if disp == 0.0:
            reason = "converged"
            break
        hi = config.max_step * float(np.min(g.voxel_size)) / disp
        cache = {}

        def phi(eps):
            try:
                out = obj.value(alpha - eps * d)
            except (FoldedDeformationError, InvalidAffineError):
                return math.inf
            cache[eps] = out
            return out[0]

        for _ in range(config.bracket_shrinks + 1):
            eps, Jnew, _ = line_search_golden(phi, hi, config.line_search_tol, f0=J)
            if eps > 0.0:
                break
            hi *= config.line_search_tol
        if eps == 0.0:
            if np.array_equal(d, gm):
                reason = "stalled"
                it -= 1
                break
            d = gm.copy()  # restart along the plain gradient and retry next iteration
            continue
        alpha = alpha - eps * d
        _, R, E, traj, _ = cache[eps]
        J = Jnew
        res = match(template, target, traj.endpoint, gradient=True)
        gm_new, ge = directions(alpha, traj, res)
        gnorm = float(np.linalg.norm(gm_new))
        rec = dict(iteration=it, J=J, energy=R, matching=E, step=eps, grad_norm=gnorm)
        trace.append(rec)
        log.debug("iter %d J=%.6g R=%.6g E=%.6g step=%.3g |g|=%.3g", it, J, R, E, eps, gnorm)
        if callback is not None:
            callback(rec)
        beta = max(0.0, float(np.sum(gm_new * (gm_new - gm)) / np.sum(gm * gm)))
        d = gm_new + beta * d
        gm = gm_new
        if gnorm < config.grad_tol * g0:
            reason = "gradient"
            break
        w = config.stall_window
        if len(trace) > w:
            ref = trace[-1 - w]["J"]
            if abs(ref - J) <= config.energy_tol * max(abs(ref), 1e-300):
                reason = "stagnation"
                break
    return finish(reason, it)
