"""Matching energy between a deformed template and a target, and its gradient.

The energy is accumulated over template voxels ``y`` (the change of variables
``x = phi_1(y)`` of the target-space integral):

    E = vol * sum_y det(A_y) * d(A_y psi_temp(y), psi_targ(phi_1(y)))^2

with ``A_y`` the finite-difference Jacobian of ``phi_1`` at ``y`` and
``A_y psi`` the affine reorientation.  The gradient with respect to the
endpoint positions is the exact derivative of this sum.  It has a spatial
part, coming from the motion of the target sample point, and parts entering
through the Jacobians: the determinant factor and the reorientation
(``L``-matrix) term.  The Jacobian parts are pulled back to positions with
the transpose of the difference stencil, a discrete divergence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import ODFField, interp_spatial
from .reorient import FD_STEP, _Lookup, _reorient_raw, check_affine

_TERMS = ("full", "A", "B")


@dataclass
class MatchWorkspace:
    """Per-voxel quantities of one energy evaluation.

    ``deformed`` is ``A psi_temp`` on the template grid, ``target_at_phi`` the
    target interpolated at ``phi_1(y)``, ``log_maps`` the log map from the
    former to the latter, ``spatial_gradient`` the derivative of the target
    sample with respect to the position (N, 3, N_S), and ``drift`` the raw
    norm error of the reorientation.
    """

    jacobians: np.ndarray
    dets: np.ndarray
    deformed: np.ndarray
    target_at_phi: np.ndarray
    sq_dist: np.ndarray
    log_maps: np.ndarray | None = None
    spatial_gradient: np.ndarray | None = None
    drift: np.ndarray | None = None


@dataclass
class MatchResult:
    energy: float
    gradient: np.ndarray | None
    workspace: MatchWorkspace
    term_A: np.ndarray | None = None
    term_B: np.ndarray | None = None


def _check_pair(template: ODFField, target: ODFField):
    if template.sampling != target.sampling:
        from .sphere import IncompatibleSamplingError
        raise IncompatibleSamplingError("template and target use different samplings")
    if template.grid != target.grid:
        raise ValueError("template and target grids differ")


def _geodesic_coef(c):
    """``d / sin d`` with ``d = arccos c`` (1 at coincidence)."""
    c = np.clip(c, -1.0, 1.0)
    near = c > 1.0 - 1e-12
    s = np.sqrt(np.where(near, 1.0, 1.0 - c * c))
    return np.where(near, 1.0, np.arccos(c) / s)


def match(template: ODFField, target: ODFField, phi1, gradient: bool = False,
          split_terms: bool = False, chunk: int = 2048) -> MatchResult:
    """Matching energy for endpoint positions ``phi1`` (N, 3), optionally with its gradient.

    With ``split_terms`` the gradient is also returned as ``term_A`` (spatial
    and determinant parts) and ``term_B`` (reorientation part), which sum to
    ``gradient``.

    Raises :class:`~odfreg.reorient.FoldedDeformationError` when a Jacobian
    determinant is not positive.
    """
    _check_pair(template, target)
    g = template.grid
    S = template.sampling
    w = S.weights
    phi1 = np.asarray(phi1, dtype=float)
    if phi1.shape != (g.n_points, 3):
        raise ValueError("phi1 must hold one position per grid node")
    jac = g.jacobian(phi1)
    Ainv, det = check_affine(jac, fold_error=True)
    vol = g.voxel_volume

    tvals = template.flat
    lookup = _Lookup(tvals, S)
    targ, dtarg = (interp_spatial(target, phi1, return_gradient=True) if gradient
                   else (interp_spatial(target, phi1), None))

    n = g.n_points
    deformed = np.empty_like(tvals)
    sq = np.empty(n)
    drift = np.empty(n)
    logs = np.empty_like(tvals) if gradient else None
    C_B = np.zeros((n, 3, 3)) if gradient else None
    spatial = np.zeros((n, 3)) if gradient else None
    for s0 in range(0, n, chunk):
        sel = np.arange(s0, min(s0 + chunk, n))
        raw, st, u = _reorient_raw(Ainv[sel], det[sel], lookup, sel, with_u=gradient)
        pos = raw > 0
        rawp = np.where(pos, raw, 0.0)
        nrm = np.sqrt(rawp**2 @ w)
        T = rawp / nrm[:, None]
        Sv = targ[sel]
        c = np.clip(np.sum(T * Sv * w, axis=1), -1.0, 1.0)
        d = np.arccos(c)
        deformed[sel], sq[sel], drift[sel] = T, d * d, nrm - 1.0
        if not gradient:
            continue
        coef = _geodesic_coef(c)[:, None]
        log_TS = coef * (Sv - c[:, None] * T)
        log_ST = coef * (T - c[:, None] * Sv)
        logs[sel] = log_TS
        scale = vol * det[sel]
        # motion of the target sample point
        spatial[sel] = -2.0 * scale[:, None] * np.einsum("vk,vak->va", log_ST * w, dtarg[sel])
        # reorientation: d raw / dA_ab = u_a s~_b - raw (A^-1)_ba / 2 where raw > 0
        lw = np.where(pos, log_TS, 0.0) * w
        cb = np.einsum("vk,vka,vkb->vab", lw, u, st)
        cb -= 0.5 * np.einsum("v,vba->vab", np.sum(lw * raw, axis=1), Ainv[sel])
        C_B[sel] = (-2.0 * scale / nrm)[:, None, None] * cb

    energy = float(vol * np.sum(det * sq))
    ws = MatchWorkspace(jac, det, deformed, targ, sq, logs, dtarg, drift)
    if not gradient:
        return MatchResult(energy, None, ws)
    C_det = (vol * det * sq)[:, None, None] * np.transpose(Ainv, (0, 2, 1))
    term_A = spatial + g.jacobian_adjoint(C_det)
    term_B = g.jacobian_adjoint(C_B)
    grad = term_A + term_B
    if split_terms:
        return MatchResult(energy, grad, ws, term_A, term_B)
    return MatchResult(energy, grad, ws)


def matching_energy(template: ODFField, target: ODFField, phi1) -> float:
    """Unweighted matching term (the objective multiplies it by lambda)."""
    return match(template, target, phi1).energy


def grad_E_phi1(template: ODFField, target: ODFField, phi1, terms: str = "full") -> np.ndarray:
    """Gradient of the matching term with respect to the endpoint positions.

    ``terms="A"`` keeps only the spatial and determinant parts (no
    reorientation sensitivity), ``terms="B"`` only the reorientation part.
    The partial variants are diagnostics, not registration modes.
    """
    if terms not in _TERMS:
        raise ValueError(f"terms must be one of {_TERMS}")
    res = match(template, target, phi1, gradient=True, split_terms=True)
    return {"full": res.gradient, "A": res.term_A, "B": res.term_B}[terms]


def u_vectors(A, psi, sampling, step: float = FD_STEP) -> np.ndarray:
    """u-vector at every sampling direction for one affine map, shape (N_S, 3).

    ``u = -sqrt(det A^-1) A^-T grad g(A^-1 s)`` where
    ``g(x) = psi(x / |x|) |x|^-3/2`` and the ambient gradient uses central
    differences with ``step``.
    """
    Ainv, det = check_affine(A)
    psi = np.asarray(psi, dtype=float)[None]
    lookup = _Lookup(psi, sampling)
    _, _, u = _reorient_raw(Ainv, det, lookup, np.arange(1), with_u=True, step=step)
    return u[0]


def l_matrix(A, psi, sampling, step: float = FD_STEP) -> np.ndarray:
    """Columns ``L^i(s) = (A^-1 s) u_i(s) - (A psi)(s) w^i / 2`` at every direction.

    Returns shape (N_S, 3, 3) indexed ``[s, i, :]``; ``w^i`` is column ``i`` of
    ``A^-1`` and ``A psi`` the reoriented values before renormalisation.
    """
    Ainv, det = check_affine(A)
    psi = np.asarray(psi, dtype=float)[None]
    lookup = _Lookup(psi, sampling)
    raw, st, u = _reorient_raw(Ainv, det, lookup, np.arange(1), with_u=True, step=step)
    return (np.einsum("ki,kb->kib", u[0], st[0])
            - 0.5 * raw[0][:, None, None] * Ainv[0].T[None, :, :])
