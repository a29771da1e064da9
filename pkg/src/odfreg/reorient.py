"""Affine reorientation of square-root ODFs and the group action of a deformation.

For an affine map ``A`` the reoriented function is

    (A psi)(s) = sqrt(det A^-1 / |A^-1 s|^3) * psi(A^-1 s / |A^-1 s|),

which keeps the continuous L2 norm equal to one.  The angular lookup uses
the least-squares spherical-harmonic fit of ``psi`` refined by a smooth
higher-degree interpolant of the fit residual (see
:meth:`SphereSampling.lookup_coeffs`), so the identity map reproduces ``psi``
exactly while the lookup stays smooth in ``A``.  Negative values from SH
ringing are clamped to zero and every output is renormalised; the raw norm is
returned as a drift diagnostic.
"""
from __future__ import annotations

import numpy as np

from .sphere import SphereSampling

#: condition number above which a local affine map is rejected
MAX_CONDITION = 1e6
#: ambient finite-difference step for the gradient of the lookup function
FD_STEP = 1e-4


class InvalidAffineError(ValueError):
    """Singular, orientation-reversing or ill-conditioned affine map."""


class FoldedDeformationError(InvalidAffineError):
    """A deformation Jacobian has a non-positive determinant.

    Attributes ``voxel`` (flat index of the worst voxel) and ``det`` (its value).
    """

    def __init__(self, voxel, det):
        self.voxel = int(voxel)
        self.det = float(det)
        super().__init__(f"folded deformation: det = {self.det:.4g} at voxel {self.voxel}")


def _as_batch(A):
    A = np.asarray(A, dtype=float)
    single = A.ndim == 2
    return (A[None] if single else A), single


def check_affine(A, fold_error: bool = False):
    """Validate a batch of matrices; returns ``(A^-1, det A)``."""
    A, _ = _as_batch(A)
    det = np.linalg.det(A)
    bad = det <= 0
    if np.any(bad):
        worst = int(np.argmin(det))
        if fold_error:
            raise FoldedDeformationError(worst, det[worst])
        raise InvalidAffineError(f"affine map {worst} has det {det[worst]:.4g} <= 0")
    cond = np.linalg.cond(A)
    if np.any(~(cond <= MAX_CONDITION)):
        worst = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise InvalidAffineError(f"affine map {worst} has condition number {cond[worst]:.4g}")
    return np.linalg.inv(A), det


def reorient_direction(A, s):
    """``A^-1 s / |A^-1 s|`` for a direction (or array of directions) ``s``."""
    Ainv, _ = check_affine(A)
    t = np.asarray(s, dtype=float) @ Ainv[0].T
    return t / np.linalg.norm(t, axis=-1, keepdims=True)


class _Lookup:
    """Smooth angular interpolants of a batch of functions.

    Rows holding exactly the uniform ODF are evaluated in closed form.
    """

    def __init__(self, psi, sampling: SphereSampling):
        self.sampling = sampling
        self.uniform = np.all(psi == sampling.uniform, axis=1)
        n = len(sampling._lookup[0].degrees)
        self.coeffs, self.resid = np.zeros((len(psi), n)), np.zeros_like(psi)
        gen = ~self.uniform
        if np.any(gen):
            self.coeffs[gen], self.resid[gen] = sampling.lookup_coeffs(psi[gen])

    def g(self, x, sel):
        """``|x|^-3/2 (psi_hat(x / |x|) + r)`` at points x (V, N_S, 3) for rows ``sel``."""
        r = np.linalg.norm(x, axis=-1)
        if np.any(r < 1e-8):
            raise InvalidAffineError("degenerate transformed direction")
        look = np.empty(x.shape[:2])
        uni = self.uniform[sel]
        look[uni] = self.sampling.uniform[0]
        if np.any(~uni):
            rows = sel[~uni]
            look[~uni] = self.sampling.lookup_synth(self.coeffs[rows], x[~uni]) + self.resid[rows]
        return r ** -1.5 * look


def _reorient_raw(Ainv, det, lookup, sel, with_u=False, step=FD_STEP):
    S = lookup.sampling
    st = np.einsum("vij,kj->vki", Ainv, S.directions)
    scale = 1.0 / np.sqrt(det)
    raw = scale[:, None] * lookup.g(st, sel)
    if not with_u:
        return raw, st, None
    grad = np.empty(st.shape)
    for a in range(3):
        e = np.zeros(3)
        e[a] = step
        grad[..., a] = (lookup.g(st + e, sel) - lookup.g(st - e, sel)) / (2 * step)
    # u = -sqrt(det A^-1) A^-T grad g
    u = -scale[:, None, None] * np.einsum("vba,vkb->vka", Ainv, grad)
    return raw, st, u


def affine_act(A, psi, sampling: SphereSampling, return_drift: bool = False,
               chunk: int = 2048):
    """Apply the affine map(s) ``A`` to square-root ODF(s) ``psi``.

    Parameters
    ----------
    A : (3, 3) or (V, 3, 3) array with positive determinant
    psi : (N_S,) or (V, N_S) array
    return_drift : also return ``|raw| - 1``, the norm error before renormalisation

    Returns
    -------
    out : array shaped like ``psi``
    drift : array (V,) or scalar, only with ``return_drift``
    """
    A, single = _as_batch(A)
    psi = np.asarray(psi, dtype=float)
    sampling.check(psi)
    single = single and psi.ndim == 1
    psi = np.broadcast_to(psi, (len(A), psi.shape[-1])) if psi.ndim == 1 else psi
    if len(A) == 1 and len(psi) > 1:
        A = np.broadcast_to(A, (len(psi), 3, 3))
    if len(A) != len(psi):
        raise ValueError("one affine map per ODF required")
    Ainv, det = check_affine(A)
    lookup = _Lookup(psi, sampling)
    out = np.empty(psi.shape)
    drift = np.empty(len(psi))
    for s in range(0, len(psi), chunk):
        sel = np.arange(s, min(s + chunk, len(psi)))
        raw, _, _ = _reorient_raw(Ainv[sel], det[sel], lookup, sel)
        raw = np.maximum(raw, 0.0)
        n = np.sqrt(raw**2 @ sampling.weights)
        out[sel] = raw / n[:, None]
        drift[sel] = n - 1.0
    if single:
        out, drift = out[0], drift[0]
    return (out, drift) if return_drift else out


def group_action(fld, inverse_points, jacobians=None):
    """Deform an ODF field: voxel x receives ``A psi(phi^-1(x))`` with ``A = D phi``.

    Parameters
    ----------
    fld : ODFField
    inverse_points : (N, 3) physical positions ``phi^-1(x)`` of every grid node
    jacobians : optional (N, 3, 3) Jacobians of ``phi`` at ``phi^-1(x)``; by default
        the inverse of the finite-difference Jacobian of ``phi^-1``

    A mask on ``fld`` is carried along with :func:`warp_mask`.

    Raises :class:`FoldedDeformationError` for a non-positive determinant.
    """
    from .fields import interp_spatial

    g = fld.grid
    inv = np.asarray(inverse_points, dtype=float)
    if inv.shape != (g.n_points, 3):
        raise ValueError("need one inverse position per grid node")
    if jacobians is None:
        jinv = g.jacobian(inv)
        dets = np.linalg.det(jinv)
        if np.any(dets <= 0):
            worst = int(np.argmin(dets))
            raise FoldedDeformationError(worst, dets[worst])
        jacobians = np.linalg.inv(jinv)
    jacobians = np.asarray(jacobians, dtype=float)
    dets = np.linalg.det(jacobians)
    if np.any(dets <= 0):
        worst = int(np.argmin(dets))
        raise FoldedDeformationError(worst, dets[worst])
    psi = interp_spatial(fld, inv)
    out = affine_act(jacobians, psi, fld.sampling)
    mask = None if fld.mask is None else warp_mask(fld.mask, g, inv)
    return fld.like(out, mask=mask)


def warp_mask(mask, grid, inverse_points, level: float = 0.5) -> np.ndarray:
    """Pull a boolean mask back through ``inverse_points``.

    The indicator is interpolated trilinearly (constant outside the grid) at
    ``phi^-1(x)`` and thresholded at ``level``.
    """
    from scipy.ndimage import map_coordinates

    m = np.asarray(mask, dtype=float)
    idx = grid.continuous_index(inverse_points).T
    vals = map_coordinates(m, idx, order=1, mode="nearest")
    return (vals >= level).reshape(grid.dims)
