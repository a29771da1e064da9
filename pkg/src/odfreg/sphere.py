"""Square-root ODFs on a discretised sphere.

A square-root ODF is stored as its values at the ``N_S`` directions of a
:class:`SphereSampling`; integrals over the sphere are quadrature sums with
the sampling weights.  All manifold operations act on the last array axis and
broadcast over any leading (voxel) axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from math import factorial, pi, sqrt

import numpy as np
from scipy.spatial import SphericalVoronoi

from . import backend

#: below this inner-product gap the log map returns the zero tangent
LOG_EPS = 1e-12
#: tangent norm below which the exponential map uses its series expansion
EXP_EPS = 1e-8
#: minimum degree of the interpolant used for angular lookups in reorientation
LOOKUP_ORDER = 12


class IncompatibleSamplingError(ValueError):
    """Arrays were discretised on different sphere samplings."""


class OutOfChartError(ValueError):
    """Tangent vector longer than pi/2, outside the chart of the exponential map."""


class OutOfOrthantError(ValueError):
    """Pair of functions with non-positive inner product; the log map is undefined."""


class RankDeficientBasisError(ValueError):
    """The spherical-harmonic basis is not of full column rank on the sampling."""


def icosphere(level: int) -> np.ndarray:
    """Vertices of a subdivided icosahedron (12, 42, 162, 642, ... points)."""
    t = (1.0 + sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    pts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = pts[a] + pts[b]
                pts.append(m / np.linalg.norm(m))
                cache[key] = len(pts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(pts)


def sh_degrees(order: int, even_only: bool = True) -> list[tuple[int, int]]:
    """(l, m) pairs of the real SH basis in coefficient order."""
    ls = range(0, order + 1, 2) if even_only else range(order + 1)
    return [(l, m) for l in ls for m in range(-l, l + 1)]


class _SHTables:
    """Lookup tables consumed by the compiled synthesis loop."""

    def __init__(self, order, even_only):
        self.order = order
        self.degrees = sh_degrees(order, even_only)
        n = order + 1
        self.norm = np.zeros((n, n))
        self.idx_pos = -np.ones((n, n), dtype=np.intp)
        self.idx_neg = -np.ones((n, n), dtype=np.intp)
        self.qmm = np.empty(n)
        for m in range(n):
            dfact = 1.0
            for k in range(1, 2 * m, 2):
                dfact *= k
            self.qmm[m] = (-1) ** m * dfact
        for l in range(n):
            for m in range(l + 1):
                c = sqrt((2 * l + 1) / (4 * pi) * factorial(l - m) / factorial(l + m))
                self.norm[l, m] = c if m == 0 else sqrt(2.0) * c
        for j, (l, m) in enumerate(self.degrees):
            if m >= 0:
                self.idx_pos[l, m] = j
            else:
                self.idx_neg[l, -m] = j

    def synth(self, coeffs, dirs):
        coeffs = np.ascontiguousarray(coeffs, dtype=float)
        dirs = np.ascontiguousarray(dirs, dtype=float)
        return backend.sh_synth(coeffs, dirs, self.norm, self.idx_pos, self.idx_neg,
                                self.qmm, self.order)

    def basis(self, dirs):
        """Basis matrix, shape ``dirs.shape[:-1] + (n_coef,)``."""
        dirs = np.asarray(dirs, dtype=float)
        flat = dirs.reshape(1, -1, 3)
        n = len(self.degrees)
        out = np.empty((flat.shape[1], n))
        eye = np.eye(n)
        for j in range(n):
            out[:, j] = self.synth(eye[j:j + 1], flat)[0]
        return out.reshape(dirs.shape[:-1] + (n,))


@dataclass(eq=False)
class SphereSampling:
    """Directions with quadrature weights and a cached real-SH basis.

    Parameters
    ----------
    directions : (N_S, 3) array of unit vectors
    weights : (N_S,) positive quadrature weights summing to 4*pi
    sh_order : maximum SH degree used for angular interpolation
    even_only : restrict the basis to even degrees (antipodally symmetric ODFs)
    """

    directions: np.ndarray
    weights: np.ndarray
    sh_order: int = 6
    even_only: bool = True
    _tables: _SHTables = field(init=False, repr=False)

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.directions.ndim != 2 or self.directions.shape[1] != 3:
            raise ValueError("directions must have shape (N_S, 3)")
        if self.weights.shape != (len(self.directions),):
            raise ValueError("one weight per direction required")
        if np.any(np.abs(np.linalg.norm(self.directions, axis=1) - 1.0) > 1e-12):
            raise ValueError("directions must be unit vectors")
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")
        if abs(self.weights.sum() - 4 * pi) > 1e-6:
            raise ValueError(f"weights sum to {self.weights.sum()}, expected 4*pi")
        if self.sh_order < 0 or (self.even_only and self.sh_order % 2):
            raise ValueError("sh_order must be a non-negative even integer")
        self._tables = _SHTables(self.sh_order, self.even_only)
        if len(self.directions) < self.n_coef:
            raise RankDeficientBasisError(
                f"{len(self.directions)} directions cannot determine {self.n_coef} SH coefficients")
        if np.linalg.matrix_rank(self.sh_basis) < self.n_coef:
            raise RankDeficientBasisError("SH basis is rank deficient on this sampling")

    @classmethod
    def icosahedral(cls, n_directions: int = 162, sh_order: int | None = None,
                    even_only: bool = True):
        """Subdivided-icosahedron sampling with spherical-Voronoi area weights.

        ``n_directions`` must be one of 12, 42, 162, 642, 2562.  The point sets
        are antipodally symmetric, so an even-degree basis sees only
        ``n_directions / 2`` distinct axes; ``sh_order=None`` picks 6, or the
        largest even order the sampling can still determine.
        """
        levels = {12: 0, 42: 1, 162: 2, 642: 3, 2562: 4}
        if n_directions not in levels:
            raise ValueError(f"n_directions must be one of {sorted(levels)}")
        if sh_order is None:
            sh_order = 6
            while len(sh_degrees(sh_order, even_only)) > n_directions // 2:
                sh_order -= 2
        dirs = icosphere(levels[n_directions])
        weights = SphericalVoronoi(dirs).calculate_areas()
        return cls(dirs, weights, sh_order=sh_order, even_only=even_only)

    def __len__(self):
        return len(self.directions)

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, SphereSampling):
            return NotImplemented
        return (self.sh_order == other.sh_order and self.even_only == other.even_only
                and np.array_equal(self.directions, other.directions)
                and np.array_equal(self.weights, other.weights))

    __hash__ = object.__hash__

    @property
    def n_coef(self) -> int:
        return len(self._tables.degrees)

    @property
    def degrees(self):
        return self._tables.degrees

    @cached_property
    def sh_basis(self) -> np.ndarray:
        return self._tables.basis(self.directions)

    @cached_property
    def _fit_matrix(self):
        return np.linalg.pinv(self.sh_basis)

    @property
    def lookup_order(self) -> int:
        """Degree of the smooth interpolant used for off-grid angular lookups."""
        return max(LOOKUP_ORDER, self.sh_order)

    @cached_property
    def _lookup(self):
        """Tables and matrix ``W`` mapping samples to lookup coefficients.

        The coefficients are the order-``sh_order`` least-squares fit plus the
        minimum-roughness (penalty ``l(l+1)``) degree-``lookup_order``
        expansion that interpolates the fit residual at the samples.
        """
        hi = _SHTables(self.lookup_order, self.even_only)
        bh = hi.basis(self.directions)
        l = np.array([d[0] for d in hi.degrees], dtype=float)
        inv_pen = 1.0 / np.where(l == 0, 1.0, l * (l + 1))
        gram = (bh * inv_pen) @ bh.T
        interp = (inv_pen[:, None] * bh.T) @ np.linalg.pinv(gram, rcond=1e-12, hermitian=True)
        embed = np.zeros((len(hi.degrees), self.n_coef))
        pos = {d: j for j, d in enumerate(hi.degrees)}
        for j, d in enumerate(self.degrees):
            embed[pos[d], j] = 1.0
        fit = self._fit_matrix
        W = embed @ fit + interp @ (np.eye(len(self)) - self.sh_basis @ fit)
        return hi, bh, W

    def lookup_coeffs(self, psi):
        """Degree-``lookup_order`` coefficients and the residual they leave at the samples."""
        hi, bh, W = self._lookup
        c = np.asarray(psi, dtype=float) @ W.T
        return c, psi - c @ bh.T

    def lookup_synth(self, coeffs, dirs):
        """Evaluate lookup coefficients (V, n) at directions (V, K, 3)."""
        return self._lookup[0].synth(coeffs, dirs)

    @cached_property
    def uniform(self) -> np.ndarray:
        """Square root of the uniform density, 1/sqrt(4 pi) in every direction."""
        return np.full(len(self), 1.0 / sqrt(4 * pi))

    def check(self, *arrays):
        for a in arrays:
            if np.shape(a)[-1] != len(self):
                raise IncompatibleSamplingError(
                    f"array with {np.shape(a)[-1]} directions used with a {len(self)}-direction sampling")

    def sh_synth(self, coeffs, dirs):
        """Evaluate per-row coefficients at per-row directions.

        ``coeffs`` has shape (V, n_coef) and ``dirs`` shape (V, K, 3); returns (V, K).
        """
        return self._tables.synth(coeffs, dirs)


def inner(a, b, sampling: SphereSampling):
    """Fisher-Rao inner product: quadrature sum of ``a * b``."""
    sampling.check(a, b)
    return np.asarray(a * b) @ sampling.weights


def norm(xi, sampling: SphereSampling):
    return np.sqrt(np.maximum(inner(xi, xi, sampling), 0.0))


def distance(p, q, sampling: SphereSampling):
    """Geodesic distance arccos<p, q> on the unit Hilbert sphere."""
    return np.arccos(np.clip(inner(p, q, sampling), -1.0, 1.0))


def exp_map(p, xi, sampling: SphereSampling):
    """Exponential map at ``p`` applied to the tangent vector ``xi``.

    Raises :class:`OutOfChartError` when ``|xi| > pi/2``.
    """
    p = np.asarray(p, dtype=float)
    xi = np.asarray(xi, dtype=float)
    theta = norm(xi, sampling)
    if np.any(theta > pi / 2 + 1e-12):
        raise OutOfChartError(f"tangent norm {np.max(theta):.6g} exceeds pi/2")
    theta = theta[..., None]
    small = theta < EXP_EPS
    safe = np.where(small, 1.0, theta)
    sinc = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    cos = np.where(small, 1.0 - theta**2 / 2.0, np.cos(theta))
    return cos * p + sinc * xi


def exp_map_differential(p, xi, delta, sampling: SphereSampling):
    """Derivative of ``exp_map(p, xi)`` in the tangent direction ``delta``.

    ``delta`` may carry extra axes between the voxel axes and the direction axis,
    e.g. shape (V, 3, N_S) for three directional derivatives at once.
    """
    extra = np.ndim(delta) - np.ndim(xi)
    xi = np.expand_dims(xi, tuple(range(xi.ndim - 1, xi.ndim - 1 + extra)))
    p = np.expand_dims(p, tuple(range(p.ndim - 1, p.ndim - 1 + extra)))
    theta = norm(xi, sampling)[..., None]
    dot = inner(xi, delta, sampling)[..., None]
    small = theta < EXP_EPS
    t = np.where(small, 1.0, theta)
    sinc = np.where(small, 1.0, np.sin(t) / t)
    # d/dtheta of sin(theta)/theta, divided by theta
    dsinc = np.where(small, -1.0 / 3.0, (np.cos(t) - np.sin(t) / t) / t**2)
    return -sinc * dot * p + dsinc * dot * xi + sinc * delta


def log_map(p, q, sampling: SphereSampling):
    """Logarithm map at ``p`` of ``q``; tangent at ``p`` with norm ``distance(p, q)``.

    Raises :class:`OutOfOrthantError` when ``<p, q> <= 0``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    c = inner(p, q, sampling)
    if np.any(c <= 0):
        raise OutOfOrthantError("log map needs <p, q> > 0")
    c = np.clip(c, -1.0, 1.0)[..., None]
    v = q - c * p
    # re-project to absorb quadrature round-off in the unit norm of p
    v = v - (inner(v, p, sampling) / inner(p, p, sampling))[..., None] * p
    near = c > 1.0 - LOG_EPS
    scale = np.where(near, 0.0, np.arccos(c) / np.sqrt(np.where(near, 1.0, 1.0 - c * c)))
    return scale * v


def project_tangent(p, xi, sampling: SphereSampling):
    """Remove the component of ``xi`` along the base point ``p``."""
    return xi - (inner(xi, p, sampling) / inner(p, p, sampling))[..., None] * p


def normalize(psi, sampling: SphereSampling):
    """Rescale to unit quadrature norm; returns ``(psi_unit, original_norm)``."""
    n = norm(psi, sampling)
    return psi / n[..., None], n


def sh_fit(psi, sampling: SphereSampling, return_residual: bool = False):
    """Least-squares real-SH coefficients of ``psi`` (last axis = directions).

    With ``return_residual`` also returns the RMS fit residual per function.
    """
    sampling.check(psi)
    psi = np.asarray(psi, dtype=float)
    coeffs = psi @ sampling._fit_matrix.T
    if not return_residual:
        return coeffs
    resid = psi - coeffs @ sampling.sh_basis.T
    return coeffs, np.sqrt(np.mean(resid**2, axis=-1))


def sh_eval(coeffs, s, sampling: SphereSampling):
    """Evaluate SH coefficients at direction(s) ``s``.

    ``coeffs`` (..., n_coef) and ``s`` (..., 3) broadcast over leading axes; a
    single direction may be given as a 3-vector.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    s = np.asarray(s, dtype=float)
    lead = np.broadcast_shapes(coeffs.shape[:-1], s.shape[:-1])
    c = np.broadcast_to(coeffs, lead + coeffs.shape[-1:]).reshape(-1, coeffs.shape[-1])
    d = np.broadcast_to(s, lead + (3,)).reshape(-1, 1, 3)
    return sampling.sh_synth(c, d)[:, 0].reshape(lead)
