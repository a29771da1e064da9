"""Regular voxel grids and the finite-difference Jacobian of a point map.

Points are stored flattened in C order of ``dims`` (z fastest) and carry
physical coordinates ``index * voxel_size`` in mm.
"""
from __future__ import annotations

import numpy as np


def _diff(f, axis, h):
    """Central differences along ``axis`` with one-sided ends."""
    out = np.empty_like(f)
    n = f.shape[axis]
    sl = lambda a, b: tuple(slice(a, b) if k == axis else slice(None) for k in range(f.ndim))  # noqa: E731
    out[sl(1, n - 1)] = (f[sl(2, n)] - f[sl(0, n - 2)]) / (2 * h)
    out[sl(0, 1)] = (f[sl(1, 2)] - f[sl(0, 1)]) / h
    out[sl(n - 1, n)] = (f[sl(n - 1, n)] - f[sl(n - 2, n - 1)]) / h
    return out


def _diff_adjoint(g, axis, h):
    """Transpose of :func:`_diff` (a discrete negative divergence)."""
    out = np.zeros_like(g)
    n = g.shape[axis]
    sl = lambda a, b: tuple(slice(a, b) if k == axis else slice(None) for k in range(g.ndim))  # noqa: E731
    inner = g[sl(1, n - 1)] / (2 * h)
    out[sl(2, n)] += inner
    out[sl(0, n - 2)] -= inner
    first = g[sl(0, 1)] / h
    out[sl(1, 2)] += first
    out[sl(0, 1)] -= first
    last = g[sl(n - 1, n)] / h
    out[sl(n - 1, n)] += last
    out[sl(n - 2, n - 1)] -= last
    return out


class Grid:
    """A ``dims`` voxel lattice with spacing ``voxel_size`` (mm).

    Axes of length one are treated as singleton: maps never vary along them
    and the matching column of any Jacobian is the unit vector.
    """

    def __init__(self, dims, voxel_size=(1.0, 1.0, 1.0)):
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three positive integers")
        self.voxel_size = np.asarray(voxel_size, dtype=float)
        if self.voxel_size.shape != (3,) or np.any(self.voxel_size <= 0):
            raise ValueError("voxel_size must be three positive numbers")

    def __eq__(self, other):
        return (isinstance(other, Grid) and self.dims == other.dims
                and np.array_equal(self.voxel_size, other.voxel_size))

    def __repr__(self):
        return f"Grid(dims={self.dims}, voxel_size={tuple(self.voxel_size)})"

    @property
    def n_points(self) -> int:
        return int(np.prod(self.dims))

    @property
    def active_axes(self):
        return [a for a in range(3) if self.dims[a] > 1]

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.voxel_size))

    def points(self) -> np.ndarray:
        """Physical coordinates of all nodes, shape (N, 3)."""
        idx = np.indices(self.dims, dtype=float).reshape(3, -1).T
        return idx * self.voxel_size

    def jacobian(self, phi) -> np.ndarray:
        """Finite-difference Jacobian of a point map given at the nodes.

        ``phi`` has shape (N, 3); returns (N, 3, 3) with ``J[i, a, b]`` the
        derivative of component ``a`` along grid axis ``b``.
        """
        f = np.asarray(phi, dtype=float).reshape(self.dims + (3,))
        jac = np.zeros(self.dims + (3, 3))
        for b in range(3):
            if self.dims[b] > 1:
                jac[..., :, b] = _diff(f, b, self.voxel_size[b])
            else:
                jac[..., b, b] = 1.0
        return jac.reshape(-1, 3, 3)

    def jacobian_adjoint(self, C) -> np.ndarray:
        """Transpose of :meth:`jacobian` (ignoring its constant part) applied to C (N, 3, 3)."""
        g = np.asarray(C, dtype=float).reshape(self.dims + (3, 3))
        out = np.zeros(self.dims + (3,))
        for b in range(3):
            if self.dims[b] > 1:
                out += _diff_adjoint(g[..., :, b], b, self.voxel_size[b])
        return out.reshape(-1, 3)

    def continuous_index(self, p) -> np.ndarray:
        return np.asarray(p, dtype=float) / self.voxel_size
