"""Registration quality metrics: symmetrised KL divergence between ODFs and Dice overlap."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import ODFField
from .sphere import SphereSampling, distance

#: densities are floored here (then renormalised) before taking logarithms
DENSITY_FLOOR = 1e-10
CDF_BINS = 256


def _density(psi, sampling: SphereSampling):
    p = np.maximum(np.asarray(psi, dtype=float) ** 2, DENSITY_FLOOR)
    return p / (p @ sampling.weights)[..., None]


def skl(psi1, psi2, sampling: SphereSampling):
    """Symmetrised Kullback-Leibler divergence between the densities ``psi1^2`` and ``psi2^2``.

    Broadcasts over leading axes.  Uses ``sum w (p1 - p2) log(p1 / p2)``,
    which equals the sum of both directed divergences and is symmetric in
    floating point.
    """
    sampling.check(psi1, psi2)
    p1, p2 = _density(psi1, sampling), _density(psi2, sampling)
    return np.maximum(((p1 - p2) * (np.log(p1) - np.log(p2))) @ sampling.weights, 0.0)


@dataclass
class SklReport:
    """Per-voxel sKL map, its mean over the mask and an empirical CDF."""

    values: np.ndarray
    mask: np.ndarray
    mean: float
    cdf_x: np.ndarray
    cdf_y: np.ndarray

    def to_mapping(self) -> dict:
        v = self.values[self.mask]
        return {"mean": repr(self.mean), "voxels": str(int(self.mask.sum())),
                "median": repr(float(np.median(v))) if v.size else "nan",
                "max": repr(float(v.max())) if v.size else "nan"}


def skl_map(a: ODFField, b: ODFField, mask=None, bins: int = CDF_BINS) -> SklReport:
    """sKL between corresponding voxels of two fields, summarised over ``mask``."""
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")
    if a.sampling != b.sampling:
        from .sphere import IncompatibleSamplingError
        raise IncompatibleSamplingError("fields use different samplings")
    vals = skl(a.values, b.values, a.sampling)
    mask = np.ones(a.dims, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != a.dims:
        raise ValueError("mask shape must equal grid dims")
    sel = vals[mask]
    mean = float(sel.mean()) if sel.size else 0.0
    top = float(sel.max()) if sel.size else 0.0
    xs = np.linspace(0.0, top, bins)
    ys = (np.searchsorted(np.sort(sel), xs, side="right") / sel.size if sel.size
          else np.ones(bins))
    return SklReport(vals, mask, mean, xs, ys)


def dice(mask_a, mask_b) -> float:
    """``2 |A & B| / (|A| + |B|)``; two empty masks give 1."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("mask shapes differ")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def support_mask(fld: ODFField, threshold: float = 0.1) -> np.ndarray:
    """Voxels whose ODF lies farther than ``threshold`` (geodesic distance) from uniform."""
    S = fld.sampling
    return distance(fld.values, S.uniform, S) > threshold
