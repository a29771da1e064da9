"""Static glyph pictures of one slice of an ODF field.

Each voxel of the slice becomes a glyph: the sampling directions are
triangulated once (convex hull of the unit vectors), every vertex is pushed
out to radius ``p(s) = psi(s)^2`` (scaled so the largest lobe fills the cell),
and the triangles are projected onto the slice plane and painted back to
front.  Triangles are coloured by the absolute direction components, the
usual red/green/blue = x/y/z convention.
"""
from __future__ import annotations

import io
from functools import lru_cache

import numpy as np
from PIL import Image, ImageDraw
from scipy.spatial import ConvexHull

from .fields import ODFField

AXES = {"x": 0, "y": 1, "z": 2}


class SliceError(ValueError):
    """Bad slice axis or index."""


def parse_slice(spec: str, dims) -> tuple[int, int]:
    """Parse ``"z=16"`` (or ``"z"`` for the middle slice) into ``(axis, index)``."""
    name, _, idx = spec.strip().partition("=")
    name = name.strip().lower()
    if name not in AXES:
        raise SliceError(f"slice axis must be one of x, y, z (got {name!r})")
    axis = AXES[name]
    if not idx.strip():
        return axis, dims[axis] // 2
    try:
        index = int(idx)
    except ValueError:
        raise SliceError(f"slice index {idx!r} is not an integer") from None
    if not 0 <= index < dims[axis]:
        raise SliceError(f"slice index {index} outside 0..{dims[axis] - 1}")
    return axis, index


@lru_cache(maxsize=8)
def _triangles(directions_bytes: bytes, n: int) -> np.ndarray:
    dirs = np.frombuffer(directions_bytes).reshape(n, 3)
    simplices = ConvexHull(dirs).simplices
    # sort for a reproducible triangle order independent of qhull internals
    return np.array(sorted(tuple(sorted(t)) for t in simplices), dtype=np.intp)


def sampling_triangles(sampling) -> np.ndarray:
    d = np.ascontiguousarray(sampling.directions, dtype=float)
    return _triangles(d.tobytes(), len(d))


def glyph_outline(psi, sampling, axis: int = 2) -> np.ndarray:
    """Projected glyph vertices (N_S, 2) in units of the largest radius.

    The vertex for direction ``s`` sits at ``p(s) / max p * s``, dropped onto
    the plane orthogonal to ``axis``.
    """
    p = np.asarray(psi, dtype=float) ** 2
    top = p.max()
    r = p / top if top > 0 else p
    verts = sampling.directions * r[:, None]
    return verts[:, [a for a in range(3) if a != axis]]


def _slice_values(fld: ODFField, axis: int, index: int) -> np.ndarray:
    vals = np.take(fld.values, index, axis=axis)  # (n_u, n_v, N_S)
    return vals


def _glyph_polys(psi, sampling, tris, axis):
    p = np.asarray(psi, dtype=float) ** 2
    top = p.max()
    r = p / top if top > 0 else p
    verts = sampling.directions * r[:, None]
    plane = [a for a in range(3) if a != axis]
    depth = verts[tris, axis].mean(axis=1)
    order = np.argsort(depth, kind="stable")
    colour = np.abs(sampling.directions[tris].mean(axis=1))
    colour /= np.maximum(colour.max(axis=1, keepdims=True), 1e-12)
    return verts[:, plane], tris[order], colour[order]


def render_slice(fld: ODFField, axis: int = 2, index: int | None = None,
                 cell: int = 24) -> Image.Image:
    """Render one slice as an RGB image with ``cell`` pixels per voxel.

    The first in-plane axis runs left to right, the second bottom to top.
    """
    dims = fld.dims
    if not 0 <= axis <= 2:
        raise SliceError("axis must be 0, 1 or 2")
    index = dims[axis] // 2 if index is None else int(index)
    if not 0 <= index < dims[axis]:
        raise SliceError(f"slice index {index} outside 0..{dims[axis] - 1}")
    if cell < 4:
        raise SliceError("cell must be at least 4 pixels")
    S = fld.sampling
    tris = sampling_triangles(S)
    vals = _slice_values(fld, axis, index)
    nu, nv = vals.shape[:2]
    img = Image.new("RGB", (nu * cell, nv * cell), (0, 0, 0))
    draw = ImageDraw.Draw(img)
    half = 0.45 * cell
    for i in range(nu):
        for j in range(nv):
            xy, order, colour = _glyph_polys(vals[i, j], S, tris, axis)
            cx = (i + 0.5) * cell
            cy = (nv - j - 0.5) * cell
            px = cx + half * xy[:, 0]
            py = cy - half * xy[:, 1]
            for t, c in zip(order, colour):
                rgb = tuple(int(round(255 * v)) for v in c)
                draw.polygon([(px[k], py[k]) for k in t], fill=rgb)
    return img


def render_svg(fld: ODFField, axis: int = 2, index: int | None = None,
               cell: int = 24) -> str:
    """Same picture as :func:`render_slice` as an SVG document."""
    dims = fld.dims
    if not 0 <= axis <= 2:
        raise SliceError("axis must be 0, 1 or 2")
    index = dims[axis] // 2 if index is None else int(index)
    if not 0 <= index < dims[axis]:
        raise SliceError(f"slice index {index} outside 0..{dims[axis] - 1}")
    S = fld.sampling
    tris = sampling_triangles(S)
    vals = _slice_values(fld, axis, index)
    nu, nv = vals.shape[:2]
    half = 0.45 * cell
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{nu * cell}" '
           f'height="{nv * cell}" viewBox="0 0 {nu * cell} {nv * cell}">',
           f'<rect width="{nu * cell}" height="{nv * cell}" fill="black"/>']
    for i in range(nu):
        for j in range(nv):
            xy, order, colour = _glyph_polys(vals[i, j], S, tris, axis)
            px = (i + 0.5) * cell + half * xy[:, 0]
            py = (nv - j - 0.5) * cell - half * xy[:, 1]
            for t, c in zip(order, colour):
                pts = " ".join(f"{px[k]:.2f},{py[k]:.2f}" for k in t)
                r, g, b = (int(round(255 * v)) for v in c)
                out.append(f'<polygon points="{pts}" fill="rgb({r},{g},{b})"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def encode_png(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False)
    return buf.getvalue()
