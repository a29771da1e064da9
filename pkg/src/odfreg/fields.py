"""ODF fields on voxel grids: container, Riemannian interpolation, phantoms, file I/O."""
from __future__ import annotations

import itertools
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .grid import Grid
from .reorient import affine_act
from .sphere import (SphereSampling, exp_map, exp_map_differential, log_map, norm)


@dataclass(eq=False)
class ODFField:
    """Square-root ODFs on a grid.

    Parameters
    ----------
    values : array (nx, ny, nz, N_S)
    sampling : SphereSampling shared by every voxel
    voxel_size : spacing in mm
    mask : optional boolean (nx, ny, nz) foreground mask
    """

    values: np.ndarray
    sampling: SphereSampling
    voxel_size: tuple = (1.0, 1.0, 1.0)
    mask: np.ndarray | None = None
    grid: Grid = field(init=False, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 4:
            raise ValueError("values must have shape (nx, ny, nz, N_S)")
        self.sampling.check(self.values)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        self.grid = Grid(self.values.shape[:3], self.voxel_size)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.dims:
                raise ValueError("mask shape must equal grid dims")

    @property
    def dims(self):
        return self.grid.dims

    @property
    def flat(self) -> np.ndarray:
        """(N, N_S) view in the grid's point order."""
        return self.values.reshape(-1, self.values.shape[-1])

    def validate(self, tol: float = 1e-6):
        """Raise ``ValueError`` unless every voxel is a non-negative unit-norm function."""
        if np.any(self.values < 0):
            raise ValueError("negative square-root ODF values")
        dev = np.abs(norm(self.flat, self.sampling) - 1.0)
        if np.any(dev > tol):
            raise ValueError(f"voxel norm deviates from 1 by {dev.max():.3g}")

    def background(self) -> np.ndarray:
        """Flat boolean array marking voxels that hold exactly the uniform ODF."""
        return np.all(self.flat == self.sampling.uniform, axis=1)

    def like(self, values, mask=None):
        return ODFField(np.asarray(values).reshape(self.values.shape), self.sampling,
                        self.voxel_size, mask)


def uniform_field(dims, sampling, voxel_size=(1.0, 1.0, 1.0)) -> ODFField:
    vals = np.broadcast_to(sampling.uniform, tuple(dims) + (len(sampling),)).copy()
    return ODFField(vals, sampling, voxel_size)


# ---------------------------------------------------------------------------
# spatial derivatives and interpolation


def spatial_log_gradient(fld: ODFField, nodes=None) -> np.ndarray:
    """Log-map gradient of the field at grid nodes.

    Component ``a`` is ``(log_psi psi(x + e_a) - log_psi psi(x - e_a)) / (2 h_a)`` in
    the interior and the one-sided quotient at the boundary; zero along
    singleton axes.  Returns shape (P, 3, N_S) for the flat node indices
    ``nodes`` (all nodes by default).
    """
    g = fld.grid
    vals = fld.flat
    nodes = np.arange(g.n_points) if nodes is None else np.asarray(nodes, dtype=np.intp)
    idx = np.array(np.unravel_index(nodes, g.dims))
    base = vals[nodes]
    out = np.zeros((len(nodes), 3, vals.shape[1]))
    for a in g.active_axes:
        n, h = g.dims[a], g.voxel_size[a]
        up, dn = idx.copy(), idx.copy()
        up[a] = np.minimum(idx[a] + 1, n - 1)
        dn[a] = np.maximum(idx[a] - 1, 0)
        lu = log_map(base, vals[np.ravel_multi_index(up, g.dims)], fld.sampling)
        ld = log_map(base, vals[np.ravel_multi_index(dn, g.dims)], fld.sampling)
        span = (up[a] - dn[a]) * h
        out[:, a] = (lu - ld) / span[:, None]
    return out


_CORNERS = np.array(list(itertools.product((0, 1), repeat=3)))


def interp_spatial(fld: ODFField, points, return_gradient: bool = False, chunk: int = 4096):
    """Riemannian trilinear interpolation at physical points (P, 3).

    The result is ``exp_b(sum_j w_j log_b psi_j)`` over the 8 surrounding nodes,
    with ``b`` the nearest node.  Points outside the grid take the value of the
    nearest boundary position (constant extension).  With ``return_gradient``
    also returns the derivative with respect to the point position, shape
    (P, 3, N_S); it is zero along clamped or singleton axes, and at exact grid
    nodes the central log gradient is used.
    """
    g = fld.grid
    S = fld.sampling
    vals = fld.flat
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = np.array(g.dims)
    c = pts / g.voxel_size
    inside = (c >= 0) & (c <= n - 1)
    c = np.clip(c, 0, n - 1)
    i0 = np.minimum(np.floor(c).astype(np.intp), np.maximum(n - 2, 0))
    f = c - i0
    base = np.minimum(np.floor(c + 0.5).astype(np.intp), n - 1)
    base_flat = np.ravel_multi_index(base.T, g.dims)

    corner_idx = np.minimum(i0[:, None, :] + _CORNERS[None], n - 1)
    corner_flat = np.ravel_multi_index(np.moveaxis(corner_idx, -1, 0), g.dims)
    fac = np.where(_CORNERS[None] == 1, f[:, None, :], 1.0 - f[:, None, :])  # (P, 8, 3)
    w = fac.prod(axis=2)

    out = np.empty((len(pts), vals.shape[1]))
    grad = np.zeros((len(pts), 3, vals.shape[1])) if return_gradient else None

    bg = fld.background()
    trivial = bg[corner_flat].all(axis=1)
    out[trivial] = S.uniform
    work = np.flatnonzero(~trivial)

    active = np.zeros(3, dtype=bool)
    active[g.active_axes] = True
    at_node = np.all((f == 0) | (f == 1) | ~active, axis=1) & inside.all(axis=1)

    for s in range(0, len(work), chunk):
        sel = work[s:s + chunk]
        b = vals[base_flat[sel]]
        logs = log_map(b[:, None, :], vals[corner_flat[sel]], S)  # (p, 8, N_S)
        v = np.einsum("pj,pjk->pk", w[sel], logs)
        out[sel] = exp_map(b, v, S)
        if not return_gradient:
            continue
        dv = np.zeros((len(sel), 3, vals.shape[1]))
        for a in g.active_axes:
            sign = np.where(_CORNERS[:, a] == 1, 1.0, -1.0)
            others = [k for k in range(3) if k != a]
            dw = sign[None, :] * fac[sel][:, :, others].prod(axis=2)
            dv[:, a] = np.einsum("pj,pjk->pk", dw, logs) / g.voxel_size[a]
        dv *= inside[sel][:, :, None]
        grad[sel] = exp_map_differential(b, v, dv, S)

    if return_gradient:
        node_pts = np.flatnonzero(at_node & ~trivial)
        if len(node_pts):
            grad[node_pts] = spatial_log_gradient(fld, base_flat[node_pts])
        return out, grad
    return out


# ---------------------------------------------------------------------------
# synthetic ODFs and phantoms


def fiber_axis(theta: float) -> np.ndarray:
    """Unit vector in the x-y plane at angle ``theta`` (radians) from x."""
    return np.array([np.cos(theta), np.sin(theta), 0.0])


def watson_density(mu, kappa: float, sampling: SphereSampling) -> np.ndarray:
    """Watson density ``exp(kappa (mu.s)^2)`` normalised by quadrature."""
    mu = np.asarray(mu, dtype=float)
    mu = mu / np.linalg.norm(mu)
    p = np.exp(kappa * ((sampling.directions @ mu) ** 2 - 1.0))
    return p / (p @ sampling.weights)


def make_single_fiber(theta: float, kappa: float, sampling: SphereSampling) -> np.ndarray:
    """Square-root Watson ODF with axis at angle ``theta`` (radians) in the x-y plane."""
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    return np.sqrt(watson_density(fiber_axis(theta), kappa, sampling))


def make_crossing(theta1: float, theta2: float, kappa: float, mix: float,
                  sampling: SphereSampling) -> np.ndarray:
    """Square root of ``mix * watson(theta1) + (1 - mix) * watson(theta2)``."""
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    p = (mix * watson_density(fiber_axis(theta1), kappa, sampling)
         + (1.0 - mix) * watson_density(fiber_axis(theta2), kappa, sampling))
    return np.sqrt(p / (p @ sampling.weights))


PHANTOM_KINDS = ("single-fiber", "crossing", "circle-shape", "ellipse-shape",
                 "rotated-odf", "affine-family")


class PhantomSpecError(ValueError):
    """Invalid phantom description (bad key, value or geometry)."""


@dataclass
class PhantomSpec:
    """Parameters of a synthetic phantom.  Angles are in degrees, lengths in voxels.

    ``fiber`` selects the ODF placed in the support: ``single`` (axis ``theta``)
    or ``crossing`` (axes ``theta`` and ``theta2``).  ``rotated-odf`` adds
    ``rotation`` to both angles.  ``affine-family`` ramps the affine
    parameters ``theta_z``, ``rho_y`` and ``varsigma_y`` along x.
    """

    kind: str = "circle-shape"
    dims: tuple = (32, 32, 1)
    voxel_size: tuple = (1.0, 1.0, 1.0)
    n_directions: int = 162
    sh_order: int = -1
    fiber: str = "single"
    theta: float = 0.0
    theta2: float = 90.0
    kappa: float = 8.0
    mix: float = 0.5
    rotation: float = 45.0
    radius: float = 8.0
    radii: tuple = (12.0, 8.0, 8.0)
    center: tuple = ()
    theta_z: float = 90.0
    rho_y: float = 1.0
    varsigma_y: float = 2.0

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise PhantomSpecError(f"kind: unknown phantom kind {self.kind!r}")
        if self.fiber not in ("single", "crossing"):
            raise PhantomSpecError(f"fiber: expected 'single' or 'crossing', got {self.fiber!r}")
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise PhantomSpecError("dims: need three positive integers")
        if self.kappa < 0:
            raise PhantomSpecError("kappa: must be non-negative")
        if not 0 <= self.mix <= 1:
            raise PhantomSpecError("mix: must lie in [0, 1]")
        if self.radius <= 0 or min(self.radii) <= 0:
            raise PhantomSpecError("radius: must be positive")

    def sampling(self) -> SphereSampling:
        order = None if self.sh_order < 0 else self.sh_order
        return SphereSampling.icosahedral(self.n_directions, order)

    @classmethod
    def from_mapping(cls, items: dict) -> "PhantomSpec":
        """Build from string key/value pairs, as read from a spec file."""
        types = {f.name: f.type for f in dc_fields(cls)}
        kw = {}
        for key, raw in items.items():
            if key not in types:
                raise PhantomSpecError(f"{key}: unknown phantom key")
            t = types[key]
            try:
                if t == "tuple":
                    kw[key] = tuple(float(x) for x in raw.replace(",", " ").split())
                elif t == "int":
                    kw[key] = int(raw)
                elif t == "float":
                    kw[key] = float(raw)
                else:
                    kw[key] = raw.strip()
            except ValueError as exc:
                raise PhantomSpecError(f"{key}: cannot parse {raw!r}") from exc
        return cls(**kw)

    def to_mapping(self) -> dict:
        out = {}
        for f in dc_fields(self):
            v = getattr(self, f.name)
            out[f.name] = " ".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
        return out


def _support(spec: PhantomSpec) -> np.ndarray:
    dims = np.array(spec.dims)
    center = (np.array(spec.center, dtype=float) if len(spec.center)
              else (dims - 1) / 2.0)
    if spec.kind == "ellipse-shape":
        radii = np.array(spec.radii, dtype=float)
    else:
        radii = np.full(3, float(spec.radius))
    active = dims > 1
    lo, hi = center - radii, center + radii
    if np.any(active & ((lo < 0) | (hi > dims - 1))):
        key = "radii" if spec.kind == "ellipse-shape" else "radius"
        raise PhantomSpecError(f"{key}: support extends beyond the grid dims {spec.dims}")
    idx = np.indices(spec.dims, dtype=float)
    r2 = sum(((idx[a] - center[a]) / radii[a]) ** 2 for a in range(3) if active[a])
    return r2 <= 1.0


def _affine_family_matrix(t, spec):
    th = np.deg2rad(spec.theta_z) * t
    rot = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1]])
    shear = np.array([[1, 0, 0], [-spec.rho_y * t, 1, 0], [0, 0, 1]])
    scale = np.diag([1.0, 1.0 + (spec.varsigma_y - 1.0) * t, 1.0])
    return rot @ shear @ scale


def make_phantom(spec: PhantomSpec) -> ODFField:
    """Deterministic synthetic field described by ``spec``; uniform ODFs outside the support."""
    S = spec.sampling()
    t1, t2 = np.deg2rad(spec.theta), np.deg2rad(spec.theta2)
    if spec.kind == "rotated-odf":
        t1 += np.deg2rad(spec.rotation)
        t2 += np.deg2rad(spec.rotation)
    fiber = "crossing" if spec.kind == "crossing" else spec.fiber
    if fiber == "crossing":
        psi = make_crossing(t1, t2, spec.kappa, spec.mix, S)
    else:
        psi = make_single_fiber(t1, spec.kappa, S)

    vals = np.broadcast_to(S.uniform, spec.dims + (len(S),)).copy()
    if spec.kind == "single-fiber":
        vals[...] = psi
        mask = np.ones(spec.dims, dtype=bool)
    elif spec.kind == "affine-family":
        nx = spec.dims[0]
        ts = np.linspace(0.0, 1.0, nx) if nx > 1 else np.zeros(1)
        mats = np.stack([_affine_family_matrix(t, spec) for t in ts])
        row = affine_act(mats, np.broadcast_to(psi, (nx, len(S))), S)
        vals[...] = row[:, None, None, :]
        mask = np.ones(spec.dims, dtype=bool)
    else:
        mask = _support(spec)
        vals[mask] = psi
    return ODFField(vals, S, spec.voxel_size, mask)


# ---------------------------------------------------------------------------
# ODFF binary format

MAGIC = b"ODFF"
FORMAT_VERSION = 1


class ODFFormatError(ValueError):
    """Base class for unreadable ODFF files."""


class VersionMismatchError(ODFFormatError):
    pass


class CorruptHeaderError(ODFFormatError):
    pass


class ChecksumError(ODFFormatError):
    pass


def atomic_write_bytes(path, data: bytes):
    """Write via a temporary file in the same directory and rename into place."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_field(fld: ODFField, byteorder: str = "<") -> bytes:
    """Serialise to ODFF bytes.  ``byteorder`` is ``'<'`` or ``'>'``."""
    if byteorder not in "<>":
        raise ValueError("byteorder must be '<' or '>'")
    S = fld.sampling
    header = json.dumps({
        "version": FORMAT_VERSION,
        "dims": list(fld.dims),
        "voxel_size": list(fld.voxel_size),
        "n_directions": len(S),
        "sh_order": S.sh_order,
        "even_only": S.even_only,
        "has_mask": fld.mask is not None,
    }, sort_keys=True).encode("utf-8")
    f8 = np.dtype(byteorder + "f8")
    parts = [MAGIC, b"<>".index(byteorder.encode()).to_bytes(1, "little"),
             struct.pack(byteorder + "I", len(header)), header,
             S.directions.astype(f8).tobytes(), S.weights.astype(f8).tobytes(),
             # x fastest across voxels, direction fastest within a voxel
             np.ascontiguousarray(fld.values.transpose(2, 1, 0, 3)).astype(f8).tobytes()]
    if fld.mask is not None:
        parts.append(np.ascontiguousarray(fld.mask.transpose(2, 1, 0)).astype(np.uint8).tobytes())
    body = b"".join(parts)
    return body + struct.pack(byteorder + "I", zlib.crc32(body))


def decode_field(data: bytes) -> ODFField:
    if len(data) < 9 or data[:4] != MAGIC:
        raise CorruptHeaderError("missing ODFF magic")
    if data[4] not in (0, 1):
        raise CorruptHeaderError(f"bad endianness flag {data[4]}")
    bo = "<>"[data[4]]
    (hlen,) = struct.unpack(bo + "I", data[5:9])
    if 9 + hlen > len(data):
        raise CorruptHeaderError("header truncated")
    try:
        hdr = json.loads(data[9:9 + hlen].decode("utf-8"))
        version = hdr["version"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"unreadable header: {exc}") from exc
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"file version {version}, reader supports {FORMAT_VERSION}")
    try:
        dims = tuple(int(d) for d in hdr["dims"])
        ns = int(hdr["n_directions"])
        nvox = int(np.prod(dims))
        has_mask = bool(hdr["has_mask"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"incomplete header: {exc}") from exc
    off = 9 + hlen
    sizes = [ns * 3 * 8, ns * 8, nvox * ns * 8, nvox if has_mask else 0]
    if off + sum(sizes) + 4 != len(data):
        raise CorruptHeaderError("payload length disagrees with header")
    (crc,) = struct.unpack(bo + "I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError("CRC32 mismatch")
    f8 = np.dtype(bo + "f8")
    chunks = []
    for sz in sizes:
        chunks.append(data[off:off + sz])
        off += sz
    dirs = np.frombuffer(chunks[0], f8).reshape(ns, 3).astype(float)
    weights = np.frombuffer(chunks[1], f8).astype(float)
    nx, ny, nz = dims
    vals = np.frombuffer(chunks[2], f8).reshape(nz, ny, nx, ns).transpose(2, 1, 0, 3).astype(float)
    mask = None
    if has_mask:
        mask = np.frombuffer(chunks[3], np.uint8).reshape(nz, ny, nx).transpose(2, 1, 0).astype(bool)
    S = SphereSampling(dirs, weights, sh_order=int(hdr["sh_order"]),
                       even_only=bool(hdr.get("even_only", True)))
    return ODFField(np.ascontiguousarray(vals), S, tuple(hdr["voxel_size"]), mask)


def save_field(fld: ODFField, path, byteorder: str = "<"):
    atomic_write_bytes(path, encode_field(fld, byteorder))


def load_field(path) -> ODFField:
    with open(path, "rb") as fh:
        return decode_field(fh.read())


def fields_equal(a: ODFField, b: ODFField) -> bool:
    """Bitwise equality of values, geometry and sampling."""
    ma = a.mask if a.mask is not None else None
    mb = b.mask if b.mask is not None else None
    same_mask = (ma is None and mb is None) or (ma is not None and mb is not None
                                                 and np.array_equal(ma, mb))
    return (a.sampling == b.sampling and a.voxel_size == b.voxel_size
            and a.values.shape == b.values.shape and np.array_equal(a.values, b.values)
            and same_mask)

