import math

import numpy as np
import pytest

from odfreg.fields import ODFField, make_single_fiber
from odfreg.grid import Grid
from odfreg.matching import l_matrix, u_vectors
from odfreg.reorient import (FoldedDeformationError, InvalidAffineError, affine_act,
                             group_action, reorient_direction, warp_mask)
from odfreg.sphere import SphereSampling, distance, sh_eval, sh_fit

from conftest import rotation, watson_sqrt


def test_reorient_direction_examples():
    rng = np.random.default_rng(0)
    s = rng.normal(size=3)
    s /= np.linalg.norm(s)
    assert np.allclose(reorient_direction(np.eye(3), s), s, atol=1e-15)
    R = rotation([1, 2, 3], 0.7)
    assert np.allclose(reorient_direction(R, s), R.T @ s, atol=1e-14)
    assert np.allclose(reorient_direction(np.diag([1, 2, 1]), [0, 1, 0]), [0, 1, 0])
    with pytest.raises(InvalidAffineError):
        reorient_direction(np.diag([1, 0, 1]), s)


def test_affine_identity_exact(S162):
    psi = watson_sqrt([1, 1, 0], 8.0, S162)
    out, drift = affine_act(np.eye(3), psi, S162, return_drift=True)
    assert np.abs(out - psi).max() < 1e-10
    assert abs(drift) < 1e-10


def test_affine_rejects_bad_maps(S42):
    psi = S42.uniform
    with pytest.raises(InvalidAffineError):
        affine_act(np.diag([1, 1, -1]), psi, S42)
    with pytest.raises(InvalidAffineError):
        affine_act(np.diag([1, 1, 1e-7]), psi, S42)


def test_rotation_matches_analytic_band_limited(S162):
    # a band-limited function is reproduced exactly by the lookup
    rng = np.random.default_rng(1)
    c = rng.normal(size=S162.n_coef) * 0.05
    c[0] = 3.0
    psi = S162.sh_basis @ c
    assert psi.min() > 0
    R = rotation([0.3, -1, 0.4], 1.1)
    out, drift = affine_act(R, psi, S162, return_drift=True)
    raw = out * (1 + drift)
    ref = sh_eval(c, S162.directions @ R, S162)  # psi(R^-1 s)
    assert np.abs(raw - ref).max() < 1e-3


def test_scaling_preserves_continuous_mass():
    # dense change-of-variables check: the continuum integral of (A psi)^2 is 1
    S = SphereSampling.icosahedral(162)
    psi = np.sqrt(0.5 * watson_sqrt([1, 0, 0], 4, S) ** 2 + 0.5 * watson_sqrt([0, 1, 0], 4, S) ** 2)
    A = np.diag([1.0, 2.0, 1.0])
    dense = SphereSampling.icosahedral(2562, sh_order=6)
    # evaluate the reoriented function on the dense sampling through the lookup
    c, r = S.lookup_coeffs(psi[None])
    Ainv = np.linalg.inv(A)
    st = dense.directions @ Ainv.T
    look = S.lookup_synth(c, st[None])[0]
    vals = math.sqrt(1 / np.linalg.det(A)) * np.linalg.norm(st, axis=1) ** -1.5 * look
    mass = np.sum(vals**2 * dense.weights)
    assert abs(mass - 1) < 1e-3
    out = affine_act(A, psi, S)
    # scaling y by 2 sharpens mass toward the y axis
    y_axis = np.argmax(S.directions[:, 1])
    assert out[y_axis] > psi[y_axis]


def test_composition_smooth_odfs(S162):
    rng = np.random.default_rng(2)
    psi = watson_sqrt([1, 0.3, 0.2], 2.0, S162)
    for _ in range(5):
        A = rotation(rng.normal(size=3), rng.uniform(0, 3)) @ (np.eye(3) + 0.1 * rng.normal(size=(3, 3)))
        B = rotation(rng.normal(size=3), rng.uniform(0, 3)) @ (np.eye(3) + 0.1 * rng.normal(size=(3, 3)))
        lhs = affine_act(A, affine_act(B, psi, S162), S162)
        rhs = affine_act(A @ B, psi, S162)
        assert np.abs(lhs - rhs).max() < 2e-3


def test_output_is_valid_odf(S42):
    rng = np.random.default_rng(3)
    psi = watson_sqrt([0, 0, 1], 12.0, S42)
    A = rng.normal(size=(20, 3, 3)) + 3 * np.eye(3)
    A[np.linalg.det(A) < 0, :, 0] *= -1
    out = affine_act(A, psi, S42)
    assert np.all(out >= 0)
    assert np.allclose(out**2 @ S42.weights, 1.0, atol=1e-12)


def test_drift_shrinks_with_resolution():
    rng = np.random.default_rng(4)
    U, _, Vt = np.linalg.svd(rng.normal(size=(3, 3)))
    A = U @ np.diag([1.0, 2.0, 4.0]) @ Vt
    A *= np.sign(np.linalg.det(A))
    drifts = []
    for n in (42, 162, 642):
        S = SphereSampling.icosahedral(n)
        _, d = affine_act(A, S.uniform, S, return_drift=True)
        drifts.append(abs(d))
    assert drifts[0] > drifts[1] > drifts[2]


def test_u_vector_closed_form_constant_psi(S162):
    c = S162.uniform[0]
    u = u_vectors(np.eye(3), S162.uniform, S162)
    assert np.abs(u - 1.5 * c * S162.directions).max() < 1e-7


def test_u_vector_richardson_ratio(S162):
    psi = watson_sqrt([1, 0.5, 0], 3.0, S162)
    A = np.diag([1.2, 0.9, 1.1]) @ rotation([0, 0, 1], 0.3)
    ref = u_vectors(A, psi, S162, step=1e-6)
    e1 = np.abs(u_vectors(A, psi, S162, step=2e-2) - ref).max()
    e2 = np.abs(u_vectors(A, psi, S162, step=1e-2) - ref).max()
    assert 3.0 < e1 / e2 < 5.0


def test_u_vector_rotation_equivariance(S162):
    psi = S162.uniform
    R = rotation([1, 1, 0], 0.4)
    u_id = np.linalg.norm(u_vectors(np.eye(3), psi, S162), axis=1)
    u_R = np.linalg.norm(u_vectors(R, psi, S162), axis=1)
    assert np.abs(u_id - u_R).max() < 1e-7


def test_l_matrix_closed_form(S162):
    c = S162.uniform[0]
    L = l_matrix(np.eye(3), S162.uniform, S162)
    s = S162.directions
    ref = c * (1.5 * s[:, :, None] * s[:, None, :] - 0.5 * np.eye(3)[None])
    assert np.abs(L - ref).max() < 1e-7
    rng = np.random.default_rng(5)
    A = np.eye(3) + 0.2 * rng.normal(size=(3, 3))
    assert np.all(np.isfinite(l_matrix(A, watson_sqrt([1, 0, 0], 8, S162), S162)))


def test_l_matrix_parity(S162):
    # L^i(s) is even in s (s~ u is a product of two odd factors), so its
    # quadrature pairing with an odd function vanishes
    psi = watson_sqrt([1, 0.4, 0.1], 5.0, S162)
    L = l_matrix(np.diag([1.1, 0.8, 1.3]), psi, S162)
    odd = S162.directions[:, 0] ** 3
    assert np.abs(np.einsum("k,kib,k->ib", odd, L, S162.weights)).max() < 1e-6


def _field(S, dims=(6, 6, 1)):
    vals = np.empty(dims + (len(S),))
    for idx in np.ndindex(dims):
        vals[idx] = make_single_fiber(0.3 * idx[0] + 0.2 * idx[1], 6.0, S)
    return ODFField(vals, S, (1.0, 1.0, 1.0))


def test_group_action_identity(S42):
    fld = _field(S42)
    out = group_action(fld, fld.grid.points())
    assert np.abs(out.values - fld.values).max() < 1e-10


def test_group_action_integer_translation(S42):
    fld = _field(S42, (8, 6, 1))
    P = fld.grid.points()
    inv = P - np.array([1.0, 0.0, 0.0])
    out = group_action(fld, inv)
    # interior voxels copy their left neighbour
    assert np.abs(out.values[1:] - fld.values[:-1]).max() < 1e-6


def test_group_action_rotation_matches_regenerated_phantom():
    S = SphereSampling.icosahedral(162)
    dims = (9, 9, 1)
    theta = math.pi / 2
    vals = np.broadcast_to(make_single_fiber(0.0, 3.0, S), dims + (162,)).copy()
    fld = ODFField(vals, S)
    g = fld.grid
    R = rotation([0, 0, 1], theta)
    c = (np.array(dims) - 1) / 2
    inv = (g.points() - c) @ R + c
    out = group_action(fld, inv, np.broadcast_to(R, (g.n_points, 3, 3)))
    ref = make_single_fiber(theta, 3.0, S)
    from odfreg.evaluation import skl
    assert skl(out.values, ref, S).max() < 1e-3


def test_group_action_fold_reported(S42):
    fld = _field(S42)
    inv = fld.grid.points().copy()
    inv[:, 0] *= -1
    with pytest.raises(FoldedDeformationError) as ei:
        group_action(fld, inv)
    assert ei.value.det <= 0


def test_warp_mask_identity_and_shift():
    g = Grid((6, 5, 1))
    m = np.zeros(g.dims, bool)
    m[2:4, 1:3] = True
    assert np.array_equal(warp_mask(m, g, g.points()), m)
    shifted = warp_mask(m, g, g.points() - [1, 0, 0])
    assert np.array_equal(shifted[3:5, 1:3], m[2:4, 1:3])
