import math
import warnings

import numpy as np
import pytest

from odfreg.deformation import (InverseResidualError, InverseResidualWarning, KernelParams,
                                MomentumField, adjoint_backward, flow_forward, gram,
                                grad_J, invert_endpoint, kernel_eval, path_energy, velocity)
from odfreg.grid import Grid
from odfreg.reorient import FoldedDeformationError


def test_kernel_examples():
    assert kernel_eval([1, 2, 3], [1, 2, 3], 2.0) == 1.0
    assert abs(kernel_eval([0, 0, 0], [2.0, 0, 0], 2.0) - math.exp(-0.5)) < 1e-15
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 3)) * 3
    G = gram(x, x, 1.5)
    assert np.array_equal(G, G.T)
    assert np.linalg.eigvalsh(G).min() > 0
    with pytest.raises(ValueError):
        KernelParams(0.0)


def test_sigma_in_mm_uses_mean_spacing():
    g = Grid((4, 4, 4), (1.0, 2.0, 3.0))
    assert KernelParams(5.0).sigma_mm(g) == 10.0


def test_velocity_examples():
    g = Grid((2, 1, 1))
    m = MomentumField.zeros(g, T=2)
    pos = np.broadcast_to(g.points(), (3, 2, 3))
    assert np.array_equal(velocity(m, pos, 0, g.points(), 1.0), np.zeros((2, 3)))
    single = Grid((1, 1, 1))
    m1 = MomentumField(np.array([[[1.0, 0, 0]]]), [0], single)
    v = velocity(m1, single.points()[None], 0, single.points(), 1.0)
    assert np.allclose(v, [[1, 0, 0]])
    a = np.zeros((1, 2, 3))
    a[0, 0] = [0, 1, 0]
    a[0, 1] = [0, -1, 0]
    m2 = MomentumField(a, [0, 1], g)
    mid = velocity(m2, g.points()[None], 0, [[0.5, 0, 0]], 1.0)
    assert np.abs(mid).max() < 1e-15


def test_zero_momentum_is_identity():
    g = Grid((4, 3, 2))
    m = MomentumField.zeros(g, T=4)
    traj = flow_forward(m, KernelParams(2.0))
    assert np.array_equal(traj.positions, np.broadcast_to(g.points(), traj.positions.shape))
    assert np.array_equal(traj.jacobians, np.broadcast_to(np.eye(3), traj.jacobians.shape))
    assert path_energy(m, traj, KernelParams(2.0)) == 0.0
    invert_endpoint(m, traj, KernelParams(2.0))
    assert np.array_equal(traj.inverse, g.points())


def test_flow_matches_direct_euler():
    rng = np.random.default_rng(1)
    g = Grid((4, 4, 1))
    m = MomentumField(rng.normal(size=(3, g.n_points, 3)) * 0.01, np.arange(g.n_points), g)
    m.alpha[..., 2] = 0
    sigma = 2.0
    traj = flow_forward(m, KernelParams(sigma))
    x = g.points()
    for t in range(3):
        K = np.exp(-0.5 * ((x[:, None] - x[None]) ** 2).sum(-1) / sigma**2)
        x = x + (1 / 3) * K @ m.alpha[t]
    assert np.abs(traj.endpoint - x).max() < 1e-13


def test_translation_flow_and_inverse():
    g = Grid((5, 5, 5))
    a = np.zeros((10, 1, 3))
    a[:, 0] = [0.3, -0.2, 0.1]
    # one Dirac with a huge kernel moves every point by the same amount
    m = MomentumField(a, [62], g)
    k = KernelParams(1e5)
    traj = flow_forward(m, k)
    assert np.abs(traj.dets - 1).max() < 1e-6
    invert_endpoint(m, traj, k)
    assert np.abs(traj.inverse - (g.points() - [0.3, -0.2, 0.1])).max() < 1e-6
    assert traj.inverse_residual < 1e-6


def test_inverse_residual_small_random():
    rng = np.random.default_rng(2)
    g = Grid((8, 8, 1))
    a = rng.normal(size=(10, g.n_points, 3)) * 0.05
    a[..., 2] = 0
    m = MomentumField(a, np.arange(g.n_points), g)
    k = KernelParams(2.0)
    traj = invert_endpoint(m, flow_forward(m, k), k)
    assert traj.inverse_residual < 0.1


def test_inverse_residual_thresholds():
    g = Grid((6, 6, 1))
    a = np.zeros((2, 1, 3))
    a[:, 0] = [4.0, 0, 0]
    m = MomentumField(a, [14], g)
    k = KernelParams(1.5)
    traj = flow_forward(m, k)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        try:
            invert_endpoint(m, traj, k, warn_at=1e-6, fail_at=1e6)
        except InverseResidualError:
            pytest.fail("should only warn")
    assert any(issubclass(x.category, InverseResidualWarning) for x in w)
    with pytest.raises(InverseResidualError):
        invert_endpoint(m, traj, k, warn_at=1e-9, fail_at=1e-8)


def test_fold_detected():
    g = Grid((6, 1, 1))
    a = np.zeros((1, 2, 3))
    a[0, 0] = [30.0, 0, 0]  # node 1 overtakes node 2
    m = MomentumField(a, [1, 4], g)
    with pytest.raises(FoldedDeformationError) as ei:
        flow_forward(m, KernelParams(0.3))
    assert ei.value.det <= 0


def test_path_energy_closed_form_and_gram():
    g = Grid((1, 1, 1))
    m = MomentumField(np.array([[[3.0, 0, 0]]]), [0], g)
    k = KernelParams(1.0)
    assert path_energy(m, flow_forward(m, k), k) == 9.0
    rng = np.random.default_rng(3)
    g = Grid((4, 3, 1))
    a = rng.normal(size=(4, 6, 3)) * 0.05
    sup = np.array([0, 2, 5, 7, 9, 11])
    m = MomentumField(a, sup, g)
    k = KernelParams(1.7)
    traj = flow_forward(m, k)
    ref = sum(0.25 * np.sum(a[t] * (gram(traj.positions[t][sup], traj.positions[t][sup], 1.7) @ a[t]))
              for t in range(4))
    assert abs(path_energy(m, traj, k) - ref) < 1e-12


def test_adjoint_trivial_cases():
    g = Grid((3, 3, 1))
    m = MomentumField.zeros(g, T=3)
    k = KernelParams(1.0)
    traj = flow_forward(m, k)
    assert np.array_equal(adjoint_backward(m, traj, k, np.zeros((9, 3))), np.zeros((4, 9, 3)))
    G = np.random.default_rng(4).normal(size=(9, 3))
    eta = adjoint_backward(m, traj, k, G)
    assert np.array_equal(eta, np.broadcast_to(G, eta.shape))
    assert np.array_equal(grad_J(m, np.zeros_like(eta), 1.0), np.zeros_like(m.alpha))
    a = np.random.default_rng(5).normal(size=m.alpha.shape)
    assert np.array_equal(grad_J(m.with_alpha(a), eta, 0.0), 2 * a)


def test_adjoint_matches_fd_of_endpoint_functional():
    # J(alpha) = R(alpha) + lam <G, phi_1(alpha)> has Euclidean gradient from the adjoint
    from odfreg.deformation import euclidean_gradient
    rng = np.random.default_rng(6)
    g = Grid((4, 4, 2))
    sup = rng.choice(g.n_points, 12, replace=False)
    a = rng.normal(size=(4, 12, 3)) * 0.1
    m = MomentumField(a, sup, g)
    k = KernelParams(1.5)
    G = rng.normal(size=(g.n_points, 3))
    lam = 0.7

    def J(alpha):
        mm = m.with_alpha(alpha)
        tr = flow_forward(mm, k, check_folds=False)
        return path_energy(mm, tr, k) + lam * np.sum(G * tr.endpoint)

    traj = flow_forward(m, k)
    eta = adjoint_backward(m, traj, k, G, lam)
    ge = euclidean_gradient(m, traj, k, eta, lam)
    for _ in range(10):
        idx = tuple(rng.integers(s) for s in a.shape)
        e = np.zeros_like(a)
        e[idx] = 1e-6
        fd = (J(a + e) - J(a - e)) / 2e-6
        assert abs(fd - ge[idx]) <= 1e-5 * max(1.0, abs(fd))
