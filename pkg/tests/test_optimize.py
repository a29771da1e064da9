import math

import numpy as np
import pytest

from odfreg.deformation import MomentumField, KernelParams, flow_forward, path_energy
from odfreg.fields import PhantomSpec, make_phantom
from odfreg.matching import match
from odfreg.optimize import (ConfigError, RegistrationConfig, evaluate_J, line_search_golden,
                             register)


def test_golden_section_finds_quadratic_minimum():
    calls = []

    def f(x):
        calls.append(x)
        return (x - 0.3) ** 2

    eps, fmin, n = line_search_golden(f, 1.0, 1e-3)
    assert abs(eps - 0.3) < 1e-3
    assert fmin == pytest.approx((eps - 0.3) ** 2)
    assert n == len(calls) - 1  # f(0) is not counted


def test_golden_section_monotone_and_infeasible():
    eps, _, _ = line_search_golden(lambda x: -x, 2.0, 0.01)
    assert eps == 2.0
    # every positive step is worse: returns zero
    eps, f0, _ = line_search_golden(lambda x: x, 1.0, 0.01)
    assert eps == 0.0 and f0 == 0.0
    eps, _, _ = line_search_golden(lambda x: (x - 0.2) ** 2 if x < 0.5 else math.inf, 1.0, 1e-3)
    assert abs(eps - 0.2) < 2e-3


@pytest.mark.parametrize("bad", [dict(sigma_V=0), dict(lam=-1), dict(timesteps=1),
                                 dict(max_iterations=-1), dict(line_search_tol=0),
                                 dict(bracket_shrinks=-1), dict(stall_window=0),
                                 dict(threads=-2), dict(sigma_V="wide")])
def test_config_rejects_bad_values(bad):
    with pytest.raises(ConfigError):
        RegistrationConfig(**bad)


def test_config_mapping_aliases_and_required_keys():
    cfg = RegistrationConfig.from_mapping({"lambda": "3.5", "sigma_V": "2", "T": "4"},
                                          required=("lambda", "sigma_V"))
    assert (cfg.lam, cfg.sigma_V, cfg.timesteps) == (3.5, 2.0, 4)
    with pytest.raises(ConfigError, match="sigma_V"):
        RegistrationConfig.from_mapping({"lambda": "1"}, required=("lambda", "sigma_V"))
    with pytest.raises(ConfigError, match="colour"):
        RegistrationConfig.from_mapping({"colour": "red"})
    again = RegistrationConfig.from_mapping(
        {k: v for k, v in cfg.to_mapping().items()})
    assert again == cfg


@pytest.fixture(scope="module")
def small_pair():
    base = dict(kind="circle-shape", dims=(12, 12, 1), radius=3.0, kappa=6.0, n_directions=42)
    a = make_phantom(PhantomSpec(**base))
    b = make_phantom(PhantomSpec(**{**base, "kind": "ellipse-shape", "radii": (4.5, 3.0, 3.0)}))
    return a, b


def test_identical_images_converge_at_once(small_pair):
    a, _ = small_pair
    res = register(a, a, RegistrationConfig(lam=10, sigma_V=2, timesteps=3))
    assert res.iterations == 0 and res.reason == "converged"
    assert np.max(np.abs(res.deformed.values - a.values)) < 1e-10
    assert not np.any(res.momentum.alpha)


def test_zero_lambda_gives_zero_momentum(small_pair):
    a, b = small_pair
    res = register(a, b, RegistrationConfig(lam=0, sigma_V=2, timesteps=3))
    assert res.iterations == 0
    assert not np.any(res.momentum.alpha)
    assert np.allclose(res.trajectory.endpoint, a.grid.points())


def test_registration_decreases_J_monotonically(small_pair):
    a, b = small_pair
    seen = []
    cfg = RegistrationConfig(lam=20, sigma_V=2, timesteps=3, max_iterations=6)
    res = register(a, b, cfg, callback=seen.append)
    Js = [r["J"] for r in res.trace]
    assert all(j1 <= j0 for j0, j1 in zip(Js, Js[1:]))
    assert res.trace[-1]["matching"] < res.trace[0]["matching"]
    assert len(seen) == len(res.trace) - 1 == res.iterations
    assert res.diagnostics["min_det"] > 0
    # the reported J is what evaluate_J gives for the returned momentum
    J, R, E = evaluate_J(res.momentum, a, b, cfg)
    assert J == pytest.approx(Js[-1], rel=1e-12)
    assert J == pytest.approx(R + cfg.lam * E, rel=1e-14)


def test_evaluate_J_decomposition(small_pair):
    a, b = small_pair
    rng = np.random.default_rng(0)
    m = MomentumField(rng.normal(scale=0.05, size=(3, a.grid.n_points, 3)),
                      np.arange(a.grid.n_points), a.grid)
    m.alpha[..., 2] = 0
    cfg = RegistrationConfig(lam=7, sigma_V=2, timesteps=3)
    J, R, E = evaluate_J(m, a, b, cfg)
    kernel = KernelParams(2.0)
    traj = flow_forward(m, kernel)
    assert R == pytest.approx(path_energy(m, traj, kernel), rel=1e-14)
    assert E == pytest.approx(match(a, b, traj.endpoint).energy, rel=1e-14)
    assert R > 0 and J == pytest.approx(R + 7 * E)


def test_mismatched_inputs_rejected(small_pair):
    a, _ = small_pair
    other = make_phantom(PhantomSpec(kind="circle-shape", dims=(12, 11, 1), radius=3.0,
                                     n_directions=42))
    with pytest.raises(ValueError):
        register(a, other)
