import math

import numpy as np
import pytest

from odfreg.evaluation import dice, skl, skl_map, support_mask
from odfreg.fields import ODFField, make_single_fiber, uniform_field
from odfreg.sphere import SphereSampling

from conftest import random_odfs


def test_skl_identity_and_symmetry(S162):
    rng = np.random.default_rng(0)
    p, q = random_odfs(rng, 2, S162, 2.0)
    assert skl(p, p, S162) == 0.0
    assert abs(skl(p, q, S162) - skl(q, p, S162)) <= 1e-14
    assert skl(p, q, S162) > 0


def test_skl_uniform_vs_watson_dense_oracle():
    S = SphereSampling.icosahedral(642)
    kappa = 8.0
    psi = make_single_fiber(0.0, kappa, S)
    val = skl(S.uniform, psi, S)
    # continuous sKL by a 1e6-point integral; Watson normaliser from the same points
    rng = np.random.default_rng(1)
    s = rng.normal(size=(1_000_000, 3))
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    w = np.exp(kappa * (s[:, 0] ** 2 - 1))
    p2 = w / (4 * math.pi * w.mean())
    p1 = 1 / (4 * math.pi)
    ref = 4 * math.pi * np.mean((p1 - p2) * (math.log(p1) - np.log(p2)))
    assert abs(val - ref) < 1e-2


def test_skl_floor_handles_zeros(S42):
    p = np.zeros(42)
    p[:5] = 1.0
    p /= math.sqrt(p**2 @ S42.weights)
    assert np.isfinite(skl(p, S42.uniform, S42))


def test_skl_map_report(S42):
    a = uniform_field((3, 3, 1), S42)
    rep = skl_map(a, a)
    assert rep.mean == 0.0 and np.all(rep.values == 0)
    assert rep.cdf_y[0] == 1.0 and np.all(rep.cdf_y == 1.0)
    vals = a.values.copy()
    vals[0, 0, 0] = make_single_fiber(0.0, 8, S42)
    vals[1, 2, 0] = make_single_fiber(1.0, 3, S42)
    b = ODFField(vals, S42)
    mask = np.zeros((3, 3, 1), bool)
    mask[:2] = True
    rep = skl_map(a, b, mask)
    assert rep.mean == pytest.approx(rep.values[mask].mean(), abs=1e-15)
    assert np.all(np.diff(rep.cdf_y) >= 0) and rep.cdf_y[-1] == 1.0
    assert len(rep.cdf_x) == 256
    with pytest.raises(ValueError):
        skl_map(a, uniform_field((3, 2, 1), S42))


def test_dice_closed_forms():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    b = np.zeros((4, 4), bool)
    b[1:3] = True
    assert dice(a, b) == 0.5
    assert dice(np.zeros(3, bool), np.zeros(3, bool)) == 1.0
    with pytest.raises(ValueError):
        dice(a, a[:2])


def test_support_mask(S42):
    vals = uniform_field((3, 1, 1), S42).values
    vals[1, 0, 0] = make_single_fiber(0.0, 8, S42)
    m = support_mask(ODFField(vals, S42))
    assert m[:, 0, 0].tolist() == [False, True, False]
