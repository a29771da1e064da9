import numpy as np
import pytest

from odfreg.sphere import SphereSampling


@pytest.fixture(scope="session")
def S42():
    return SphereSampling.icosahedral(42)


@pytest.fixture(scope="session")
def S162():
    return SphereSampling.icosahedral(162)


def random_odfs(rng, n, sampling, spread=1.0):
    """Positive unit-norm functions: exp of a random smooth-ish field."""
    raw = np.exp(spread * rng.normal(size=(n, len(sampling))) * 0.5)
    return raw / np.sqrt(raw**2 @ sampling.weights)[:, None]


def watson_sqrt(axis, kappa, sampling):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    p = np.exp(kappa * ((sampling.directions @ axis) ** 2 - 1.0))
    p /= p @ sampling.weights
    return np.sqrt(p)


def rotation(axis, angle):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def report(request):
    """Record one pass/fail line for the acceptance summary and echo it."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def _report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
