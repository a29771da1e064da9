"""Selection of the compute backend for the hot loops.

The compiled Cython extension is used when it imports; otherwise the numpy
fallback is used.  ``ODFREG_BACKEND=python`` forces the fallback and
``ODFREG_THREADS`` overrides the default thread count.
"""
import os

from . import _pycore

try:
    from . import _ccore
except ImportError:  # extension not built
    _ccore = None

_forced = os.environ.get("ODFREG_BACKEND", "").lower()
if _forced == "python" or _ccore is None:
    core = _pycore
    NAME = "python"
else:
    core = _ccore
    NAME = "cython"

_threads = None


def default_threads():
    env = os.environ.get("ODFREG_THREADS")
    if env:
        return max(1, int(env))
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def get_threads():
    return _threads if _threads is not None else default_threads()


def set_threads(n):
    """Set the worker-thread count used by the compiled loops (``None`` resets)."""
    global _threads
    _threads = None if n is None else max(1, int(n))


def use(name):
    """Switch backend at runtime: ``"cython"`` or ``"python"``."""
    global core, NAME
    if name == "python":
        core, NAME = _pycore, "python"
    elif name == "cython":
        if _ccore is None:
            raise ImportError("compiled extension odfreg._ccore is not built")
        core, NAME = _ccore, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")


def gauss_matvec(x, y, a, sigma):
    return core.gauss_matvec(x, y, a, float(sigma), get_threads())


def gauss_adjoint(x, y, alpha, q, sigma):
    return core.gauss_adjoint(x, y, alpha, q, float(sigma), get_threads())


def sh_synth(coeffs, dirs, norm, idx_pos, idx_neg, qmm, order):
    return core.sh_synth(coeffs, dirs, norm, idx_pos, idx_neg, qmm, int(order), get_threads())
