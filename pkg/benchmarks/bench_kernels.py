"""Compare the compiled and numpy implementations of the hot loops.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N] [--threads T]``.
Prints median wall time per call for each backend, the speed-up, and the
largest absolute difference between the two results.
"""
import argparse
import statistics
import time

import numpy as np

from odfreg import _pycore
from odfreg.sphere import SphereSampling

try:
    from odfreg import _ccore
except ImportError:
    _ccore = None


def timed(fn, repeat):
    out, times = None, []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return out, statistics.median(times)


def cases(rng):
    # kernel sums: all grid nodes against a foreground support
    for n, m in ((4096, 512), (32768, 3280)):
        x = rng.uniform(0, 32, size=(n, 3))
        y = np.ascontiguousarray(x[:m])
        a = rng.normal(size=(m, 3))
        q = rng.normal(size=(n, 3))
        yield (f"gauss_matvec {n}x{m}",
               lambda mod, x=x, y=y, a=a, t=1: mod.gauss_matvec(x, y, a, 5.0, t))
        yield (f"gauss_adjoint {n}x{m}",
               lambda mod, x=x, y=y, a=a, q=q, t=1: mod.gauss_adjoint(x, y, a, q, 5.0, t))
    # spherical-harmonic synthesis at reoriented directions
    S = SphereSampling.icosahedral(162)
    tables = S._lookup[0]
    coeffs = rng.normal(size=(2048, len(tables.degrees)))
    dirs = rng.normal(size=(2048, 162, 3))
    yield ("sh_synth 2048x162 deg12",
           lambda mod: mod.sh_synth(coeffs, dirs, tables.norm, tables.idx_pos, tables.idx_neg,
                                    tables.qmm, tables.order, 1))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numpy [s]':>12}{'compiled [s]':>14}{'speed-up':>10}{'max |diff|':>13}")
    for name, fn in cases(rng):
        ref, t_py = timed(lambda: fn(_pycore), args.repeat)
        if _ccore is None:
            print(f"{name:<28}{t_py:>12.4f}{'n/a':>14}")
            continue
        out, t_c = timed(lambda: fn(_ccore), args.repeat)
        refs = ref if isinstance(ref, tuple) else (ref,)
        outs = out if isinstance(out, tuple) else (out,)
        diff = max(float(np.max(np.abs(r - o))) for r, o in zip(refs, outs))
        print(f"{name:<28}{t_py:>12.4f}{t_c:>14.4f}{t_py / t_c:>10.1f}{diff:>13.2e}")


if __name__ == "__main__":
    main()
