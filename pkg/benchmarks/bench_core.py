"""Compare the compiled and NumPy batchnorm kernels.

Usage: python3 benchmarks/bench_core.py [--width 1000] [--batch 8 16 64] [--repeat 50]

Prints the median time per call of the forward normalization and of the
vector-Jacobian product for both backends, and their ratio.  Also checks
that the two backends agree.
"""
import argparse
import statistics
import time

import numpy as np

from bnmf import _core_py

try:
    from bnmf import _core
except ImportError:  # extension not built
    _core = None


def timeit(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--width", type=int, default=1000)
    p.add_argument("--batch", type=int, nargs="+", default=[8, 16, 64])
    p.add_argument("--repeat", type=int, default=50)
    args = p.parse_args(argv)
    if _core is None:
        print("compiled core not built; only the NumPy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'B':>4} {'kernel':>8} {'numpy [us]':>12} {'cython [us]':>12} {'speedup':>8}")
    for B in args.batch:
        H = rng.standard_normal((args.width, B))
        G = rng.standard_normal((args.width, B))
        Y, inv = _core_py.bn_forward(H)
        cases = {
            "forward": (lambda m: (lambda: m.bn_forward(H, 0.0))),
            "vjp": (lambda m: (lambda: m.bn_vjp(G, Y, inv))),
        }
        for name, make in cases.items():
            t_py = timeit(make(_core_py), args.repeat)
            if _core is None:
                print(f"{B:>4} {name:>8} {t_py * 1e6:12.1f} {'-':>12} {'-':>8}")
                continue
            t_c = timeit(make(_core), args.repeat)
            print(f"{B:>4} {name:>8} {t_py * 1e6:12.1f} {t_c * 1e6:12.1f} {t_py / t_c:8.2f}")
        if _core is not None:
            Yc, invc = _core.bn_forward(H, 0.0)
            assert np.allclose(Yc, Y) and np.allclose(invc, inv)
            assert np.allclose(_core.bn_vjp(G, Y, inv), _core_py.bn_vjp(G, Y, inv))


if __name__ == "__main__":
    main()
