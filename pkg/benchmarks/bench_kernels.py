"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from equinv import kernels
from equinv.geometry import fit_tps


def cases(rng):
    grid = rng.normal(size=(48, 48, 480))
    pts = rng.uniform(-0.5, 47.5, size=(2304, 2))
    yield "bilinear 48x48x480, 2304 pts", "bilinear_sample", (grid, pts)
    img = rng.random((96, 96, 3))
    pts = rng.uniform(0, 95, size=(9216, 2))
    yield "bilinear 96x96x3, 9216 pts", "bilinear_sample", (img, pts)
    ctrl = np.stack(np.meshgrid(np.linspace(0, 1, 5), np.linspace(0, 1, 5)), -1).reshape(-1, 2)
    w, a = fit_tps(ctrl, ctrl + rng.normal(0, 0.05, ctrl.shape))
    yield "tps 25 ctrl, 9216 pts", "tps_eval", (rng.random((9216, 2)), ctrl, w, a)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled extension not built; timing numpy only")
    print(f"{'case':34s}" + "".join(f"{name:>12s}" for name in backends) + "     speedup")
    for label, fn, inputs in cases(np.random.default_rng(0)):
        times = {}
        for name, mod in backends.items():
            f = getattr(mod, fn)
            times[name] = min(timeit.repeat(lambda: f(*inputs), number=1, repeat=args.repeat))
        line = f"{label:34s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times.values())
        if "cython" in times:
            line += f"  {times['numpy'] / times['cython']:9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
