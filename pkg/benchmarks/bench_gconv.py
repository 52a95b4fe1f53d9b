"""Time the compiled and numpy gconv kernels on one mesh level.

    python benchmarks/bench_gconv.py --subdiv 4 --channels 16 --repeats 5
"""

import argparse
import time

import numpy as np

from surfcnn import kernels, shapes
from surfcnn.convops import build_patches
from surfcnn.hierarchy import make_level


def best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subdiv", type=int, default=4, help="icosphere subdivision level")
    ap.add_argument("--N", type=int, default=4)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)

    lv = make_level(shapes.icosphere(args.subdiv), args.N, 0.01)
    p = build_patches(lv.mesh, lv.atlas)
    V, C, N = p.n_vertices, args.channels, args.N
    rng = np.random.default_rng(0)
    wn, mono, _ = p.as_dtype(np.float64)
    x = rng.normal(size=(N, V, C))
    W = rng.normal(size=(C, C, 10))
    gy = rng.normal(size=(N, V, C))

    results = {}
    for name, (fwd, bwd) in kernels.backends().items():
        out = np.empty((N, V, C))

        def run_fwd():
            fwd(p.ptr, p.nbr, p.offsets, wn, mono, x, W, out)

        def run_bwd():
            bwd(p.ptr, p.nbr, p.offsets, wn, mono, x, W, gy, np.zeros_like(x), np.zeros_like(W))

        run_fwd()
        results[name] = (best_of(run_fwd, args.repeats), best_of(run_bwd, args.repeats), out.copy())

    print(f"V={V} N={N} C={C} patch entries={len(p.nbr)} (default backend: {kernels.BACKEND})")
    print(f"{'backend':<8} {'forward ms':>11} {'backward ms':>12}")
    for name, (tf, tb, _) in results.items():
        print(f"{name:<8} {tf * 1e3:11.2f} {tb * 1e3:12.2f}")
    if len(results) == 2:
        (tf0, tb0, y0), (tf1, tb1, y1) = results["python"], results["cython"]
        print(f"speedup  {tf0 / tf1:11.2f}x {tb0 / tb1:11.2f}x   max |diff| {np.abs(y0 - y1).max():.2e}")


if __name__ == "__main__":
    main()
