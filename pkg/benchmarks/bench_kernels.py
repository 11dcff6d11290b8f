#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the numpy fallback.

Times the four hot kernels on realistic shapes (48^3 grid, the coarse
conv resolution that grid implies) plus one full pipeline step, and
prints a comparison table.

Usage:
    python benchmarks/bench_kernels.py [--repeats N] [--dims N]
"""

import argparse
import importlib.util
import time

import numpy as np


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def benchmark_backend(impl, dims, repeats):
    rng = np.random.default_rng(0)
    nvox = dims[0] * dims[1] * dims[2]
    field = rng.normal(size=(3,) + dims)
    px = rng.uniform(0, dims[0] - 1, nvox)
    py = rng.uniform(0, dims[1] - 1, nvox)
    pz = rng.uniform(0, dims[2] - 1, nvox)
    up = rng.normal(size=(3, nvox))

    coarse = tuple(max(2, d // 4) for d in dims)
    x = rng.normal(size=(16,) + coarse)
    w = rng.normal(size=(16, 16, 3, 3, 3))
    b = rng.normal(size=16)
    g = rng.normal(size=(16,) + coarse)

    return {
        "gather (3ch, full grid)": timeit(lambda: impl.gather(field, px, py, pz), repeats),
        "scatter (3ch, full grid)": timeit(lambda: impl.scatter(dims, px, py, pz, up), repeats),
        "gather_dpoint": timeit(lambda: impl.gather_dpoint(field, px, py, pz), repeats),
        "conv3d fwd (16->16)": timeit(lambda: impl.conv3d_forward(x, w, b), repeats),
        "conv3d bwd params": timeit(lambda: impl.conv3d_backward_params(x, g), repeats),
        "conv3d bwd input": timeit(lambda: impl.conv3d_backward_input(g, w), repeats),
    }


def benchmark_pipeline(dims, repeats):
    """One full objective evaluation (forward + gradients) per backend."""
    import os
    import subprocess
    import sys

    script = (
        "import time, numpy as np\n"
        "from svfreg.engine import AdaptConfig\n"
        "from svfreg.objective import total_loss\n"
        "from svfreg.predictor import Architecture, init_params\n"
        "from svfreg.phantom import make_phantom_pair\n"
        f"case = make_phantom_pair({dims!r}, radial_scale=0.8, seed=0)\n"
        "params = init_params(Architecture(), 0)\n"
        "gen = np.random.default_rng(1)\n"
        "for k in params.blocks:\n"
        "    params.blocks[k] = params.blocks[k] + gen.normal(scale=0.02, size=params.blocks[k].shape)\n"
        "total_loss(case.fixed, case.moving, params)  # warm up\n"
        f"best = min((lambda t0=time.perf_counter(): (total_loss(case.fixed, case.moving, params), time.perf_counter()-t0)[1])() for _ in range({repeats}))\n"
        "print(f'{best:.4f}')\n"
    )
    out = {}
    for backend in ("auto", "cython", "numpy"):
        env = dict(os.environ, SVFREG_BACKEND=backend)
        try:
            res = subprocess.run([sys.executable, "-c", script], env=env,
                                 capture_output=True, text=True, check=True)
            out[backend] = float(res.stdout.strip().splitlines()[-1])
        except subprocess.CalledProcessError:
            out[backend] = None
    return out


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--dims", type=int, default=48)
    args = parser.parse_args()
    dims = (args.dims,) * 3

    from svfreg._kernels import numpy_backend
    have_cython = importlib.util.find_spec("svfreg._kernels._fastcore") is not None

    results = {"numpy": benchmark_backend(numpy_backend, dims, args.repeats)}
    if have_cython:
        from svfreg._kernels import _fastcore
        results["cython"] = benchmark_backend(_fastcore, dims, args.repeats)
    else:
        print("compiled backend not built; benchmarking numpy only")

    names = list(results["numpy"])
    width = max(len(n) for n in names)
    header = f"{'kernel':<{width}}  {'numpy':>10}"
    if have_cython:
        header += f"  {'cython':>10}  {'speedup':>8}"
    print(f"\nkernel timings, best of {args.repeats}, grid {dims}")
    print(header)
    print("-" * len(header))
    for n in names:
        row = f"{n:<{width}}  {results['numpy'][n] * 1e3:>8.2f}ms"
        if have_cython:
            cy = results["cython"][n]
            row += f"  {cy * 1e3:>8.2f}ms  {results['numpy'][n] / cy:>7.2f}x"
        print(row)

    print("\nfull objective evaluation (forward + gradients, one pair):")
    pipe = benchmark_pipeline(dims, max(2, args.repeats // 2))
    for backend, secs in pipe.items():
        print(f"  {backend:<8} {'n/a' if secs is None else f'{secs:.3f}s'}")
    if all(pipe.get(k) for k in ("auto", "numpy")):
        print(f"  speedup  {pipe['numpy'] / pipe['auto']:.2f}x (auto vs numpy)")


if __name__ == "__main__":
    main()
