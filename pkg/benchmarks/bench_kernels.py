"""Time every hot kernel under numba and under the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

Both flavours are called directly (the env flag only picks the default), so
one process measures both. The numba column excludes compilation: each
kernel is warmed up once before timing.
"""

import argparse
import math
import time

import numpy as np

from lidarvpr import kernels
from lidarvpr.simworld import generate_environment


def _cases(quick: bool):
    rng = np.random.default_rng(0)
    grid = generate_environment(0, 256 if quick else 512, 256 if quick else 512, 0.15).cells
    free = np.argwhere(~grid)
    oy, ox = free[len(free) // 2] + 0.5
    bearings = np.arange(128) * (2 * math.pi / 128)
    n = 64 if quick else 128
    t = np.linspace(0, 2 * math.pi, n, endpoint=False)
    a = np.stack([40 * np.cos(t), 25 * np.sin(t)], axis=1) + rng.normal(0, 0.5, (n, 2))
    c, s = math.cos(0.4), math.sin(0.4)
    b = a @ np.array([[c, -s], [s, c]]).T + [3.0, -2.0]
    pre = rng.normal(size=(21, 128, 128)).astype(np.float32)
    mask = rng.random((21, 128)) < 0.9
    mask[:, 0] = True
    rows = rng.integers(0, 500, size=2000)
    vals = rng.normal(size=(2000, 64)).astype(np.float32)
    costs = np.empty(31)
    return {
        "raycast": (grid, float(ox), float(oy), bearings, 256.0),
        "nn": (a, b),
        "icp": (a, b, 0.0, 30, 1e-9, costs),
        "chamfer": (a, b),
        "masked_argmax": (pre, mask),
        "scatter_rows": (rows, vals, 500),
    }


def _time(fn, args, repeat):
    fn(*args)
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller inputs (used by the smoke test)")
    args = ap.parse_args(argv)
    fast = kernels.numba_impl()
    rows = []
    print(f"{'kernel':<15}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, case in _cases(args.quick).items():
        t_nb = _time(fast[name], case, args.repeat)
        t_np = _time(kernels.NUMPY_IMPL[name], case, args.repeat)
        rows.append((name, t_nb, t_np))
        print(f"{name:<15}{t_nb * 1e3:>12.3f}{t_np * 1e3:>12.3f}{t_np / t_nb:>10.1f}")
    return rows


if __name__ == "__main__":
    main()
