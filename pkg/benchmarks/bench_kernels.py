"""Time the numba and numpy kernel backends side by side.

    python benchmarks/bench_kernels.py [--batch 64] [--repeat 5]

The first table times each hot kernel on DemoNet-sized feature maps.  The
second runs one full training step of the demo network in a subprocess
per backend, since the backend is fixed at import time.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from graphprune import kernels
from graphprune._jit import HAVE_NUMBA

STEP = """
import json, time
import numpy as np
from graphprune import kernels
from graphprune.engine import Batch, init_params, loss_and_grad
from graphprune.fixtures import load_fixture
g = load_fixture("demonet_s")
store = init_params(g, 0, np.float32)
rng = np.random.default_rng(0)
b = Batch(rng.normal(size=({n}, 1, 28, 28)).astype(np.float32), rng.integers(0, 10, {n}))
loss_and_grad(g, store, b)
best = float("inf")
for _ in range({r}):
    t = time.perf_counter()
    loss_and_grad(g, store, b)
    best = min(best, time.perf_counter() - t)
print(json.dumps({{"backend": kernels.BACKEND, "seconds": best}}))
"""


def kernel_cases(n):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n, 16, 28, 28)).astype(np.float32)
    cols = kernels.np_im2col(x, 3, 1, 1)
    pooled, arg = kernels.np_maxpool_forward(x, 3, 1, 1)
    return {
        "im2col": lambda f: f(x, 3, 1, 1),
        "col2im": lambda f: f(cols, x.shape, 3, 1, 1),
        "maxpool_forward": lambda f: f(x, 3, 1, 1),
        "maxpool_backward": lambda f: f(pooled, arg, x.shape, 3, 1, 1),
        "avgpool_forward": lambda f: f(x, 3, 1, 1),
        "avgpool_backward": lambda f: f(pooled, x.shape, 3, 1, 1),
    }


def best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    print(f"kernels, batch {args.batch}, best of {args.repeat} (ms)")
    print(f"{'kernel':<18}{'numpy':>10}{'numba':>10}{'speedup':>9}")
    for name, call in kernel_cases(args.batch).items():
        t_np = best_of(lambda: call(kernels.NUMPY[name]), args.repeat)
        t_nb = best_of(lambda: call(kernels.NUMBA[name]), args.repeat)
        print(f"{name:<18}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>8.1f}x")

    print(f"\nDemoNet-S train step (forward + backward), batch {args.batch}")
    res = {}
    for flag in ("0", "1"):
        env = dict(os.environ, GRAPHPRUNE_NUMBA=flag)
        code = STEP.format(n=args.batch, r=args.repeat)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                             check=True)
        r = json.loads(out.stdout.strip().splitlines()[-1])
        res[r["backend"]] = r["seconds"]
        print(f"  {r['backend']:<6} {1e3 * r['seconds']:9.1f} ms")
    print(f"  speedup {res['numpy'] / res['numba']:.2f}x")


if __name__ == "__main__":
    main()
