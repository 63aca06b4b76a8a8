"""Timing comparison of the numba and numpy kernel backends.

Each case is run in a subprocess with LOGITLAB_BACKEND set, so both
backends are measured from a cold interpreter (numba JIT warm-up is
excluded from the timed region).

Usage: python benchmarks/bench_kernels.py [--batch 64] [--repeats 5]
"""

import argparse
import json
import os
import subprocess
import sys

WORKLOAD = r"""
import json, sys, time
import numpy as np
from logitlab import kernels as K

batch, repeats = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
cases = {
    "conv 1->32 k5 28x28":  ((batch, 1, 28, 28), (32, 1, 5, 5)),
    "conv 32->64 k5 14x14": ((batch, 32, 14, 14), (64, 32, 5, 5)),
}
results = {"backend": K.BACKEND, "batch": batch, "timings_ms": {}}

def best_of(fn):
    fn()  # warm-up (JIT compile + cache effects)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return min(times)

for name, (xshape, wshape) in cases.items():
    x = rng.standard_normal(xshape).astype(np.float32)
    w = rng.standard_normal(wshape).astype(np.float32)
    y, cols = K.conv2d_forward(x, w, 1, 2)
    gy = rng.standard_normal(y.shape).astype(np.float32)
    results["timings_ms"][name + " fwd"] = best_of(
        lambda: K.conv2d_forward(x, w, 1, 2))
    results["timings_ms"][name + " bwd"] = best_of(
        lambda: K.conv2d_backward(x, w, gy, 1, 2, True, True, cols))

x = rng.standard_normal((batch, 32, 28, 28)).astype(np.float32)
p, idx = K.maxpool2d_forward(x, 2)
gp = rng.standard_normal(p.shape).astype(np.float32)
results["timings_ms"]["maxpool 32x28x28 fwd"] = best_of(
    lambda: K.maxpool2d_forward(x, 2))
results["timings_ms"]["maxpool 32x28x28 bwd"] = best_of(
    lambda: K.maxpool2d_backward(gp, idx, x.shape, 2))
print(json.dumps(results))
"""


def run_backend(backend, batch, repeats):
    env = dict(os.environ, LOGITLAB_BACKEND=backend)
    proc = subprocess.run(
        [sys.executable, "-c", WORKLOAD, str(batch), str(repeats)],
        env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    reports = {b: run_backend(b, args.batch, args.repeats)
               for b in ("numba", "numpy")}
    names = reports["numba"]["timings_ms"]
    width = max(len(n) for n in names)
    print(f"batch={args.batch}, best of {args.repeats} runs, times in ms")
    print(f"{'case'.ljust(width)}  {'numba':>9}  {'numpy':>9}  {'ratio':>6}")
    for name in names:
        nb = reports["numba"]["timings_ms"][name]
        np_ = reports["numpy"]["timings_ms"][name]
        print(f"{name.ljust(width)}  {nb:9.2f}  {np_:9.2f}  {np_ / nb:6.2f}")


if __name__ == "__main__":
    main()
