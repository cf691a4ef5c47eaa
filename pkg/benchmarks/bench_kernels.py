"""Time the hot kernels and one training step under both backends.

    python benchmarks/bench_kernels.py            # both backends, side by side
    python benchmarks/bench_kernels.py --worker   # current backend only (used internally)

Each backend runs in its own interpreter because the choice is fixed at
import time by MSCAPS_NUMBA.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best(fn, repeat):
    fn()  # warm-up, includes JIT compilation / cache load
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def worker(repeat):
    from mscaps import _kernels as K
    from mscaps.capsnet import margin_loss, network_forward
    from mscaps.tensor import Tensor
    from mscaps import tensor as T
    from mscaps.training import TrainConfig, init_params

    rng = np.random.default_rng(0)
    xp = rng.normal(size=(64, 15, 15, 64))
    cols = K.im2col(xp, 3, 3, 1, 9, 9)
    u = rng.normal(size=(72, 64 * 25, 8, 8)) * 0.3
    _, cs, ss, vs = K.routing_forward(u, 3)
    gv = rng.normal(size=(64 * 25, 8, 8))
    s = rng.normal(size=(200_000, 8))
    x = rng.uniform(size=100_000)
    v = np.array([0.1, 0.5, 0.9])

    params = init_params(0, TrainConfig())
    patches = rng.uniform(size=(64, 9, 9, 1))
    labels = rng.integers(0, 2, size=64)

    def step():
        params.zero_grad()
        loss = T.mean(margin_loss(network_forward(Tensor(patches), params)[2], labels))
        loss.backward()

    cases = {
        "im2col 64x15x15x64 k3 d3": lambda: K.im2col(xp, 3, 3, 1, 9, 9),
        "col2im (adjoint)": lambda: K.col2im(cols, 15, 15, 3, 1),
        "squash 200k x 8": lambda: K.squash_rows(s),
        "fcm memberships 100k x 3": lambda: K.fcm_memberships(x, v, 2.0),
        "routing fwd 72->8x8, 1600 pos": lambda: K.routing_forward(u, 3),
        "routing bwd": lambda: K.routing_backward(u, cs, ss, vs, gv),
        "train step (batch 64, r=9)": step,
    }
    out = {name: _best(fn, repeat) for name, fn in cases.items()}
    print(json.dumps({"backend": K.BACKEND, "times": out}))


def run_backend(flag, repeat):
    env = dict(os.environ, MSCAPS_NUMBA=flag)
    res = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--worker", action="store_true")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if args.worker:
        worker(args.repeat)
        return
    np_res = run_backend("0", args.repeat)
    nb_res = run_backend("1", args.repeat)
    print(f"{'kernel':34s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}")
    for name, t_np in np_res["times"].items():
        t_nb = nb_res["times"][name]
        print(f"{name:34s} {1e3 * t_np:11.2f} {1e3 * t_nb:11.2f} {t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
