"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python3 benchmarks/bench_kernels.py --train    # also a few training steps per path

The training comparison runs each path in a fresh interpreter because the
BWSFT_NUMBA flag is read once at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from bwsft import _kernels as k


def bench(label, fn, number):
    fn()  # warm-up / compile
    best = min(timeit.repeat(fn, number=number, repeat=5)) / number
    return label, best


def kernel_rows(seed=0):
    g = np.random.default_rng(seed)
    x = g.normal(size=(32, 24, 128))
    th = k.gelu_forward_np(x)[1]
    dy = g.normal(size=x.shape)
    z = g.normal(size=(32 * 24, 16))
    n, Lc, Lr = 4096, 8, 16
    u = g.random((n, Lr))
    starts = g.integers(Lc, Lc + Lr, size=n)
    stops = np.minimum(starts + 4, Lc + Lr)
    rates = [g.random(n) for _ in range(3)]

    cases = [
        ("gelu_forward", lambda: k._gelu_forward_nb(x), lambda: k.gelu_forward_np(x), 50),
        ("gelu_backward", lambda: k._gelu_backward_nb(x, th, dy), lambda: k.gelu_backward_np(x, th, dy), 50),
        ("log_softmax", lambda: k._log_softmax_nb(z), lambda: k.log_softmax_np(z), 200),
        ("threshold_regions", lambda: k._threshold_regions_nb(u, Lc, starts, stops, *rates),
         lambda: k.threshold_regions_np(u, Lc, starts, stops, *rates), 50),
    ]
    for name, nb, npf, number in cases:
        _, t_np = bench(name, npf, number)
        _, t_nb = bench(name, nb, number)
        yield name, t_np, t_nb


TRAIN_SNIPPET = """
import time
from bwsft.harness import SyntheticTask, TrainConfig, TrainState, generate_corpus, as_arrays, train_step
from bwsft.harness import default_model_config
from bwsft.model import AdamW, TinyDenoiser
task = SyntheticTask()
P, R = as_arrays(generate_corpus(task)[0])
cfg = TrainConfig("blockwise", steps=60)
st = TrainState(TinyDenoiser(default_model_config(task), seed=0), AdamW(lr=cfg.lr))
for s in range(10):
    train_step(st, cfg, P[:32], R[:32], 60)
t0 = time.perf_counter()
for s in range(50):
    train_step(st, cfg, P[32 * s % 2048:][:32], R[32 * s % 2048:][:32], 60)
print((time.perf_counter() - t0) / 50)
"""


def train_step_time(use_numba: bool) -> float:
    env = dict(os.environ, BWSFT_NUMBA="1" if use_numba else "0")
    out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True,
                         check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", action="store_true", help="also time training steps under both paths")
    args = ap.parse_args()
    if not k.HAVE_NUMBA:
        sys.exit("numba is not available (or BWSFT_NUMBA=0); nothing to compare")
    print(f"{'kernel':<20}{'numpy (ms)':>12}{'numba (ms)':>12}{'speed-up':>10}")
    for name, t_np, t_nb in kernel_rows():
        print(f"{name:<20}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")
    if args.train:
        t_np = train_step_time(False)
        t_nb = train_step_time(True)
        print(f"{'train_step':<20}{t_np * 1e3:>12.1f}{t_nb * 1e3:>12.1f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
