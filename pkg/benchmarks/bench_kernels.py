"""Time the numba and numpy convolution kernels against each other.

Part 1 calls both flavours of every kernel directly on layer shapes from the
desk model (batch 32, 64x64 input). Part 2 runs a few full training steps in
two subprocesses, one per ``LDR_NUMBA`` setting, so the dispatch switch is
exercised exactly as a user would flip it.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--steps 5] [--json out.json]
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from ldrnet.numerics import kernels as K

# (name, padded NHWC input, kernel hw, channels out or None for depthwise, stride, out hw)
SHAPES = [
    ("stem 3x3 s2", (32, 65, 65, 3), 3, 16, 2, 32),
    ("dw 3x3 s1 @32", (32, 34, 34, 96), 3, None, 1, 32),
    ("dw 3x3 s2 @16", (32, 33, 33, 192), 3, None, 2, 16),
    ("dw 3x3 s1 @8", (32, 10, 10, 384), 3, None, 1, 8),
]

STEP_SNIPPET = """
import time
from ldrnet import data as D, train as T, _accel
samples = D.generate_dataset(D.SceneConfig(seed=0), 32 * {steps})
cfg = T.TrainConfig(epochs=1, batch_size=32, milestones=(), eval_every=0)
T.train(cfg, samples[:32])  # numba compilation and cache load
t = time.perf_counter()
T.train(cfg, samples)
print(_accel.backend_name(), (time.perf_counter() - t) / {steps} * 1000)
"""


def best_of(fn, repeats):
    fn()  # warm-up, triggers numba compilation
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times) * 1000, float(np.median(times)) * 1000


def _as_tuple(out):
    return out if isinstance(out, tuple) else (out,)


def kernel_cases(rng):
    for name, shape, k, cout, stride, o in SHAPES:
        xp = rng.random(shape, dtype=np.float32)
        c = shape[-1]
        if cout is None:
            kern = rng.random((k, k, c), dtype=np.float32)
            g = rng.random((shape[0], o, o, c), dtype=np.float32)
            yield (f"{name} forward", lambda xp=xp, kern=kern: K.dw_forward_numpy(xp, kern, stride, o, o),
                   lambda xp=xp, kern=kern: K.dw_forward_numba(xp, kern, stride, o, o))
            yield (f"{name} backward", lambda xp=xp, kern=kern, g=g: K.dw_backward_numpy(xp, kern, g, stride),
                   lambda xp=xp, kern=kern, g=g: K.dw_backward_numba(xp, kern, g, stride))
        else:
            cols = rng.random((shape[0] * o * o, k * k * c), dtype=np.float32)
            yield (f"{name} im2col", lambda xp=xp: K.im2col_numpy(xp, k, k, stride, o, o),
                   lambda xp=xp: K.im2col_numba(xp, k, k, stride, o, o))
            yield (f"{name} col2im", lambda cols=cols: K.col2im_numpy(cols, shape, k, k, stride, o, o),
                   lambda cols=cols: K.col2im_numba(cols, shape, k, k, stride, o, o))


def training_step_ms(use_numba, steps):
    env = dict(os.environ, LDR_NUMBA="1" if use_numba else "0", OMP_NUM_THREADS="1",
               OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[-2], float(out[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--steps", type=int, default=10, help="training steps per backend, 0 to skip")
    ap.add_argument("--json")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<28}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, f_np, f_nb in kernel_cases(rng):
        for a, b in zip(_as_tuple(f_np()), _as_tuple(f_nb())):
            np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-3)
        t_np, _ = best_of(f_np, args.repeats)
        t_nb, _ = best_of(f_nb, args.repeats)
        rows.append({"kernel": name, "numpy_ms": t_np, "numba_ms": t_nb, "speedup": t_np / t_nb})
        print(f"{name:<28}{t_np:>10.2f}{t_nb:>10.2f}{t_np / t_nb:>8.2f}x")

    steps = {}
    if args.steps:
        for flag in (False, True):
            backend, ms = training_step_ms(flag, args.steps)
            steps[backend] = ms
        print(f"\ntraining step, batch 32: numpy {steps['numpy']:.1f} ms, numba {steps['numba']:.1f} ms "
              f"({steps['numpy'] / steps['numba']:.2f}x)")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "train_step_ms": steps}, fh, indent=1)


if __name__ == "__main__":
    main()
