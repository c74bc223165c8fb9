"""Time the numpy and numba kernel tables on training-sized shapes.

Run:  python3 benchmarks/bench_kernels.py [--repeat 200] [--steps 20]

Per-kernel timings use both tables in one process. The end-to-end
training-step timing runs one subprocess per PREFIXCOND_KERNELS value,
since the backend is fixed at import.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from prefixcond.numerics.kernels import NUMBA_KERNELS, NUMPY_KERNELS

STEP_SNIPPET = """
import json, time
from prefixcond.numerics import kernels
from prefixcond.trainer import TrainConfig, Trainer
cfg = TrainConfig(label_train_per_class=20, caption_train=320, caption_test=20,
                  label_test_per_class=2, zeroshot_test_per_class=2, shifted_test_per_class=2, epochs=20)
t = Trainer(cfg)
t.run(3)  # warm-up, includes jit compilation
t0 = time.perf_counter()
t.run({steps})
print(json.dumps({{"backend": kernels.BACKEND, "ms_per_step": 1e3 * (time.perf_counter() - t0) / {steps}}}))
"""


def cases(rng):
    # attention rows: batch 32 x heads 2 x 32 queries, 32 keys; MLP hidden 32 x 32 tokens x 128
    att = rng.normal(size=(2048, 32))
    mask = rng.random((2048, 32)) < 0.8
    mask[:, 0] = True
    ln = rng.normal(size=(1024, 32))
    g, b = rng.normal(size=32), rng.normal(size=32)
    h = rng.normal(size=(1024, 128))
    return {
        "softmax_fwd": ("softmax_fwd", (att, mask)),
        "softmax_bwd": ("softmax_bwd", (NUMPY_KERNELS["softmax_fwd"](att, mask), att)),
        "layernorm_fwd": ("layernorm_fwd", (ln, g, b, 1e-5)),
        "layernorm_bwd": ("layernorm_bwd", (ln, *NUMPY_KERNELS["layernorm_fwd"](ln, g, b, 1e-5)[1:], g)),
        "gelu_fwd": ("gelu_fwd", (h,)),
        "gelu_bwd": ("gelu_bwd", (h, h)),
    }


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    tables = {"numpy": NUMPY_KERNELS}
    if NUMBA_KERNELS is not None:
        tables["numba"] = NUMBA_KERNELS
    rows = []
    for label, (key, args) in cases(rng).items():
        row = {"kernel": label}
        for name, table in tables.items():
            fn = table[key]
            fn(*args)  # compile / warm caches
            row[name] = 1e3 * min(timeit.repeat(lambda: fn(*args), number=repeat, repeat=3)) / repeat
        rows.append(row)
    return rows


def bench_steps(steps):
    out = []
    for backend in ("numpy", "numba"):
        env = dict(os.environ, PREFIXCOND_KERNELS=backend)
        res = subprocess.run(
            [sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env, capture_output=True, text=True, check=True
        )
        out.append(json.loads(res.stdout.strip().splitlines()[-1]))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--skip-steps", action="store_true", help="only time the kernels")
    args = ap.parse_args(argv)

    rows = bench_kernels(args.repeat)
    print(f"{'kernel':<15}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for r in rows:
        nb = r.get("numba", float("nan"))
        print(f"{r['kernel']:<15}{r['numpy']:>10.3f}{nb:>10.3f}{r['numpy'] / nb:>8.1f}x")
    if not args.skip_steps:
        for r in bench_steps(args.steps):
            print(f"train step [{r['backend']}]: {r['ms_per_step']:.1f} ms")


if __name__ == "__main__":
    main()
