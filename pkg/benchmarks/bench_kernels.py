"""Compiled kernels vs. the numpy fallback.

Times each kernel on toy-scale shapes, then inpainting sample synthesis and
one curriculum training step under each backend (each runs in a subprocess
so the backend is picked at import, as it is in normal use).

    python benchmarks/bench_kernels.py [--repeat 200]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from prweave import _kernels_py, kernels

SYNTH_SNIPPET = """
import time
from prweave import dataset, kernels
t0 = time.perf_counter()
for i in range(%d):
    dataset.sample_at("mask_inpainting", 0, i)
print(kernels.BACKEND, (time.perf_counter() - t0) / %d * 1e3)
"""

STEP_SNIPPET = """
import time
from dataclasses import replace
from prweave import config, kernels, trainer
cfg = config.load(config.packaged("toy"))
state = trainer.new_state(cfg.model, 0)
stage = replace(cfg.stages[0], iterations=%d)
trainer.grow_expert_pool(state, stage)
t0 = time.perf_counter()
trainer.train_stage(state, stage)
print(kernels.BACKEND, (time.perf_counter() - t0) / stage.iterations * 1e3)
"""


def _cases():
    g = np.random.default_rng(0)
    # stem attention at toy scale: 8 samples, 40 queries over 56 keys, d=32
    q = g.normal(size=(8, 40, 32))
    k = g.normal(size=(8, 56, 32))
    v = g.normal(size=(8, 56, 32))
    _, probs = _kernels_py.attention_forward(q, k, v, 2)
    dout = g.normal(size=q.shape)
    t = np.linspace(0, 2 * np.pi, 20, endpoint=False)
    rows = 8 + 6 * np.cos(t) + g.uniform(-0.5, 0.5, 20)
    cols = 8 + 6 * np.sin(t) + g.uniform(-0.5, 0.5, 20)
    return {
        "attention_forward": lambda m: m.attention_forward(q, k, v, 2),
        "attention_backward": lambda m: m.attention_backward(dout, q, k, v, probs, 2),
        "rasterize_even_odd": lambda m: m.rasterize_even_odd(rows, cols, 16, 16),
        "polygon_is_simple": lambda m: m.polygon_is_simple(rows, cols),
    }


def bench_kernels(repeat):
    compiled = kernels.compiled_module()
    print(f"{'kernel':<20s} {'numpy us':>10s} {'compiled us':>12s} {'speedup':>8s}")
    for name, fn in _cases().items():
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=repeat, repeat=3)) / repeat * 1e6
        if compiled is None:
            print(f"{name:<20s} {py:>10.1f} {'n/a':>12s}")
            continue
        c = min(timeit.repeat(lambda: fn(compiled), number=repeat, repeat=3)) / repeat * 1e6
        print(f"{name:<20s} {py:>10.1f} {c:>12.1f} {py / c:>7.2f}x")


def _per_backend(label, code):
    for flag in ("1", "0"):
        env = dict(os.environ, PRWEAVE_PURE_PYTHON=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"{label} ({out[0]:>8s} backend): {float(out[1]):.3f} ms")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=200)
    p.add_argument("--samples", type=int, default=2000, help="inpainting samples timed per backend")
    p.add_argument("--steps", type=int, default=50, help="training steps timed per backend")
    args = p.parse_args()
    bench_kernels(args.repeat)
    _per_backend("inpainting sample", SYNTH_SNIPPET % (args.samples, args.samples))
    _per_backend("train step", STEP_SNIPPET % args.steps)


if __name__ == "__main__":
    main()
