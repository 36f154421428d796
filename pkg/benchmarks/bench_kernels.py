"""Time the compiled and numpy attention kernels on training-shaped batches.

    python3 benchmarks/bench_kernels.py [--repeat 50]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from bimcq._kernels import BACKENDS

SHAPES = [
    # (pairs, keys per pair, width, heads)
    (64, 9, 32, 4),
    (512, 11, 32, 4),
    (4096, 9, 64, 4),
]


def make_inputs(b, s, d, rng):
    q = rng.normal(size=(b, d))
    k = rng.normal(size=(b, s, d))
    v = rng.normal(size=(b, s, d))
    lengths = rng.integers(1, s + 1, size=b).astype(np.int64)
    return q, k, v, lengths


def main(argv=None):
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=50)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"backends: {', '.join(BACKENDS)}")
    print(f"{'shape (B,s,d,H)':<22}{'backend':<9}{'fwd ms':>10}{'bwd ms':>10}{'speedup':>9}")
    for b, s, d, h in SHAPES:
        q, k, v, lengths = make_inputs(b, s, d, rng)
        g = rng.normal(size=(b, d))
        timings = {}
        for name, impl in BACKENDS.items():
            out, w = impl.attention_forward(q, k, v, lengths, h)
            fwd = min(timeit.repeat(lambda: impl.attention_forward(q, k, v, lengths, h), number=1, repeat=args.repeat))
            bwd = min(timeit.repeat(lambda: impl.attention_backward(g, q, k, v, w, lengths, h), number=1, repeat=args.repeat))
            timings[name] = (fwd, bwd, out)
        base = timings["python"]
        for name, (fwd, bwd, out) in timings.items():
            speed = (base[0] + base[1]) / (fwd + bwd)
            diff = float(np.max(np.abs(out - base[2])))
            print(f"{str((b, s, d, h)):<22}{name:<9}{fwd * 1e3:>10.3f}{bwd * 1e3:>10.3f}{speed:>8.2f}x  max|diff| {diff:.1e}")


if __name__ == "__main__":
    main()
