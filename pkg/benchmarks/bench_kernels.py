"""Time each kernel's compiled-loop and numpy flavours on the same inputs.

    python benchmarks/bench_kernels.py [--repeat N]

With ``SEMITRACK_DISABLE_NUMBA=1`` the loop flavour runs as plain Python, which
shows what the compiled path buys.
"""
import argparse
import timeit

import numpy as np

from semitrack import kernels
from semitrack._accel import BACKEND


def cases(rng):
    k, s = 6, 32
    cx, cy = rng.uniform(2, s - 2, k), rng.uniform(2, s - 2, k)
    half = rng.uniform(0.5, 3.0, (2, k))
    area = rng.integers(4, 40, k).astype(np.float64)
    yield "assign_cells", (cx, cy, half[0], half[1], area, s)

    f = rng.normal(size=(s * s, 16))
    labels = rng.integers(-1, 8, s * s).astype(np.int64)
    yield "center_loss", (f, labels, 8)

    a = rng.random((40, 24 * 256)) < 0.05
    b = rng.random((40, 24 * 256)) < 0.05
    yield "st_iou_matrix", (a, b)

    scores = rng.random((60, 80))
    yield "greedy_match", (scores, scores.copy(), 0.3)


def same(x, y) -> bool:
    if isinstance(x, tuple):
        return all(same(u, v) for u, v in zip(x, y))
    return np.allclose(np.asarray(x, dtype=float), np.asarray(y, dtype=float), equal_nan=True)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"backend for the loop flavour: {BACKEND}")
    print(f"{'kernel':<16}{'loop ms':>10}{'numpy ms':>10}{'ratio':>8}  agree")
    for name, inputs in cases(rng):
        loop = getattr(kernels, f"{name}_loop")
        vec = getattr(kernels, f"{name}_numpy")
        ok = same(loop(*inputs), vec(*inputs))  # also triggers compilation
        t_loop = min(timeit.repeat(lambda: loop(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_vec = min(timeit.repeat(lambda: vec(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16}{t_loop:>10.3f}{t_vec:>10.3f}{t_vec / t_loop:>8.2f}  {ok}")


if __name__ == "__main__":
    main()
