"""Compare the numba kernels with their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--dim 512] [--batch 1 8 64] [--repeat 7]

Prints one row per kernel, encoding and batch size with the best-of-N wall
time of each path and the speed-up. The numpy path is the one selected by
``BITTRAJ_NO_NUMBA=1``.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from bittraj import kernels


def best_ms(fn, repeat: int) -> float:
    fn()  # compile / warm caches
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number * 1e3


def cases(dim: int, batches, rng):
    t = rng.integers(-1, 2, size=(dim, dim)).astype(np.int8)
    packed = {"two_bit": kernels.pack_two_bit(t), "base243": kernels.pack_base243(t)}
    unpackers = {"two_bit": kernels.unpack_two_bit, "base243": kernels.unpack_base243}
    packers = {"two_bit": kernels.pack_two_bit, "base243": kernels.pack_base243}
    for enc in ("two_bit", "base243"):
        yield f"pack {enc}", 0, lambda enc=enc: packers[enc](t)
        yield f"unpack {enc}", 0, lambda enc=enc: unpackers[enc](packed[enc], dim)
        for b in batches:
            x = rng.normal(size=(b, dim))
            yield f"matmul {enc}", b, lambda enc=enc, x=x: kernels.ternary_matmul(x, packed[enc], dim, enc)
    for b in batches:
        x = rng.normal(size=(b, dim))
        yield "fake_quant int8", b, lambda x=x: kernels.fake_quant(x, 20.0, -128, 127)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dim", type=int, default=512)
    ap.add_argument("--batch", type=int, nargs="+", default=[1, 8, 64])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args(argv)
    if not kernels._HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'batch':>6}{'numba ms':>12}{'numpy ms':>12}{'speed-up':>10}")
    for name, batch, fn in cases(args.dim, args.batch, rng):
        times = {}
        for use in (True, False):
            kernels.USE_NUMBA = use
            times[use] = best_ms(fn, args.repeat)
        kernels.USE_NUMBA = True
        print(f"{name:<18}{batch or '-':>6}{times[True]:>12.3f}{times[False]:>12.3f}"
              f"{times[False] / times[True]:>9.1f}x")


if __name__ == "__main__":
    main()
