"""Time each hot kernel on its numpy and numba paths at training-sized shapes.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes follow a batch of 32 paired inputs (12 positions, 420 dims, 2 heads)
and one 400-TR run of 481 atlas voxels.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from pairseq.numerics.kernels import NUMBA_KERNELS, NUMPY_KERNELS


def cases(rng):
    rows = 32 * 12
    x = rng.standard_normal((rows, 420)).astype(np.float32)
    gamma = np.ones(420, np.float32)
    beta = np.zeros(420, np.float32)
    scores = rng.standard_normal((32 * 2 * 12, 12)).astype(np.float32)
    probs = NUMPY_KERNELS.softmax_rows(scores)
    y, xhat, rstd = NUMPY_KERNELS.layer_norm(x, gamma, beta, 1e-5)
    innov = rng.standard_normal((400, 481))
    z0 = rng.standard_normal(481)
    run = rng.standard_normal((400, 417)) + np.arange(400)[:, None] * 0.01
    return {
        "softmax_rows": (scores,),
        "softmax_rows_backward": (probs, scores),
        "layer_norm": (x, gamma, beta, 1e-5),
        "layer_norm_backward": (x, xhat, rstd, gamma),
        "ar1_filter": (innov, 0.9, z0),
        "detrend_standardize": (run, 1e-9),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for name, call_args in cases(rng).items():
        np_fn = getattr(NUMPY_KERNELS, name)
        nb_fn = getattr(NUMBA_KERNELS, name)
        nb_fn(*call_args)  # compile outside the timing
        t_np = min(timeit.repeat(lambda: np_fn(*call_args), number=args.repeat, repeat=3)) / args.repeat
        t_nb = min(timeit.repeat(lambda: nb_fn(*call_args), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:<24} {t_np * 1e6:>10.1f} {t_nb * 1e6:>10.1f} {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
