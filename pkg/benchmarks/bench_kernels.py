"""Time the numba and numpy flavours of each hot kernel on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both flavours are always importable; the DECU_NUMBA flag only picks which
one the library dispatches to.
"""

import argparse
import timeit

import numpy as np

from decu import kernels


def cases(rng):
    means = rng.normal(size=(8, 64))
    stds = rng.uniform(0.1, 1.0, size=(8, 64))
    dist = kernels.pairwise_w2_numpy(means, stds)
    w8 = np.full(8, 1 / 8)
    points = rng.normal(size=(4096, 5, 64))
    w5 = np.full(5, 1 / 5)
    y = rng.normal(size=(20000, 4))
    mm = rng.normal(size=(5, 4)) * 3
    var = rng.uniform(0.5, 2.0, size=(5, 4))
    lw = np.log(w5)
    a = rng.uniform(size=(500, 16, 16))
    b = rng.uniform(size=(500, 16, 16))
    return {
        "pairwise_w2 (M=8, d=64)": ("pairwise_w2", (means, stds)),
        "paide_from_distances (M=8)": ("paide_from_distances", (dist, w8)),
        "paide_point_batch (4096 x 5 x 64)": ("paide_point_batch", (points, w5)),
        "mixture_logpdf (20000 x 4, M=5)": ("mixture_logpdf", (y, mm, var, lw)),
        "ssim_batch (500 pairs 16x16)": ("ssim_batch", (a, b, 8, 1e-4, 9e-4)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':38s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for label, (name, inputs) in cases(rng).items():
        f_np = getattr(kernels, name + "_numpy")
        f_nb = getattr(kernels, name + "_numba")
        r_np = np.asarray(f_np(*inputs))
        r_nb = np.asarray(f_nb(*inputs))           # warm-up / compile
        t_np = min(timeit.repeat(lambda: f_np(*inputs), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: f_nb(*inputs), number=1, repeat=args.repeat))
        diff = float(np.max(np.abs(r_np - r_nb)))
        print(f"{label:38s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.1f} {diff:11.2e}")


if __name__ == "__main__":
    main()
