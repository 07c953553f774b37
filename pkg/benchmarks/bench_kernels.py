"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes follow a default run: 4 classes, 10 latent dims per class,
100 Monte-Carlo draws over a 100-sample labelled pool.
"""

import argparse
import timeit

import numpy as np

from vabal import _kernels as K


def cases(rng):
    z = rng.standard_normal((100 * 100, 40))
    pred = rng.integers(0, 4, (100, 100))
    labels = rng.integers(0, 4, 100)
    counts = rng.integers(0, 500, 4)
    m = rng.random((4, 4)) + np.eye(4)
    P = m / m.sum(axis=0)
    A = 2.0 * (P.T @ P + 0.5 * np.eye(4) + 10.0 * np.ones((4, 4)))
    b = 2.0 * (P.T @ counts + 0.5 * counts + 10.0 * 400)
    step = 1.0 / np.linalg.norm(A, 2)
    x0 = counts.astype(np.float64)
    xhat = rng.random(4) * 100
    avail = np.full(4, 1000, dtype=np.int64)
    return {
        "block_energies": lambda f: f(z, 4, 10, 0),
        "latent_labels": lambda f: f(z, 4, 10, 0),
        "tally": lambda f: f(pred, labels, 4),
        "water_fill": lambda f: f(counts, 400),
        "projected_gradient": lambda f: f(A, b, 0.0, x0, step, 10_000, 1e-8),
        "round_and_fix": lambda f: f(xhat, 200, avail),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, call in cases(rng).items():
        fn_np, fn_nb = getattr(K, f"{name}_np"), getattr(K, f"{name}_nb")
        call(fn_nb)  # compile outside the timed region
        times = []
        for fn in (fn_np, fn_nb):
            number = 20
            best = min(timeit.repeat(lambda: call(fn), number=number, repeat=args.repeat)) / number
            times.append(best * 1e3)
        print(f"{name:<20}{times[0]:>12.4f}{times[1]:>12.4f}{times[0] / times[1]:>9.1f}x")


if __name__ == "__main__":
    main()
