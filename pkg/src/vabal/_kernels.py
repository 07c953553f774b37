"""Loop-shaped numeric kernels with an optional numba backend.

Every kernel exists twice: a pure-numpy reference (``*_np``) and an
``@njit`` version (``*_nb``).  The public names point at the numba
versions when numba imports and ``VABAL_DISABLE_NUMBA`` is unset (or
``0``); otherwise they point at the numpy versions.  Both paths must give
identical results, which the test suite checks.
"""

import os

import numpy as np

VARIANTS = ("square", "absolute", "sigmoid")


def variant_code(variant: str) -> int:
    try:
        return VARIANTS.index(variant)
    except ValueError:
        raise ValueError(f"unknown w-variant {variant!r}; expected one of {VARIANTS}") from None


def _numba_requested() -> bool:
    return os.environ.get("VABAL_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _numba_requested()


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def block_energies_np(z, num_classes, dims_per_class, code):
    """Per-class energies ``w[r, n] = sum_{j in C_n} v(z[r, j])``."""
    blocks = z.reshape(z.shape[0], num_classes, dims_per_class)
    if code == 0:
        v = blocks * blocks
    elif code == 1:
        v = np.abs(blocks)
    else:
        v = 1.0 / (1.0 + np.exp(-blocks))
    return v.sum(axis=2)


def latent_labels_np(z, num_classes, dims_per_class, code):
    # np.argmin returns the first minimum, i.e. the lowest class index on ties
    return np.argmin(block_energies_np(z, num_classes, dims_per_class, code), axis=1).astype(np.int64)


def tally_np(pred, labels, num_classes):
    """Joint counts ``counts[true, predicted]`` over every draw."""
    n_draws = pred.shape[1]
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    true = np.repeat(labels.astype(np.int64), n_draws)
    np.add.at(counts, (true, pred.reshape(-1).astype(np.int64)), 1)
    return counts


def water_fill_np(counts, budget):
    counts = np.asarray(counts, dtype=np.int64)
    k_total = counts.size
    order = np.argsort(counts, kind="stable")
    sorted_counts = counts[order]
    alloc = np.zeros(k_total, dtype=np.int64)
    running = 0
    level = 0
    for k in range(1, k_total + 1):
        running += sorted_counts[k - 1]
        if k == k_total or (budget + running) <= k * sorted_counts[k]:
            level = (budget + running) // k
            for i in range(k):
                alloc[order[i]] = level - sorted_counts[i]
            break
    remainder = budget - alloc.sum()
    filled = counts + alloc
    for _ in range(remainder):
        n = int(np.argmin(filled))
        alloc[n] += 1
        filled[n] += 1
    return alloc


def projected_gradient_np(A, b, const, x0, step, max_iters, tol):
    """Minimise ``0.5 x'Ax - b'x + const`` over ``x >= 0``.

    Accelerated projected gradient with function-value restart: when the
    momentum step would raise the objective it is replaced by a plain
    projected step from the current point and the momentum is reset.  Returns ``(x, iterations,
    objective_trace)`` where the trace holds the objective at the start
    point followed by one entry per iteration.
    """
    x = np.maximum(np.asarray(x0, dtype=np.float64), 0.0)
    y = x.copy()
    t = 1.0
    fx = 0.5 * (x @ (A @ x)) - b @ x + const
    trace = np.empty(max_iters + 1)
    trace[0] = fx
    it = 0
    while it < max_iters:
        g = A @ x - b
        pg = np.where(x > 0.0, g, np.minimum(g, 0.0))
        if np.sqrt(pg @ pg) < tol:
            break
        z = np.maximum(y - step * (A @ y - b), 0.0)
        fz = 0.5 * (z @ (A @ z)) - b @ z + const
        if fz <= fx:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = z + ((t - 1.0) / t_next) * (z - x)
            x, fx, t = z, fz, t_next
        else:
            # restart: plain projected step from x (descent by the 1/L step)
            x = np.maximum(x - step * g, 0.0)
            fx = 0.5 * (x @ (A @ x)) - b @ x + const
            y = x.copy()
            t = 1.0
        it += 1
        trace[it] = fx
    return x, it, trace[: it + 1].copy()


def round_and_fix_np(xhat, budget, available):
    alloc = np.minimum(np.floor(np.asarray(xhat, dtype=np.float64) + 0.5).astype(np.int64), available)
    diff = int(alloc.sum()) - budget
    k = alloc.size
    while diff > 0:
        for n in range(k):
            if diff == 0:
                break
            if alloc[n] > 0:
                alloc[n] -= 1
                diff -= 1
    while diff < 0:
        for n in range(k):
            if diff == 0:
                break
            if alloc[n] < available[n]:
                alloc[n] += 1
                diff += 1
    return alloc


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def block_energies_nb(z, num_classes, dims_per_class, code):
        rows = z.shape[0]
        out = np.zeros((rows, num_classes))
        for r in range(rows):
            for n in range(num_classes):
                acc = 0.0
                base = n * dims_per_class
                for j in range(base, base + dims_per_class):
                    v = z[r, j]
                    if code == 0:
                        acc += v * v
                    elif code == 1:
                        acc += abs(v)
                    else:
                        acc += 1.0 / (1.0 + np.exp(-v))
                out[r, n] = acc
        return out

    @njit(cache=True)
    def latent_labels_nb(z, num_classes, dims_per_class, code):
        w = block_energies_nb(z, num_classes, dims_per_class, code)
        rows = z.shape[0]
        out = np.empty(rows, dtype=np.int64)
        for r in range(rows):
            best = 0
            for n in range(1, num_classes):
                if w[r, n] < w[r, best]:
                    best = n
            out[r] = best
        return out

    @njit(cache=True)
    def tally_nb(pred, labels, num_classes):
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        for i in range(pred.shape[0]):
            y = labels[i]
            for l in range(pred.shape[1]):
                counts[y, pred[i, l]] += 1
        return counts

    @njit(cache=True)
    def water_fill_nb(counts, budget):
        k_total = counts.size
        order = np.argsort(counts, kind="mergesort")
        alloc = np.zeros(k_total, dtype=np.int64)
        running = 0
        for k in range(1, k_total + 1):
            running += counts[order[k - 1]]
            if k == k_total or (budget + running) <= k * counts[order[k]]:
                level = (budget + running) // k
                for i in range(k):
                    alloc[order[i]] = level - counts[order[i]]
                break
        remainder = budget - alloc.sum()
        filled = counts + alloc
        for _ in range(remainder):
            best = 0
            for n in range(1, k_total):
                if filled[n] < filled[best]:
                    best = n
            alloc[best] += 1
            filled[best] += 1
        return alloc

    @njit(cache=True)
    def _quad(A, b, const, x):
        return 0.5 * (x @ (A @ x)) - b @ x + const

    @njit(cache=True)
    def projected_gradient_nb(A, b, const, x0, step, max_iters, tol):
        k = x0.size
        x = np.empty(k)
        for i in range(k):
            x[i] = max(x0[i], 0.0)
        y = x.copy()
        z = np.empty(k)
        t = 1.0
        fx = _quad(A, b, const, x)
        trace = np.empty(max_iters + 1)
        trace[0] = fx
        it = 0
        while it < max_iters:
            g = A @ x - b
            norm2 = 0.0
            for i in range(k):
                p = g[i] if x[i] > 0.0 else min(g[i], 0.0)
                norm2 += p * p
            if np.sqrt(norm2) < tol:
                break
            gy = A @ y - b
            for i in range(k):
                z[i] = max(y[i] - step * gy[i], 0.0)
            fz = _quad(A, b, const, z)
            if fz <= fx:
                t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
                beta = (t - 1.0) / t_next
                for i in range(k):
                    y[i] = z[i] + beta * (z[i] - x[i])
                    x[i] = z[i]
                fx = fz
                t = t_next
            else:
                for i in range(k):
                    x[i] = max(x[i] - step * g[i], 0.0)
                    y[i] = x[i]
                fx = _quad(A, b, const, x)
                t = 1.0
            it += 1
            trace[it] = fx
        return x, it, trace[: it + 1].copy()

    @njit(cache=True)
    def round_and_fix_nb(xhat, budget, available):
        k = xhat.size
        alloc = np.empty(k, dtype=np.int64)
        total = 0
        for n in range(k):
            alloc[n] = min(np.int64(np.floor(xhat[n] + 0.5)), available[n])
            total += alloc[n]
        diff = total - budget
        while diff > 0:
            for n in range(k):
                if diff == 0:
                    break
                if alloc[n] > 0:
                    alloc[n] -= 1
                    diff -= 1
        while diff < 0:
            for n in range(k):
                if diff == 0:
                    break
                if alloc[n] < available[n]:
                    alloc[n] += 1
                    diff += 1
        return alloc


def _pick(name):
    if USE_NUMBA:
        return globals()[name + "_nb"]
    return globals()[name + "_np"]


block_energies = _pick("block_energies")
latent_labels = _pick("latent_labels")
tally = _pick("tally")
water_fill = _pick("water_fill")
projected_gradient = _pick("projected_gradient")
round_and_fix = _pick("round_and_fix")

BACKEND = "numba" if USE_NUMBA else "numpy"
