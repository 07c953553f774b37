"""Experimental class-wise budget allocation.

Three stages: integer water-filling toward balanced class counts, a
non-negative least-squares refinement through the confusion matrix, and
rounding with a deterministic fix-up so the budget is met exactly.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ContractError

LAMBDA_ALLOC = 0.5
LAMBDA_P = 10.0
MAX_ITERS = 10_000
TOL = 1e-8


@dataclass
class AllocationProblem:
    current: np.ndarray
    available: np.ndarray
    budget: int
    confusion: np.ndarray  # P[n, m] = p(y_n | y_hat_m)
    lam: float = LAMBDA_ALLOC
    lam_p: float = LAMBDA_P

    def __post_init__(self):
        self.current = _counts(self.current, "current counts")
        self.available = _counts(self.available, "available counts")
        self.confusion = np.asarray(self.confusion, dtype=np.float64)
        nc = self.current.size
        if self.available.size != nc or self.confusion.shape != (nc, nc):
            raise ContractError("allocation inputs disagree on the number of classes")
        check_stochastic(self.confusion, 1e-6)
        if self.budget < 0:
            raise ContractError("budget must be non-negative")
        if self.budget > self.available.sum():
            raise ContractError(f"budget {self.budget} exceeds {int(self.available.sum())} available samples")


@dataclass
class Allocation:
    initial: np.ndarray
    refined: np.ndarray
    final: np.ndarray
    iterations: int
    objective: list = field(default_factory=list)

    def to_dict(self):
        return {
            "initial": self.initial.tolist(),
            "refined": self.refined.tolist(),
            "final": self.final.tolist(),
            "iterations": self.iterations,
            "objective": list(self.objective),
        }

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def _counts(values, what):
    arr = np.asarray(values)
    if arr.ndim != 1 or np.any(arr < 0) or np.any(arr != np.round(arr)):
        raise ContractError(f"{what} must be a vector of non-negative integers")
    return arr.astype(np.int64)


def check_stochastic(P, tol=1e-6):
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ContractError("confusion matrix must be square")
    if np.any(P < -tol) or np.any(np.abs(P.sum(axis=0) - 1.0) > tol):
        raise ContractError("confusion matrix columns must be probability vectors")


def water_fill(current_counts, budget):
    """Spread ``budget`` units so the smallest counts rise to a common level.

    Leftover units after the integer level go one at a time to the lowest
    class, ties by index.
    """
    if budget < 0:
        raise ContractError("budget must be non-negative")
    counts = np.ascontiguousarray(_counts(current_counts, "current counts"))
    if counts.size == 0:
        raise ContractError("need at least one class")
    return _kernels.water_fill(counts, int(budget))


def confusion_matrix_full(counts, class_prior=None):
    """Column-stochastic ``P[n, m] = p(y_n | y_hat_m)`` from joint draw counts.

    ``counts[n, m]`` tallies draws with true class n predicted as m.
    ``class_prior`` defaults to the labelled class ratio.  Classes without
    labelled samples get a uniform ``p(y_hat | y_n)`` row and predicted
    classes that never occur get a uniform column.
    """
    counts = np.asarray(counts, dtype=np.float64)
    nc = counts.shape[0]
    row_tot = counts.sum(axis=1)
    if class_prior is None:
        class_prior = row_tot / row_tot.sum()
    class_prior = np.asarray(class_prior, dtype=np.float64)
    likelihood = np.full((nc, nc), 1.0 / nc)
    seen = row_tot > 0
    likelihood[seen] = counts[seen] / row_tot[seen, None]
    joint = class_prior[:, None] * likelihood
    col = joint.sum(axis=0)
    P = np.full((nc, nc), 1.0 / nc)
    ok = col > 0
    P[:, ok] = joint[:, ok] / col[ok]
    return P


def confusion_from_vae(vae, labelled_h, labels, num_mc, rng, class_prior=None):
    from .vae import latent_label_draws

    draws = latent_label_draws(vae, labelled_h, num_mc, rng)
    counts = _kernels.tally(np.ascontiguousarray(draws, dtype=np.int64),
                            np.ascontiguousarray(labels, dtype=np.int64), vae.num_classes)
    return confusion_matrix_full(counts, class_prior)


def quadratic_form(n_init, P, budget, lam, lam_p):
    """``(A, b, const)`` with ``E(x) = 0.5 x'Ax - b'x + const``."""
    n0 = np.asarray(n_init, dtype=np.float64)
    k = n0.size
    ones = np.ones((k, k))
    A = 2.0 * (P.T @ P + lam * np.eye(k) + lam_p * ones)
    b = 2.0 * (P.T @ n0 + lam * n0 + lam_p * budget)
    const = (1.0 + lam) * (n0 @ n0) + lam_p * budget * budget
    return A, b, const


def objective(x, n_init, P, budget, lam, lam_p):
    n0 = np.asarray(n_init, dtype=np.float64)
    return float(np.sum((n0 - P @ x) ** 2) + lam * np.sum((n0 - x) ** 2) + lam_p * (budget - x.sum()) ** 2)


def refine_allocation(n_init, P, budget, lam=LAMBDA_ALLOC, lam_p=LAMBDA_P, max_iters=MAX_ITERS, tol=TOL):
    """Accelerated projected gradient for the non-negative refinement.

    Returns ``(x, iterations, objective_trace)``.
    """
    P = np.asarray(P, dtype=np.float64)
    check_stochastic(P, 1e-6)
    if lam < 0 or lam_p < 0:
        raise ContractError("penalties must be non-negative")
    A, b, const = quadratic_form(n_init, P, budget, lam, lam_p)
    lipschitz = np.linalg.norm(A, 2)
    step = 1.0 / lipschitz if lipschitz > 0 else 1.0
    x0 = np.maximum(np.asarray(n_init, dtype=np.float64), 0.0)
    return _kernels.projected_gradient(np.ascontiguousarray(A), b, float(const), x0, step, int(max_iters), float(tol))


def round_and_fix(xhat, budget, available):
    """Round half up, cap by availability, then walk classes from index 0
    removing or adding single units until the sum equals ``budget``."""
    xhat = np.asarray(xhat, dtype=np.float64)
    if np.any(xhat < 0) or not np.all(np.isfinite(xhat)):
        raise ContractError("refined allocation must be finite and non-negative")
    available = np.ascontiguousarray(_counts(available, "available counts"))
    if budget < 0:
        raise ContractError("budget must be non-negative")
    if budget > available.sum():
        raise ContractError(f"budget {budget} exceeds {int(available.sum())} available samples")
    return _kernels.round_and_fix(xhat, int(budget), available)


def allocate(problem: AllocationProblem, max_iters=MAX_ITERS, tol=TOL) -> Allocation:
    initial = water_fill(problem.current, problem.budget)
    refined, iters, trace = refine_allocation(initial, problem.confusion, problem.budget,
                                              problem.lam, problem.lam_p, max_iters, tol)
    final = round_and_fix(refined, problem.budget, problem.available)
    return Allocation(initial, refined, final, int(iters), [float(v) for v in trace])
