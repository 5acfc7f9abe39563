"""Cross-iteration consistency for a noisy DP-KMEANS trace.

The true statistics satisfy three constraints: every iteration's cluster sums
add up to the same vector, every iteration's counts add up to the same
total, and no count is negative. ``enforce_consistency`` returns the
Euclidean projection of the noisy statistics onto that set. It is pure
post-processing of released values and costs no budget.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .dp_mechanism import NoisyTrace, derive_centroids

TOL = 1e-10
MAX_SWEEPS = 10_000
ZERO_TOL = 1e-9


@dataclass(frozen=True)
class ConsistentTrace(NoisyTrace):
    """A ``NoisyTrace`` whose sums and counts satisfy the constraints.

    ``centroids`` are re-derived from the projected statistics.
    ``partition_centroids`` are the centers the mechanism actually used and
    are carried over untouched.
    """


def equalize_totals(blocks: np.ndarray) -> np.ndarray:
    """Project ``(T, K, ...)`` onto the subspace where all T totals over K agree.

    Each iteration's block is shifted by ``(mean total - its total) / K``.
    """
    totals = blocks.sum(axis=1, keepdims=True)
    return blocks + (totals.mean(axis=0, keepdims=True) - totals) / blocks.shape[1]


def _polish(target: np.ndarray, zero: np.ndarray) -> np.ndarray | None:
    """Exact projection of ``target`` onto {equal row totals, zeros on ``zero``}.

    Free entries of row t move by a common offset; the shared total minimizes
    ``sum_t (S_t - m)^2 / f_t`` where ``S_t`` and ``f_t`` are the row's free
    sum and free count. Returns ``None`` if the result is not non-negative.
    """
    free = ~zero
    f = free.sum(axis=1)
    S = np.where(free, target, 0.0).sum(axis=1)
    # an all-zero row pins the shared total to 0
    m = 0.0 if np.any(f == 0) else (S / f).sum() / (1.0 / f).sum()
    shift = np.where(f > 0, (S - m) / np.maximum(f, 1), 0.0)
    out = np.where(free, target - shift[:, None], 0.0)
    if np.any(out < 0):
        return None
    return out


def project_counts(counts: np.ndarray, tol: float = TOL, max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    """Project ``(T, K)`` counts onto {equal row totals} ∩ {non-negative}.

    Dykstra's alternating projections between the affine subspace and the
    orthant, stopped on max-norm change below ``tol``. The zero pattern of
    the limit is then used to solve the remaining equality-constrained problem
    in closed form, which makes the totals agree to rounding error.
    """
    counts = np.asarray(counts, dtype=float)
    x = counts.copy()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(max_sweeps):
        y = equalize_totals(x + p)
        p = x + p - y
        x_new = np.maximum(y + q, 0.0)
        q = y + q - x_new
        change = np.max(np.abs(x_new - x))
        x = x_new
        if change < tol:
            break
    polished = _polish(counts, x <= ZERO_TOL)
    return x if polished is None else polished


def enforce_consistency(trace: NoisyTrace) -> ConsistentTrace:
    """Project the trace's sums and counts onto the consistency constraints.

    The two blocks are independent: sums carry no sign constraint and take
    the closed-form affine projection, counts use :func:`project_counts`.
    """
    sums = equalize_totals(trace.noisy_sums)
    counts = project_counts(trace.noisy_counts)
    cents = derive_centroids(sums, counts, trace.initial_centroids, trace.min_count)
    fields = {f.name: getattr(trace, f.name) for f in dataclasses.fields(NoisyTrace)}
    fields.update(noisy_sums=sums, noisy_counts=counts, centroids=cents)
    return ConsistentTrace(**fields)
