"""Geometry, cluster statistics and evaluation shared by the other modules.

Datasets and centroid sets are plain ``numpy`` arrays of shape ``(N, d)``
and ``(K, d)``. Every function here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

L1_TOL = 1e-9


@dataclass(frozen=True)
class ClusterStats:
    """Per-cluster coordinate sums ``(K, d)`` and point counts ``(K,)``."""

    sums: np.ndarray
    counts: np.ndarray

    @property
    def K(self) -> int:
        return self.counts.shape[0]


def as_dataset(points) -> np.ndarray:
    """Coerce ``points`` to a non-empty float matrix of shape ``(N, d)``."""
    data = np.asarray(points, dtype=float)
    if data.ndim == 1:
        data = data.reshape(-1, 1)
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] == 0:
        raise ValueError(f"dataset must be a non-empty (N, d) matrix, got shape {data.shape}")
    return data


def as_centroids(centers, d: int | None = None) -> np.ndarray:
    centers = np.asarray(centers, dtype=float)
    if centers.ndim == 1:
        centers = centers.reshape(-1, 1)
    if centers.ndim != 2 or centers.shape[0] == 0:
        raise ValueError(f"centroids must be a non-empty (K, d) matrix, got shape {centers.shape}")
    if d is not None and centers.shape[1] != d:
        raise ValueError(f"dimension mismatch: centroids have d={centers.shape[1]}, data has d={d}")
    return centers


def in_l1_ball(data: np.ndarray, tol: float = L1_TOL) -> bool:
    return bool(np.all(np.abs(data).sum(axis=1) <= 1.0 + tol))


def squared_distances(data: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """``(N, K)`` matrix of squared Euclidean distances.

    Computed from explicit differences rather than the ``|x|^2 - 2x.c + |c|^2``
    expansion so that exact ties stay exact.
    """
    diff = data[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def assign_all(data, centers) -> np.ndarray:
    """Nearest-center index for every row; ties go to the smallest index."""
    data = as_dataset(data)
    centers = as_centroids(centers, data.shape[1])
    return np.argmin(squared_distances(data, centers), axis=1)


def assign(point, centers) -> int:
    point = np.asarray(point, dtype=float).reshape(1, -1)
    return int(assign_all(point, centers)[0])


def stats_from_labels(data: np.ndarray, labels: np.ndarray, K: int) -> ClusterStats:
    d = data.shape[1]
    sums = np.zeros((K, d))
    np.add.at(sums, labels, data)
    counts = np.bincount(labels, minlength=K).astype(np.int64)
    return ClusterStats(sums=sums, counts=counts)


def cluster_stats(data, centers) -> ClusterStats:
    data = as_dataset(data)
    centers = as_centroids(centers, data.shape[1])
    return stats_from_labels(data, assign_all(data, centers), centers.shape[0])


def wcss(data, centers) -> float:
    """Within-cluster sum of squares under nearest-center assignment."""
    data = as_dataset(data)
    centers = as_centroids(centers, data.shape[1])
    return float(squared_distances(data, centers).min(axis=1).sum())


def normalize(raw) -> np.ndarray:
    """Map each attribute affinely onto [-1, 1], then scale every point by 1/d.

    The 1/d factor puts every row inside the unit L1 ball. Constant attributes
    map to 0.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim == 1:
        raw = raw.reshape(-1, 1)
    if raw.ndim != 2 or raw.shape[0] == 0 or raw.shape[1] == 0:
        raise ValueError("cannot normalize an empty matrix")
    if not np.all(np.isfinite(raw)):
        raise ValueError("input contains missing or non-finite values")
    lo = raw.min(axis=0)
    hi = raw.max(axis=0)
    span = hi - lo
    constant = span == 0
    scaled = np.where(constant, 0.0, 2.0 * (raw - lo) / np.where(constant, 1.0, span) - 1.0)
    return scaled / raw.shape[1]


def lloyd(data, K: int, init, max_iters: int = 100, return_history: bool = False):
    """Plain Lloyd iterations from ``init``.

    Stops once the assignment vector repeats or after ``max_iters`` updates.
    Empty clusters keep their previous center.

    Returns ``(centroids, wcss)``, or ``(centroids, wcss, history)`` where
    ``history`` lists the centroid matrix after each update.
    """
    data = as_dataset(data)
    centers = as_centroids(init, data.shape[1]).copy()
    if K < 1 or centers.shape[0] != K:
        raise ValueError(f"init must hold K={K} centers, got {centers.shape[0]}")
    history = []
    labels = None
    for _ in range(max_iters):
        new_labels = assign_all(data, centers)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centers = update_centers(stats_from_labels(data, labels, K), centers)
        history.append(centers)
    score = wcss(data, centers)
    if return_history:
        return centers, score, history
    return centers, score


def update_centers(stats: ClusterStats, previous: np.ndarray, min_count: float = 0.0) -> np.ndarray:
    """``sums / counts`` per cluster, keeping ``previous`` where count <= ``min_count``."""
    counts = np.asarray(stats.counts, dtype=float)
    keep = counts <= min_count
    safe = np.where(keep, 1.0, counts)
    return np.where(keep[:, None], previous, stats.sums / safe[:, None])
