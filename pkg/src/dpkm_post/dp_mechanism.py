"""DP-KMEANS: T noisy Lloyd updates under a total budget epsilon.

Each iteration releases a noisy count and a noisy coordinate sum per
cluster. Both queries have L1 sensitivity 1 on the unit L1 ball, and each
gets Laplace noise of scale ``2T / epsilon``, so every query costs
``epsilon / (2T)`` and the 2T queries compose to ``epsilon``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClusterStats, as_centroids, as_dataset, cluster_stats, in_l1_ball, update_centers

DEFAULT_MIN_COUNT = 1.0


def sample_laplace(scale: float, rng: np.random.Generator, size=None):
    """Zero-mean Laplace draws by inverting the CDF of a uniform variate."""
    if not scale > 0:
        raise ValueError(f"Laplace scale must be positive, got {scale}")
    u = rng.random(size) - 0.5
    # u == -0.5 would give log(0); redraw those (probability 2**-53 each)
    bad = np.asarray(u == -0.5)
    while bad.any():
        if np.ndim(u) == 0:
            u = rng.random() - 0.5
        else:
            u[bad] = rng.random(int(bad.sum())) - 0.5
        bad = np.asarray(u == -0.5)
    draws = -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    if size is None:
        return float(draws)
    return draws


def laplace_scale(epsilon: float, T: int) -> float:
    return 2.0 * T / epsilon


def init_centroids(K: int, d: int, min_sep: float, rng: np.random.Generator,
                   max_tries: int = 10_000) -> np.ndarray:
    """K points uniform on ``[-1/d, 1/d]^d`` with pairwise distance above ``min_sep``.

    Points are drawn one at a time and rejected when too close to an accepted
    one. The dataset is never consulted. Raises ``RuntimeError`` when
    ``max_tries`` candidates are rejected in total, which means ``min_sep`` is
    too large for K points in this box.
    """
    if K < 1 or d < 1:
        raise ValueError("K and d must be positive")
    if min_sep < 0:
        raise ValueError("min_sep must be non-negative")
    half = 1.0 / d
    centers = []
    rejected = 0
    while len(centers) < K:
        cand = rng.uniform(-half, half, size=d)
        if all(np.linalg.norm(cand - c) > min_sep for c in centers):
            centers.append(cand)
        else:
            rejected += 1
            if rejected >= max_tries:
                raise RuntimeError(
                    f"could not place {K} centers with separation > {min_sep} in d={d}")
    return np.array(centers)


def default_min_sep(K: int, d: int) -> float:
    """Half the side of a cell when the init box is cut into K equal cubes."""
    return 0.5 * (2.0 / d) / K ** (1.0 / d)


@dataclass(frozen=True)
class NoisyIterate:
    noisy_sums: np.ndarray
    noisy_counts: np.ndarray
    centroids: np.ndarray


@dataclass(frozen=True)
class NoisyTrace:
    """Everything DP-KMEANS releases, in iteration order.

    ``noisy_sums`` is ``(T, K, d)``, ``noisy_counts`` is ``(T, K)`` and
    ``centroids`` is ``(T, K, d)``. ``partition_centroids[t]`` holds the
    centers that partitioned the data when iterate ``t`` was measured, i.e.
    the initial centers for ``t = 0`` and ``centroids[t - 1]`` afterwards.
    """

    initial_centroids: np.ndarray
    noisy_sums: np.ndarray
    noisy_counts: np.ndarray
    centroids: np.ndarray
    partition_centroids: np.ndarray
    epsilon: float
    eps_sum: float
    eps_count: float
    min_count: float = DEFAULT_MIN_COUNT

    @property
    def T(self) -> int:
        return self.noisy_counts.shape[0]

    @property
    def K(self) -> int:
        return self.noisy_counts.shape[1]

    @property
    def d(self) -> int:
        return self.noisy_sums.shape[2]

    @property
    def iterates(self) -> list[NoisyIterate]:
        return [NoisyIterate(self.noisy_sums[t], self.noisy_counts[t], self.centroids[t])
                for t in range(self.T)]

    @property
    def final_centroids(self) -> np.ndarray:
        return self.centroids[-1]


def derive_centroids(sums: np.ndarray, counts: np.ndarray, initial: np.ndarray,
                     min_count: float = DEFAULT_MIN_COUNT) -> np.ndarray:
    """Chain the safeguarded ``sum / count`` division through all iterations."""
    out = np.empty_like(sums)
    prev = initial
    for t in range(sums.shape[0]):
        prev = update_centers(ClusterStats(sums[t], counts[t]), prev, min_count)
        out[t] = prev
    return out


def dp_kmeans(data, K: int, T: int, epsilon: float, init, rng: np.random.Generator,
              min_count: float = DEFAULT_MIN_COUNT,
              noise_scale_override: float | None = None) -> NoisyTrace:
    """Run T private Lloyd updates and return the full noisy trace.

    A cluster whose noisy count is at most ``min_count`` keeps its previous
    center. ``noise_scale_override`` replaces the Laplace scale and exists for
    tests only; ``0`` turns the noise off entirely.
    """
    data = as_dataset(data)
    if not in_l1_ball(data):
        raise ValueError("data must lie in the unit L1 ball; normalize it first")
    if T < 1:
        raise ValueError("T must be at least 1")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    init = as_centroids(init, data.shape[1])
    if init.shape[0] != K:
        raise ValueError(f"init must hold K={K} centers, got {init.shape[0]}")

    d = data.shape[1]
    scale = laplace_scale(epsilon, T) if noise_scale_override is None else noise_scale_override
    sums = np.empty((T, K, d))
    counts = np.empty((T, K))
    cents = np.empty((T, K, d))
    parts = np.empty((T, K, d))
    prev = init
    for t in range(T):
        parts[t] = prev
        stats = cluster_stats(data, prev)
        if scale > 0:
            counts[t] = stats.counts + sample_laplace(scale, rng, K)
            sums[t] = stats.sums + sample_laplace(scale, rng, (K, d))
        else:
            counts[t] = stats.counts
            sums[t] = stats.sums
        prev = update_centers(ClusterStats(sums[t], counts[t]), prev, min_count)
        cents[t] = prev

    share = epsilon / (2 * T)
    return NoisyTrace(initial_centroids=init.copy(), noisy_sums=sums, noisy_counts=counts,
                      centroids=cents, partition_centroids=parts, epsilon=float(epsilon),
                      eps_sum=share, eps_count=share, min_count=min_count)
