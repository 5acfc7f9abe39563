"""Metropolis-Hastings simulation of datasets that explain a noisy trace.

The chain walks over fixed-size datasets. A move replaces one point with a
draw from a Gaussian mixture centred on the trace's centroids, and is
accepted by comparing how well the two datasets reproduce the released sums
and counts (a Laplace likelihood, so a weighted L1 discrepancy). The best
dataset seen is handed to a non-private Lloyd finisher.

Only released values are read here; the private dataset never enters this
module.

Iteration indices are 0-based: iterate ``t`` was measured on the partition
induced by ``trace.partition_centroids[t]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import as_dataset, cluster_stats, lloyd, squared_distances
from .dp_mechanism import NoisyTrace

REFRESH_EVERY = 5_000
MAX_COMPONENT_RETRIES = 100


def project_l1(x: np.ndarray) -> np.ndarray:
    """Radially shrink rows with L1 norm above 1 onto the unit L1 sphere."""
    norm = np.abs(x).sum(axis=-1, keepdims=True)
    return x / np.maximum(norm, 1.0)


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, var: float) -> np.ndarray:
    """Log density of N(mean, var * I) at x, over the last axis."""
    d = x.shape[-1]
    diff = x - mean
    return -0.5 * d * np.log(2 * np.pi * var) - np.einsum("...d,...d->...", diff, diff) / (2 * var)


def mixture_weights(trace: NoisyTrace) -> np.ndarray:
    """``(T, K)`` component weights proportional to the (clipped) counts."""
    counts = np.maximum(trace.noisy_counts, 0.0)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def _discrepancy(trace: NoisyTrace, sums: np.ndarray, counts: np.ndarray) -> float:
    s = np.abs(trace.noisy_sums - sums).sum()
    n = np.abs(trace.noisy_counts - counts).sum()
    return trace.eps_sum * s + trace.eps_count * n


def target_log_score(data, trace: NoisyTrace) -> float:
    """Log of the unnormalized target: minus the budget-weighted L1 misfit.

    Sums over iterations and clusters of ``eps_sum * |s_noisy - S(D)|_1 +
    eps_count * |n_noisy - N(D)|``, negated; always <= 0.
    """
    data = as_dataset(data)
    if data.shape[1] != trace.d:
        raise ValueError(f"dimension mismatch: data d={data.shape[1]}, trace d={trace.d}")
    sums, counts = _trace_stats(data, trace)
    return -_discrepancy(trace, sums, counts)


def _trace_stats(data: np.ndarray, trace: NoisyTrace):
    sums = np.empty((trace.T, trace.K, trace.d))
    counts = np.empty((trace.T, trace.K))
    for t in range(trace.T):
        st = cluster_stats(data, trace.partition_centroids[t])
        sums[t] = st.sums
        counts[t] = st.counts
    return sums, counts


@dataclass(frozen=True)
class LabeledPoint:
    point: np.ndarray
    label_t: int
    label_z: int
    log_q: float


@dataclass(frozen=True)
class Proposal:
    replace_index: int
    new_point: LabeledPoint
    removed_point: LabeledPoint
    log_correction: float
    removed_assignments: np.ndarray
    new_assignments: np.ndarray

    @cached_property
    def changes(self):
        """Touched ``(t, k)`` cells with their sum and count increments.

        Rows for the removed point's clusters come first, then the new
        point's clusters at iterations where the two differ. No cell repeats.
        """
        x = self.removed_point.point
        xn = self.new_point.point
        i, j = self.removed_assignments, self.new_assignments
        T = len(i)
        same = i == j
        moved = np.flatnonzero(~same)
        tt = np.concatenate([np.arange(T), moved])
        kk = np.concatenate([i, j[moved]])
        dS = np.empty((len(tt), len(x)))
        dS[:T] = xn - x
        dS[moved] = -x
        dS[T:] = xn
        dN = np.zeros(len(tt))
        dN[moved] = -1.0
        dN[T:] = 1.0
        return tt, kk, dS, dN


class ChainState:
    """A simulated dataset plus per-iteration statistics cached for fast moves.

    ``log_q[i]`` is the log proposal density of the component draw that
    produced point i (before any projection onto the L1 ball).
    ``assignments[i, t]`` is the point's cluster under partition t.
    """

    def __init__(self, points, labels_t, labels_z, log_q, trace: NoisyTrace):
        self.points = np.array(points, dtype=float)
        self.labels_t = np.array(labels_t, dtype=np.int64)
        self.labels_z = np.array(labels_z, dtype=np.int64)
        self.log_q = np.array(log_q, dtype=float)
        self.refresh(trace)

    def refresh(self, trace: NoisyTrace) -> None:
        """Recompute every cache from the points."""
        T, K, d = trace.T, trace.K, trace.d
        self.assignments = np.empty((len(self.points), T), dtype=np.int64)
        self.sums = np.empty((T, K, d))
        self.counts = np.empty((T, K))
        for t in range(T):
            dist = squared_distances(self.points, trace.partition_centroids[t])
            lab = np.argmin(dist, axis=1)
            self.assignments[:, t] = lab
            self.sums[t] = 0.0
            np.add.at(self.sums[t], lab, self.points)
            self.counts[t] = np.bincount(lab, minlength=K)
        self.score = -_discrepancy(trace, self.sums, self.counts)

    @property
    def size(self) -> int:
        return len(self.points)

    def copy(self) -> "ChainState":
        new = object.__new__(ChainState)
        for name in ("points", "labels_t", "labels_z", "log_q", "assignments", "sums", "counts"):
            setattr(new, name, getattr(self, name).copy())
        new.score = self.score
        return new


def init_state(trace: NoisyTrace, delta: float, project: bool = True) -> ChainState:
    """Starting dataset: round(n_k) copies of each final centroid c_k.

    Rounding is half-up on the non-negative part of the final counts.
    """
    last = trace.T - 1
    copies = np.floor(np.maximum(trace.noisy_counts[last], 0.0) + 0.5).astype(np.int64)
    if copies.sum() == 0:
        raise ValueError("degenerate trace: every final count rounds to zero")
    z = np.repeat(np.arange(trace.K), copies)
    raw = trace.centroids[last][z]
    points = project_l1(raw) if project else raw
    log_w = _log_weights(trace)
    log_q = log_w[last, z] + gaussian_logpdf(raw, raw, delta)
    return ChainState(points, np.full(len(z), last), z, log_q, trace)


def _log_weights(trace: NoisyTrace) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(mixture_weights(trace))


class ProposalSampler:
    """Draws replacement points from the trace's Gaussian mixture.

    Pick an iteration t uniformly, a component z with probability
    proportional to its count at t, then a point from N(c_z^(t), delta * I).
    """

    def __init__(self, trace: NoisyTrace, delta: float, project: bool = True):
        if not delta > 0:
            raise ValueError("delta must be positive")
        self.trace = trace
        self.delta = delta
        self.sd = np.sqrt(delta)
        self.project = project
        self.weights = mixture_weights(trace)
        self.log_weights = _log_weights(trace)
        self.cum_weights = np.cumsum(self.weights, axis=1)
        self.usable = self.weights.sum(axis=1) > 0
        self.log_norm = -0.5 * trace.d * np.log(2 * np.pi * delta)

    def draw_component(self, rng: np.random.Generator) -> tuple[int, int]:
        T = self.trace.T
        for _ in range(MAX_COMPONENT_RETRIES):
            t = int(rng.integers(T))
            if self.usable[t]:
                break
        else:
            raise RuntimeError("no iteration with positive counts to propose from")
        cum = self.cum_weights[t]
        z = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        return t, min(z, self.trace.K - 1)

    def draw(self, rng: np.random.Generator) -> LabeledPoint:
        t, z = self.draw_component(rng)
        center = self.trace.centroids[t, z]
        noise = self.sd * rng.standard_normal(self.trace.d)
        raw = center + noise
        log_q = self.log_weights[t, z] + self.log_norm - float(noise @ noise) / (2 * self.delta)
        point = project_l1(raw) if self.project else raw
        return LabeledPoint(point, t, z, log_q)


def _assign_across(point: np.ndarray, partitions: np.ndarray) -> np.ndarray:
    diff = partitions - point
    return np.argmin(np.einsum("tkd,tkd->tk", diff, diff), axis=1)


def make_proposal(state: ChainState, trace: NoisyTrace, index: int,
                  new_point: LabeledPoint) -> Proposal:
    removed = LabeledPoint(state.points[index].copy(), int(state.labels_t[index]),
                           int(state.labels_z[index]), float(state.log_q[index]))
    return Proposal(
        replace_index=index,
        new_point=new_point,
        removed_point=removed,
        log_correction=removed.log_q - new_point.log_q,
        removed_assignments=state.assignments[index].copy(),
        new_assignments=_assign_across(new_point.point, trace.partition_centroids),
    )


def propose(state: ChainState, trace: NoisyTrace, delta: float, rng: np.random.Generator,
            project: bool = True, sampler: ProposalSampler | None = None) -> Proposal:
    """Pick a point uniformly and propose replacing it with a mixture draw."""
    if state.size < 1:
        raise ValueError("cannot propose on an empty dataset")
    if sampler is None:
        sampler = ProposalSampler(trace, delta, project)
    index = int(rng.integers(state.size))
    return make_proposal(state, trace, index, sampler.draw(rng))


def delta_log_score(state: ChainState, proposal: Proposal, trace: NoisyTrace) -> float:
    """Change in target log score if the proposal were applied.

    Per iteration only the removed point's cluster i_t and the new point's
    cluster j_t move; when they coincide only the sum term changes.
    """
    tt, kk, dS, dN = proposal.changes
    S = state.sums[tt, kk]
    N = state.counts[tt, kk]
    s_noisy = trace.noisy_sums[tt, kk]
    n_noisy = trace.noisy_counts[tt, kk]
    d_sum = np.abs(s_noisy - (S + dS)).sum() - np.abs(s_noisy - S).sum()
    d_count = np.abs(n_noisy - (N + dN)).sum() - np.abs(n_noisy - N).sum()
    return -float(trace.eps_sum * d_sum + trace.eps_count * d_count)


def log_accept_ratio(state: ChainState, proposal: Proposal, trace: NoisyTrace) -> float:
    return delta_log_score(state, proposal, trace) + proposal.log_correction


def accept_prob(state: ChainState, proposal: Proposal, trace: NoisyTrace) -> float:
    return float(np.exp(min(0.0, log_accept_ratio(state, proposal, trace))))


def apply_proposal(state: ChainState, proposal: Proposal, score_change: float) -> None:
    """Commit the replacement in place, updating caches incrementally."""
    tt, kk, dS, dN = proposal.changes
    state.sums[tt, kk] += dS
    state.counts[tt, kk] += dN
    idx = proposal.replace_index
    new = proposal.new_point
    state.points[idx] = new.point
    state.labels_t[idx] = new.label_t
    state.labels_z[idx] = new.label_z
    state.log_q[idx] = new.log_q
    state.assignments[idx] = proposal.new_assignments
    state.score += score_change


def step(state: ChainState, trace: NoisyTrace, delta: float, rng: np.random.Generator,
         project: bool = True, sampler: ProposalSampler | None = None, proposer=None) -> bool:
    """One Metropolis-Hastings move; mutates ``state`` only when accepted.

    ``proposer(state, rng) -> Proposal`` overrides the mixture proposal.
    Returns whether the move was accepted.
    """
    if proposer is None:
        proposal = propose(state, trace, delta, rng, project, sampler)
    else:
        proposal = proposer(state, rng)
    change = delta_log_score(state, proposal, trace)
    log_ratio = change + proposal.log_correction
    if log_ratio >= 0 or np.log(rng.random()) < log_ratio:
        apply_proposal(state, proposal, change)
        return True
    return False


@dataclass(frozen=True)
class ChainResult:
    best_data: np.ndarray
    best_score: float
    acceptance_rate: float
    score_trace: np.ndarray


def run_chain(trace: NoisyTrace, steps: int, delta: float, rng: np.random.Generator,
              project: bool = True, refresh_every: int = REFRESH_EVERY) -> ChainResult:
    """Run ``steps`` MH moves from the initial dataset and keep the best one.

    ``score_trace[0]`` is the initial score and ``score_trace[s]`` the score
    after move s, so the best dataset may be the starting one. Caches are
    rebuilt from scratch every ``refresh_every`` moves to bound float drift.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    state = init_state(trace, delta, project)
    sampler = ProposalSampler(trace, delta, project)
    scores = np.empty(steps + 1)
    scores[0] = state.score
    best_score = state.score
    best_data = state.points.copy()
    accepted = 0
    for s in range(1, steps + 1):
        if step(state, trace, delta, rng, project, sampler):
            accepted += 1
        if refresh_every and s % refresh_every == 0:
            state.refresh(trace)
        scores[s] = state.score
        if state.score > best_score:
            best_score = state.score
            best_data = state.points.copy()
    return ChainResult(best_data=best_data, best_score=float(best_score),
                       acceptance_rate=accepted / steps, score_trace=scores)


def kmeanspp_init(data: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; falls back to uniform picks once all mass is covered."""
    n = len(data)
    centers = [data[rng.integers(n)]]
    closest = ((data - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers.append(data[idx])
        closest = np.minimum(closest, ((data - data[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def final_centroids(best, K: int, restarts: int, rng: np.random.Generator,
                    max_iters: int = 100) -> tuple[np.ndarray, float]:
    """Best of ``restarts`` Lloyd runs on the simulated dataset.

    Seeds come from k-means++ on the simulated points, which are themselves
    pure post-processing output.
    """
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    best = as_dataset(best)
    winner, winner_score = None, np.inf
    for _ in range(restarts):
        cents, score = lloyd(best, K, kmeanspp_init(best, K, rng), max_iters)
        if score < winner_score:
            winner, winner_score = cents, score
    return winner, float(winner_score)
