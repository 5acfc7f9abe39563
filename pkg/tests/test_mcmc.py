import copy

import numpy as np
import pytest
from conftest import make_trace
from oracles import component_log_q, full_log_score
from scipy import stats

from dpkm_post.consistency import enforce_consistency
from dpkm_post.core import cluster_stats, lloyd
from dpkm_post.dp_mechanism import dp_kmeans, init_centroids
from dpkm_post.harness import gen_blobs
from dpkm_post.mcmc import (
    ChainState,
    LabeledPoint,
    ProposalSampler,
    accept_prob,
    delta_log_score,
    final_centroids,
    init_state,
    kmeanspp_init,
    make_proposal,
    project_l1,
    propose,
    run_chain,
    step,
    target_log_score,
)

DELTA = 0.001


@pytest.fixture(scope="module")
def blob_trace():
    data = gen_blobs(300, 2, 3, 0.03, seed=4)
    rng = np.random.default_rng(7)
    init = init_centroids(3, 2, 0.2, rng)
    return data, enforce_consistency(dp_kmeans(data, 3, 3, 1.0, init, rng))


def assert_caches_fresh(state, trace):
    for t in range(trace.T):
        st = cluster_stats(state.points, trace.partition_centroids[t])
        np.testing.assert_allclose(state.sums[t], st.sums, atol=1e-9)
        np.testing.assert_array_equal(state.counts[t], st.counts)
    assert state.score == pytest.approx(full_log_score(state.points, trace), abs=1e-6)


class TestTargetLogScore:
    def test_hand_computed(self):
        tr = make_trace([[[2.0]]], [[3.0]], [[0.0]])
        assert target_log_score([[1.0], [1.0]], tr) == pytest.approx(-tr.eps_count)

    def test_exact_reproduction_scores_zero(self):
        data = np.array([[0.1, 0.2], [0.3, -0.1], [-0.4, 0.0]])
        init = np.array([[0.2, 0.0], [-0.4, 0.0]])
        st = cluster_stats(data, init)
        tr = make_trace(st.sums[None], st.counts[None].astype(float), init)
        assert target_log_score(data, tr) == 0.0

    def test_matches_oracle(self, blob_trace):
        data, tr = blob_trace
        assert target_log_score(data, tr) == pytest.approx(full_log_score(data, tr), rel=1e-12)
        assert target_log_score(data, tr) <= 0

    def test_dimension_mismatch(self, blob_trace):
        with pytest.raises(ValueError):
            target_log_score(np.zeros((2, 3)), blob_trace[1])


class TestInitState:
    def test_rounding(self):
        a, b = [0.2, 0.1], [-0.3, 0.3]
        sums = np.array([[np.multiply(a, 3.4), np.multiply(b, 0.6) + 0.0]])
        tr = make_trace(sums, [[3.4, 0.6]], [a, b], min_count=0.5)
        st = init_state(tr, DELTA)
        assert st.size == 4
        np.testing.assert_allclose(st.points[:3], [a] * 3)
        np.testing.assert_allclose(st.points[3], b)
        assert st.labels_t.tolist() == [0] * 4
        assert st.labels_z.tolist() == [0, 0, 0, 1]

    def test_degenerate(self):
        tr = make_trace([[[0.1, 0.0]]], [[0.3]], [[0.0, 0.0]])
        with pytest.raises(ValueError):
            init_state(tr, DELTA)

    def test_caches_match_recomputation(self, blob_trace):
        _, tr = blob_trace
        assert_caches_fresh(init_state(tr, DELTA), tr)

    def test_points_in_ball(self, blob_trace):
        st = init_state(blob_trace[1], DELTA)
        assert np.abs(st.points).sum(axis=1).max() <= 1 + 1e-12


class TestPropose:
    def test_single_cluster_component(self):
        tr = make_trace([[[1.0, 0.5]]], [[10.0]], [[0.0, 0.0]])
        sampler = ProposalSampler(tr, DELTA)
        rng = np.random.default_rng(0)
        assert {sampler.draw_component(rng)[1] for _ in range(50)} == {0}
        assert sampler.weights[0, 0] == 1.0

    def test_tiny_delta_collapses_to_center(self, blob_trace):
        _, tr = blob_trace
        st = init_state(tr, 1e-30)
        prop = propose(st, tr, 1e-30, np.random.default_rng(3))
        t, z = prop.new_point.label_t, prop.new_point.label_z
        np.testing.assert_allclose(prop.new_point.point, project_l1(tr.centroids[t, z]),
                                   atol=1e-12)

    def test_component_frequencies(self):
        counts = np.array([[10.0, 30.0, 60.0]])
        sums = np.zeros((1, 3, 2))
        tr = make_trace(sums, counts, np.zeros((3, 2)))
        sampler = ProposalSampler(tr, DELTA)
        rng = np.random.default_rng(1)
        n = 100_000
        z = np.array([sampler.draw_component(rng)[1] for _ in range(n)])
        freq = np.bincount(z, minlength=3) / n
        np.testing.assert_allclose(freq, [0.1, 0.3, 0.6], atol=0.01)
        assert stats.chisquare(freq * n, [0.1 * n, 0.3 * n, 0.6 * n]).pvalue > 0.001

    def test_gaussian_moments_without_projection(self):
        c = np.array([0.2, -0.1])
        tr = make_trace([[c * 5]], [[5.0]], [[0.0, 0.0]])
        sampler = ProposalSampler(tr, 0.01, project=False)
        rng = np.random.default_rng(2)
        pts = np.array([sampler.draw(rng).point for _ in range(20_000)])
        np.testing.assert_allclose(pts.mean(axis=0), c, atol=0.004)
        np.testing.assert_allclose(pts.var(axis=0), 0.01, rtol=0.05)

    def test_log_q_matches_scipy(self):
        rng = np.random.default_rng(5)
        tr = make_trace(rng.uniform(0, 2, (2, 3, 2)), rng.uniform(2, 8, (2, 3)), np.zeros((3, 2)))
        sampler = ProposalSampler(tr, 0.05, project=False)
        for _ in range(20):
            p = sampler.draw(rng)
            expected = component_log_q(p.point, p.label_t, p.label_z, tr, 0.05)
            assert p.log_q == pytest.approx(expected, rel=1e-12)

    def test_assignments_match_core(self, blob_trace):
        _, tr = blob_trace
        st = init_state(tr, DELTA)
        rng = np.random.default_rng(8)
        for _ in range(50):
            p = propose(st, tr, 0.01, rng)
            for t in range(tr.T):
                lab = cluster_stats(p.new_point.point[None], tr.partition_centroids[t]).counts
                assert p.new_assignments[t] == int(np.argmax(lab))

    def test_no_usable_iteration(self):
        tr = make_trace([[[0.0]]], [[0.0]], [[0.0]])
        sampler = ProposalSampler(tr, DELTA)
        with pytest.raises(RuntimeError):
            sampler.draw_component(np.random.default_rng(0))


def _random_state(tr, rng, n=40):
    sampler = ProposalSampler(tr, 0.02)
    pts = [sampler.draw(rng) for _ in range(n)]
    return ChainState([p.point for p in pts], [p.label_t for p in pts],
                      [p.label_z for p in pts], [p.log_q for p in pts], tr)


class TestDeltaAndAcceptance:
    def test_identical_replacement(self, blob_trace):
        _, tr = blob_trace
        st = init_state(tr, DELTA)
        same = LabeledPoint(st.points[5].copy(), int(st.labels_t[5]), int(st.labels_z[5]),
                            float(st.log_q[5]))
        prop = make_proposal(st, tr, 5, same)
        assert delta_log_score(st, prop, tr) == 0.0
        assert prop.log_correction == 0.0
        assert accept_prob(st, prop, tr) == 1.0

    def test_same_cluster_swap_only_moves_sums(self):
        data = np.array([[0.1, 0.0], [0.12, 0.0], [-0.3, 0.1]])
        init = np.array([[0.1, 0.0], [-0.3, 0.1]])
        tr = make_trace([[[0.5, 0.2], [-0.3, 0.1]]], [[2.5, 1.0]], init)
        st = ChainState(data, [0, 0, 0], [0, 0, 1], [0.0, 0.0, 0.0], tr)
        new = LabeledPoint(np.array([0.13, 0.01]), 0, 0, 0.0)
        prop = make_proposal(st, tr, 0, new)
        assert prop.removed_assignments.tolist() == prop.new_assignments.tolist() == [0]
        S = st.sums[0, 0]
        expected = -tr.eps_sum * (np.abs(tr.noisy_sums[0, 0] - (S - data[0] + new.point)).sum()
                                  - np.abs(tr.noisy_sums[0, 0] - S).sum())
        assert delta_log_score(st, prop, tr) == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_delta_matches_full_recomputation(self, blob_trace, seed):
        _, tr = blob_trace
        rng = np.random.default_rng(seed)
        st = _random_state(tr, rng)
        for _ in range(40):
            prop = propose(st, tr, 0.02, rng)
            after = st.points.copy()
            after[prop.replace_index] = prop.new_point.point
            expected = full_log_score(after, tr) - full_log_score(st.points, tr)
            assert delta_log_score(st, prop, tr) == pytest.approx(expected, abs=1e-9)

    def test_accept_prob_in_unit_interval(self, blob_trace):
        _, tr = blob_trace
        rng = np.random.default_rng(0)
        st = _random_state(tr, rng)
        for _ in range(100):
            a = accept_prob(st, propose(st, tr, 0.02, rng), tr)
            assert 0.0 < a <= 1.0


class TestStep:
    def test_accept_and_reject_paths(self, blob_trace):
        _, tr = blob_trace
        rng = np.random.default_rng(12)
        st = init_state(tr, 0.01)
        seen = {True: 0, False: 0}
        for _ in range(300):
            before = st.copy()
            # replay the proposal step() will draw to know the expected change
            prop = propose(st, tr, 0.01, copy.deepcopy(rng))
            change = delta_log_score(st, prop, tr)
            accepted = step(st, tr, 0.01, rng)
            seen[accepted] += 1
            if accepted:
                assert st.score == before.score + change
                assert_caches_fresh(st, tr)
            else:
                for name in ("points", "labels_t", "labels_z", "log_q", "assignments",
                             "sums", "counts"):
                    assert np.array_equal(getattr(st, name), getattr(before, name))
                assert st.score == before.score
        assert seen[True] > 0 and seen[False] > 0


class TestRunChain:
    def test_bookkeeping(self, blob_trace):
        _, tr = blob_trace
        res = run_chain(tr, 1, DELTA, np.random.default_rng(0))
        assert res.best_score >= res.score_trace[0]
        assert 0.0 <= res.acceptance_rate <= 1.0
        assert res.best_score == res.score_trace.max()
        assert len(res.score_trace) == 2

    def test_deterministic(self, blob_trace):
        _, tr = blob_trace
        a = run_chain(tr, 500, DELTA, np.random.default_rng(3))
        b = run_chain(tr, 500, DELTA, np.random.default_rng(3))
        assert np.array_equal(a.best_data, b.best_data)
        assert np.array_equal(a.score_trace, b.score_trace)
        assert a.acceptance_rate == b.acceptance_rate

    def test_best_dataset_has_best_score(self, blob_trace):
        _, tr = blob_trace
        res = run_chain(tr, 2000, DELTA, np.random.default_rng(4), refresh_every=700)
        assert res.best_score == res.score_trace.max()
        assert target_log_score(res.best_data, tr) == pytest.approx(res.best_score, abs=1e-6)

    def test_rejects_zero_steps(self, blob_trace):
        with pytest.raises(ValueError):
            run_chain(blob_trace[1], 0, DELTA, np.random.default_rng(0))

    def test_raw_trace_mode(self, blob_trace):
        data = blob_trace[0]
        rng = np.random.default_rng(1)
        raw = dp_kmeans(data, 3, 3, 0.2, init_centroids(3, 2, 0.2, rng), rng)
        res = run_chain(raw, 300, DELTA, rng, project=False)
        assert np.isfinite(res.best_score)


class TestFinalCentroids:
    def test_single_restart_is_one_lloyd(self):
        data = gen_blobs(200, 2, 4, 0.03, seed=1)
        cents, score = final_centroids(data, 4, 1, np.random.default_rng(5))
        init = kmeanspp_init(data, 4, np.random.default_rng(5))
        exp_c, exp_s = lloyd(data, 4, init)
        np.testing.assert_array_equal(cents, exp_c)
        assert score == exp_s

    def test_best_of_restarts(self):
        data = gen_blobs(300, 2, 5, 0.05, seed=2)
        _, score = final_centroids(data, 5, 8, np.random.default_rng(6))
        rng = np.random.default_rng(6)
        singles = [lloyd(data, 5, kmeanspp_init(data, 5, rng))[1] for _ in range(8)]
        assert score == min(singles)

    def test_separated_blobs_recovered(self):
        # oracle: blob means of a well-separated, known layout
        rng = np.random.default_rng(3)
        centers = np.array([[-0.3, -0.3], [0.3, 0.3], [0.3, -0.3], [-0.3, 0.3]])
        data = np.repeat(centers, 50, axis=0) + 0.01 * rng.standard_normal((200, 2))
        cents, score = final_centroids(data, 4, 10, rng)
        means = data.reshape(4, 50, 2).mean(axis=1)
        order = [int(np.argmin(((cents - m) ** 2).sum(axis=1))) for m in means]
        np.testing.assert_allclose(cents[order], means, atol=1e-12)
        assert score == pytest.approx(((data - np.repeat(means, 50, axis=0)) ** 2).sum())

    def test_duplicate_points(self):
        data = np.array([[0.1, 0.1]] * 5)
        cents, score = final_centroids(data, 3, 2, np.random.default_rng(0))
        assert score == 0.0
