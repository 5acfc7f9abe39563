import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dpkm_post.dp_mechanism import NoisyTrace, derive_centroids  # noqa: E402


def make_trace(sums, counts, init, partitions=None, epsilon=1.0, min_count=1.0):
    """Hand-built trace; partitions default to the chained derived centroids."""
    sums = np.asarray(sums, dtype=float)
    counts = np.asarray(counts, dtype=float)
    init = np.asarray(init, dtype=float)
    cents = derive_centroids(sums, counts, init, min_count)
    if partitions is None:
        partitions = np.concatenate([init[None], cents[:-1]])
    T = counts.shape[0]
    share = epsilon / (2 * T)
    return NoisyTrace(init, sums, counts, cents, np.asarray(partitions, dtype=float),
                      epsilon, share, share, min_count)


def random_trace(rng, T, K, d, count_low=-3.0, count_high=12.0, epsilon=1.0):
    init = rng.uniform(-1 / d, 1 / d, (K, d))
    counts = rng.uniform(count_low, count_high, (T, K))
    sums = rng.uniform(-3, 3, (T, K, d))
    return make_trace(sums, counts, init, epsilon=epsilon)


@pytest.fixture
def trace_factory():
    return make_trace


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
