import numpy as np
import pytest

from fedsplit.data import SparseRatings


def synthetic_ratings(n_users=50, n_items=40, rank=3, density=0.35, seed=0) -> SparseRatings:
    """Low-rank plus noise ratings on the 1..5 scale with external ids offset
    from positions, so id/position mix-ups show up."""
    rng = np.random.default_rng(seed)
    scores = rng.random((n_users, rank)) @ rng.random((rank, n_items))
    scores = 1 + 4 * (scores - scores.min()) / (np.ptp(scores) + 1e-12)
    ratings = np.clip(np.rint(scores + rng.normal(0, 0.5, scores.shape)), 1, 5)
    mask = rng.random(scores.shape) < density
    mask[np.arange(n_users), rng.integers(0, n_items, n_users)] = True
    rows, cols = np.nonzero(mask)
    return SparseRatings.from_triples((rows + 101).tolist(), (cols * 2 + 7).tolist(), ratings[rows, cols].tolist())


def write_udata(r: SparseRatings, path) -> None:
    with open(path, "w") as fh:
        for u, i, v in r.triples():
            fh.write(f"{u}\t{i}\t{int(v)}\t0\n")


@pytest.fixture
def synthetic():
    return synthetic_ratings()


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
