import math

import numpy as np
import pytest

from conftest import synthetic_ratings
from fedsplit import privacy_audit
from fedsplit.cnmf import CnmfHyperparams
from fedsplit.data import SparseRatings
from fedsplit.errors import DivergenceError
from fedsplit.privacy_audit import (
    DEFAULT_FRACTIONS,
    MODES,
    AttackKnowledge,
    AttackTarget,
    attack_cells,
    curve_rows,
    curve_table,
    reconstruct,
    relative_error_observed,
    sample_knowledge,
)


def _pairs(r: SparseRatings):
    return set(zip(r.rows.tolist(), r.cols.tolist()))


def test_default_fractions():
    assert len(DEFAULT_FRACTIONS) == 20
    assert DEFAULT_FRACTIONS[0] == 0.05 and DEFAULT_FRACTIONS[-1] == 1.0


@pytest.mark.parametrize("mode", MODES)
def test_full_fraction_is_everything(mode):
    X = synthetic_ratings(n_users=10, n_items=12)
    k = sample_knowledge(X, mode, 1.0, seed=3)
    assert _pairs(k.subset) == _pairs(X)
    assert k.subset.shape == X.shape


def test_user_mode_ceiling():
    X = synthetic_ratings(n_users=10, n_items=12)
    k = sample_knowledge(X, "user", 0.25, seed=0)
    assert len(set(k.subset.rows.tolist())) == 3
    # whole rows
    for i in set(k.subset.rows.tolist()):
        assert (k.subset.rows == i).sum() == (X.rows == i).sum()


def test_ratings_mode_count():
    dense = np.random.default_rng(0).integers(1, 6, (20, 20)).astype(float)
    X = SparseRatings.from_dense(dense)
    assert X.nnz == 400
    assert sample_knowledge(X, "ratings", 0.05, seed=1).subset.nnz == 20


def test_movie_mode_draws_only_rated_columns():
    # column position 2 (item 5) has no ratings
    X = SparseRatings(np.array([0, 1, 0, 1]), np.array([0, 0, 1, 3]), np.array([4.0, 3.0, 5.0, 2.0]), np.array([1, 2]), np.array([1, 2, 5, 9]))
    for seed in range(10):
        k = sample_knowledge(X, "movie", 0.34, seed=seed)
        cols = set(k.subset.cols.tolist())
        assert len(cols) == 2 and 2 not in cols


def test_tiny_fraction_keeps_one_unit():
    X = synthetic_ratings(n_users=5, n_items=6)
    assert len(set(sample_knowledge(X, "user", 0.01).subset.rows.tolist())) == 1


def test_bad_arguments():
    X = synthetic_ratings(n_users=5, n_items=6)
    with pytest.raises(ValueError):
        sample_knowledge(X, "user", 0.0)
    with pytest.raises(ValueError):
        sample_knowledge(X, "columns", 0.5)


def _rank_one_group():
    W = np.array([[1.0], [2.0]])
    H = np.array([[0.5, 1.0, 0.8]])
    b_W = np.array([0.2, -0.1])
    b_H = np.array([0.1, -0.2, 0.0])
    X = 3.0 + b_W[:, None] + b_H[None, :] + W @ H
    return SparseRatings.from_dense(X), H, b_H


def test_rank_one_group_with_biases_is_recovered():
    X, H, b_H = _rank_one_group()
    hp = CnmfHyperparams(k=2, alpha=0.04, gamma=0.01, eta_W=0.05)
    res = reconstruct(sample_knowledge(X, "ratings", 1.0), X, H, b_H, 3.0, hp, iters=500)
    assert not res.failed
    assert 0 < res.relative_error < 0.05


def test_exact_product_without_biases_is_recovered():
    rng = np.random.default_rng(5)
    H = rng.uniform(0.5, 1.5, (3, 15))
    W = rng.uniform(0.5, 1.5, (8, 3))
    X = SparseRatings.from_dense(W @ H)
    hp = CnmfHyperparams(k=3, alpha=1e-9)
    res = reconstruct(sample_knowledge(X, "user", 1.0), X, H, np.zeros(15), 3.0, hp, iters=500, use_biases=False)
    assert res.relative_error < 1e-3


def _capture_model(monkeypatch):
    seen = {}
    real = privacy_audit.predict_many

    def spy(model, rows, cols):
        seen["model"] = model
        return real(model, rows, cols)

    monkeypatch.setattr(privacy_audit, "predict_many", spy)
    return seen


def test_fit_never_reads_outside_the_subset(monkeypatch):
    X = synthetic_ratings(n_users=12, n_items=10, seed=2)
    H = np.random.default_rng(0).random((3, 10))
    know = sample_knowledge(X, "user", 0.5, seed=0)
    inside = np.isin(X.rows, know.subset.rows)
    altered = SparseRatings(X.rows, X.cols, np.where(inside, X.vals, 6 - X.vals + 0.5), X.user_ids, X.item_ids)
    hp = CnmfHyperparams(k=3)
    seen = _capture_model(monkeypatch)
    reconstruct(know, X, H, np.zeros(10), 3.0, hp, iters=50)
    a = seen["model"]
    reconstruct(know, altered, H, np.zeros(10), 3.0, hp, iters=50)
    b = seen["model"]
    np.testing.assert_array_equal(a.W, b.W)
    np.testing.assert_array_equal(a.b_W, b.b_W)


def test_item_side_stays_published():
    X, H, b_H = _rank_one_group()
    seen = {}
    real = privacy_audit.predict_many
    privacy_audit.predict_many = lambda m, r, c: seen.setdefault("m", m) and real(m, r, c)
    try:
        reconstruct(sample_knowledge(X, "ratings", 0.5), X, H, b_H, 3.0, CnmfHyperparams(k=2), iters=30)
    finally:
        privacy_audit.predict_many = real
    np.testing.assert_array_equal(seen["m"].H, H)
    np.testing.assert_array_equal(seen["m"].b_H, b_H)


def test_score_ignores_unobserved_coordinates():
    target = SparseRatings.from_triples([1, 2], [1, 2], [4.0, 2.0])
    assert relative_error_observed(target, [4.0, 2.0]) == 0.0
    assert relative_error_observed(target, [3.0, 2.0]) == pytest.approx(1 / 20)


def test_divergence_retry_then_failure(monkeypatch):
    X, H, b_H = _rank_one_group()
    calls = []

    def always_diverges(*args, **kw):
        calls.append(args[2].eta_W)
        raise DivergenceError("nan", 1)

    monkeypatch.setattr(privacy_audit, "cnmf_fit", always_diverges)
    res = reconstruct(sample_knowledge(X, "user", 1.0), X, H, b_H, 3.0, CnmfHyperparams(k=2, eta_W=0.005), iters=10)
    assert res.failed and math.isnan(res.relative_error)
    assert calls == pytest.approx([0.005, 0.0005])


def test_divergence_retry_recovers(monkeypatch):
    X, H, b_H = _rank_one_group()
    real = privacy_audit.cnmf_fit
    state = {"n": 0}

    def once(*args, **kw):
        state["n"] += 1
        if state["n"] == 1:
            raise DivergenceError("nan", 1)
        return real(*args, **kw)

    monkeypatch.setattr(privacy_audit, "cnmf_fit", once)
    res = reconstruct(sample_knowledge(X, "user", 1.0), X, H, b_H, 3.0, CnmfHyperparams(k=2), iters=50)
    assert not res.failed and state["n"] == 2


def test_shape_check():
    X, H, b_H = _rank_one_group()
    bad = AttackKnowledge("user", 1.0, SparseRatings.from_triples([1], [1], [3.0]), 0)
    with pytest.raises(ValueError):
        reconstruct(bad, X, H, b_H, 3.0, CnmfHyperparams(k=2))


def test_curve_table_counts_cells_and_failures():
    X, H, b_H = _rank_one_group()
    targets = [AttackTarget(g, X, H, b_H, 3.0, CnmfHyperparams(k=2), seed=0) for g in (1, 2)]
    cells = attack_cells(targets, modes=("user", "ratings"), fractions=(0.5, 1.0), seeds=(0, 1), iters=20)
    assert len(cells) == 2 * 2 * 2 * 2
    cells[0] = (*cells[0][:-1], privacy_audit.AttackResult(cells[0][2], cells[0][3], float("nan"), failed=True))
    table = curve_table(cells, modes=("user", "ratings"), fractions=(0.5, 1.0))
    assert len(table) == 4
    first = table[0]
    assert (first.mode, first.fraction, first.n_cells, first.n_failed) == ("user", 0.5, 3, 1)
    assert all(p.n_cells + p.n_failed == 4 for p in table)
    assert len(curve_rows(table)[0]) == 6
