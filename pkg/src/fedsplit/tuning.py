"""Random-search hyperparameter tuning with K-fold CV over observed ratings."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from fedsplit.cnmf import CnmfHyperparams, cnmf_fit, predict_many
from fedsplit.data import SparseRatings

log = logging.getLogger(__name__)

LOG_PARAMS = ("alpha", "beta", "gamma", "delta", "eta_W", "eta_H")


@dataclass(frozen=True)
class SearchSpace:
    alpha: tuple = (0.04, 0.08)
    beta: tuple = (0.04, 0.08)
    gamma: tuple = (0.01, 0.04)
    delta: tuple = (0.01, 0.04)
    eta_W: tuple = (0.002, 0.009)
    eta_H: tuple = (0.002, 0.009)
    k: tuple = (2, 20)

    def __post_init__(self):
        for name in LOG_PARAMS:
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"bad range for {name}: {(lo, hi)}")
        if not 2 <= self.k[0] <= self.k[1]:
            raise ValueError(f"bad k range {self.k}")

    @classmethod
    def for_users(cls, n_users: int, **overrides) -> "SearchSpace":
        """Default space with k in [2, min(n, 21) - 1]; collapses to k=2 for tiny groups."""
        k_hi = max(2, min(n_users, 21) - 1)
        return cls(k=(2, k_hi), **overrides)

    def sample(self, rng: np.random.Generator) -> dict:
        out = {}
        for name in LOG_PARAMS:
            lo, hi = getattr(self, name)
            out[name] = lo if lo == hi else float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        out["k"] = int(rng.integers(self.k[0], self.k[1] + 1))
        return out

    def midpoint(self) -> dict:
        out = {name: float(math.sqrt(getattr(self, name)[0] * getattr(self, name)[1])) for name in LOG_PARAMS}
        out["k"] = (self.k[0] + self.k[1]) // 2
        return out


@dataclass
class TrialResult:
    index: int
    params: dict
    fold_rmse: list = field(default_factory=list)

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.fold_rmse))


def kfold_masks(n: int, folds: int, rng: np.random.Generator) -> list:
    """Boolean held-out masks partitioning ``n`` entries into ``folds`` parts."""
    perm = rng.permutation(n)
    masks = []
    for part in np.array_split(perm, folds):
        m = np.zeros(n, dtype=bool)
        m[part] = True
        masks.append(m)
    return masks


def cv_splits(X: SparseRatings, folds: int, seed: int) -> list:
    """(train, held-out) pairs. Falls back to one 80/20 split when there are
    too few ratings for ``folds`` non-trivial folds."""
    rng = np.random.default_rng(seed)
    if folds >= 2 and X.nnz >= 2 * folds:
        masks = kfold_masks(X.nnz, folds, rng)
    else:
        log.warning("only %d ratings; using a single 80/20 validation split", X.nnz)
        n_val = max(1, int(round(0.2 * X.nnz)))
        masks = [np.zeros(X.nnz, dtype=bool)]
        masks[0][rng.permutation(X.nnz)[:n_val]] = True
    return [(X.select(~m), X.select(m)) for m in masks]


def cv_rmse(splits, mu: float, hp: CnmfHyperparams) -> list:
    out = []
    for train, held in splits:
        model = cnmf_fit(train, mu, hp)
        pred = np.clip(predict_many(model, held.rows, held.cols), 1.0, 5.0)
        out.append(float(np.sqrt(np.mean((pred - held.vals) ** 2))))
    return out


def tune(
    X: SparseRatings,
    space: SearchSpace,
    trials: int,
    folds: int = 5,
    seed: int = 0,
    mu: float | None = None,
    iters: int = 100,
    log_rows: list | None = None,
) -> CnmfHyperparams:
    """Random search; returns the hyperparameters with the lowest mean CV RMSE.

    Ties keep the earliest trial. ``log_rows`` (if given) collects one
    :class:`TrialResult` per trial. The returned object carries
    ``max_iters=iters``; callers set the final-fit budget themselves.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    if mu is None:
        mu = float(X.vals.mean())
    rng = np.random.default_rng(seed)
    splits = cv_splits(X, folds, seed)
    best = None
    for t in range(trials):
        params = space.sample(rng)
        hp = CnmfHyperparams(max_iters=iters, seed=seed, **params)
        result = TrialResult(t, params, cv_rmse(splits, mu, hp))
        if log_rows is not None:
            log_rows.append(result)
        if best is None or result.mean_rmse < best[0]:
            best = (result.mean_rmse, hp)
    return best[1]


def clip_rank(params: dict, n_users: int) -> dict:
    """Copy of ``params`` with k capped at the group's own upper bound."""
    return {**params, "k": min(params["k"], SearchSpace.for_users(n_users).k[1])}


def tune_shared(groups, trials: int, folds: int = 5, seed: int = 0, iters: int = 100, space: SearchSpace | None = None) -> dict:
    """One random search for every group at once.

    ``groups`` is a list of ``(X, mu)``. A trial's score is the mean over
    groups of each group's CV RMSE, with k clipped per group; the winning
    parameter dict (unclipped k) is returned.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    space = space or SearchSpace()
    rng = np.random.default_rng(seed)
    prepared = [(cv_splits(X, folds, seed + g), mu, X.n_users) for g, (X, mu) in enumerate(groups)]
    best = None
    for _ in range(trials):
        params = space.sample(rng)
        scores = []
        for splits, mu, n_users in prepared:
            hp = CnmfHyperparams(max_iters=iters, seed=seed, **clip_rank(params, n_users))
            scores.append(float(np.mean(cv_rmse(splits, mu, hp))))
        score = float(np.mean(scores))
        if best is None or score < best[0]:
            best = (score, params)
    return best[1]


def trials_csv_lines(results) -> list:
    """Comma-separated trial log: index, params, per-fold RMSEs, mean."""
    if not results:
        return []
    names = list(results[0].params)
    n_folds = max(len(r.fold_rmse) for r in results)
    header = ["trial", *names, *(f"fold{f}" for f in range(n_folds)), "mean_rmse"]
    lines = [",".join(header)]
    for r in results:
        folds = [f"{v:.6f}" for v in r.fold_rmse] + [""] * (n_folds - len(r.fold_rmse))
        lines.append(",".join([str(r.index), *(f"{r.params[n]:.6g}" for n in names), *folds, f"{r.mean_rmse:.6f}"]))
    return lines
