"""Reconstruction attacks against a group's published item factors.

The adversary holds a group's item factors ``H_g``, its item biases
``b_H_g``, the global mean, the group size and a sampled slice of the
group's ratings. It fits its own user factors and user biases with the
CNMF updates (item side frozen) on that slice only, then the rebuilt matrix
is scored against every true rating of the group.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from fedsplit.cnmf import CnmfHyperparams, cnmf_fit, predict_many
from fedsplit.data import SparseRatings
from fedsplit.errors import DivergenceError, UndefinedMetricError
from fedsplit.evaluation import mean_ci

log = logging.getLogger(__name__)

MODES = ("user", "movie", "ratings")
DEFAULT_FRACTIONS = tuple(round(0.05 * i, 2) for i in range(1, 21))


@dataclass(frozen=True, eq=False)
class AttackKnowledge:
    mode: str
    fraction: float
    subset: SparseRatings
    seed: int


@dataclass(frozen=True)
class AttackResult:
    mode: str
    fraction: float
    relative_error: float
    failed: bool = False


def _count(fraction: float, units: int) -> int:
    # round() guards against 0.05 * 400 landing a hair above 20
    return max(1, min(units, math.ceil(round(fraction * units, 9))))


def sample_knowledge(X_g: SparseRatings, mode: str, fraction: float, seed: int = 0) -> AttackKnowledge:
    """Uniform sample without replacement of whole rows (``user``), whole
    rated columns (``movie``) or single ratings (``ratings``)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if mode not in MODES:
        raise ValueError(f"unknown attack mode {mode!r}")
    if X_g.nnz == 0:
        raise UndefinedMetricError("group has no ratings")
    rng = np.random.default_rng(seed)
    if mode == "user":
        units = np.arange(X_g.n_users)
        keys = X_g.rows
    elif mode == "movie":
        units = np.unique(X_g.cols)
        keys = X_g.cols
    else:
        units = np.arange(X_g.nnz)
        keys = np.arange(X_g.nnz)
    chosen = rng.choice(units, size=_count(fraction, len(units)), replace=False)
    return AttackKnowledge(mode, float(fraction), X_g.select(np.isin(keys, chosen)), seed)


def relative_error_observed(target: SparseRatings, predictions) -> float:
    """``||X - Xhat||^2 / ||X||^2`` over the stored ratings of ``target``."""
    err = target.vals - np.asarray(predictions, dtype=float)
    return float(err @ err / (target.vals @ target.vals))


def reconstruct(
    knowledge: AttackKnowledge,
    target: SparseRatings,
    H_g,
    b_H_g,
    mu_global: float,
    hp: CnmfHyperparams,
    iters: int = 500,
    use_biases: bool = True,
) -> AttackResult:
    """Fit adversarial user factors on ``knowledge.subset`` and score the
    rebuilt matrix on the non-zero entries of ``target``.

    ``target`` is only touched after fitting. On divergence the fit is
    retried once with a ten times smaller user-bias step.
    """
    H_g = np.asarray(H_g, dtype=float)
    k, m = H_g.shape
    n = target.n_users
    if knowledge.subset.shape != (n, m):
        raise ValueError("knowledge subset does not match the group shape")
    rng = np.random.default_rng(knowledge.seed)
    W0 = rng.uniform(0.0, 1.0 / math.sqrt(k), (n, k))
    if use_biases:
        mu, b_H = float(mu_global), np.asarray(b_H_g, dtype=float)
    else:
        mu, b_H = 0.0, np.zeros(m)
    attempt = replace(hp, k=max(k, 2), max_iters=iters, seed=knowledge.seed)
    for tries in range(2):
        try:
            model = cnmf_fit(
                knowledge.subset,
                mu,
                attempt,
                init=(W0, H_g, np.zeros(n), b_H),
                update_biases=use_biases,
                update_user_side_only=True,
            )
            break
        except DivergenceError as exc:
            if tries == 1:
                log.warning("attack %s@%.2f failed: %s", knowledge.mode, knowledge.fraction, exc)
                return AttackResult(knowledge.mode, knowledge.fraction, float("nan"), failed=True)
            attempt = replace(attempt, eta_W=attempt.eta_W / 10)
    pred = predict_many(model, target.rows, target.cols)
    return AttackResult(knowledge.mode, knowledge.fraction, relative_error_observed(target, pred))


@dataclass(frozen=True, eq=False)
class AttackTarget:
    """What the adversary can see for one group, plus the true ratings."""

    group_id: int
    X: SparseRatings
    H: np.ndarray
    b_H: np.ndarray
    mu_global: float
    hyperparams: CnmfHyperparams
    seed: int = 0  # experiment seed the group came from


@dataclass(frozen=True)
class CurvePoint:
    mode: str
    fraction: float
    mean: float
    ci: float
    n_cells: int
    n_failed: int


def attack_cells(targets, modes=MODES, fractions=DEFAULT_FRACTIONS, seeds=(0,), iters: int = 500, use_biases: bool = True) -> list:
    """Run every (target, mode, fraction, seed) attack.

    Returns tuples ``(experiment_seed, group_id, mode, fraction, attack_seed, AttackResult)``.
    """
    out = []
    for t in targets:
        for mode in modes:
            for frac in fractions:
                for s in seeds:
                    know = sample_knowledge(t.X, mode, frac, seed=s)
                    res = reconstruct(know, t.X, t.H, t.b_H, t.mu_global, t.hyperparams, iters, use_biases)
                    out.append((t.seed, t.group_id, mode, float(frac), s, res))
    return out


def curve_table(cells, modes=MODES, fractions=DEFAULT_FRACTIONS) -> list:
    """Mean relative error and 95% CI per (mode, fraction); failed cells are counted, not averaged."""
    table = []
    for mode in modes:
        for frac in fractions:
            results = [c[-1] for c in cells if c[2] == mode and c[3] == float(frac)]
            good = [r.relative_error for r in results if not r.failed]
            failed = len(results) - len(good)
            if good:
                est = mean_ci(good)
                table.append(CurvePoint(mode, float(frac), est.mean, est.ci, len(good), failed))
            else:
                table.append(CurvePoint(mode, float(frac), float("nan"), float("nan"), 0, failed))
    return table


def attack_sweep(targets, modes=MODES, fractions=DEFAULT_FRACTIONS, seeds=(0,), iters: int = 500, use_biases: bool = True) -> list:
    return curve_table(attack_cells(targets, modes, fractions, seeds, iters, use_biases), modes, fractions)


CURVE_FIELDS = ["mode", "fraction", "mean_relative_error", "ci_half_width", "n_cells", "n_failed"]


def curve_rows(table) -> list:
    return [[p.mode, p.fraction, p.mean, p.ci, p.n_cells, p.n_failed] for p in table]
