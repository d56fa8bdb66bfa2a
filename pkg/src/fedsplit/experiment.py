"""Per-seed experiment driver: split, partition, non-private baseline,
tuned local models, one FedSPLIT run and the per-group reports."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

from fedsplit.cnmf import CnmfHyperparams, cnmf_fit, group_mean, predict_many
from fedsplit.config import ExperimentConfig
from fedsplit.data import GroupPartition, SparseRatings, SplitSet, group_matrices, partition_groups, split
from fedsplit.evaluation import GroupReport, evaluate_group
from fedsplit.federation import FedSplitRun, ServerConfig, compute_global_mean, federated_predict_many, run_fedsplit
from fedsplit.privacy_audit import AttackTarget
from fedsplit.tuning import SearchSpace, clip_rank, tune, tune_shared

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TunedFit:
    """Client-side training: random-search tuning, then the final fit.

    A plain top-level class so it can be shipped to worker processes.
    """

    trials: int = 100
    folds: int = 5
    tune_iters: int = 100
    final_iters: int = 500
    seed: int = 0
    use_validation: bool = False
    patience: int = 10

    def hyperparams(self, X: SparseRatings, mu: float, salt: int = 0) -> CnmfHyperparams:
        hp = tune(X, SearchSpace.for_users(X.n_users), self.trials, self.folds, seed=self.seed * 100_003 + salt, mu=mu, iters=self.tune_iters)
        return replace(hp, max_iters=self.final_iters, seed=self.seed)

    def __call__(self, client):
        X = client.state.X
        hp = self.hyperparams(X, client.mu_global, client.group_id)
        val = client.validation if self.use_validation else None
        return hp, cnmf_fit(X, client.mu_global, hp, validation=val, patience=self.patience)


@dataclass(frozen=True)
class SharedFit:
    """Client-side final fit with parameters from a search shared by all
    groups; only k is adapted to the group's size."""

    params: dict
    final_iters: int = 500
    seed: int = 0
    use_validation: bool = False
    patience: int = 10

    def __call__(self, client):
        X = client.state.X
        hp = CnmfHyperparams(max_iters=self.final_iters, seed=self.seed, **clip_rank(self.params, X.n_users))
        val = client.validation if self.use_validation else None
        return hp, cnmf_fit(X, client.mu_global, hp, validation=val, patience=self.patience)


def shared_fit(splits: SplitSet, partition: GroupPartition, cfg: ExperimentConfig, seed: int) -> SharedFit:
    """Run the shared search over every group's training ratings, each
    centred on the same global mean the protocol will hand out."""
    mats = group_matrices(splits.train, partition)
    weights = [X.nnz for X in mats] if cfg.weighted else None
    mu = compute_global_mean([group_mean(X) for X in mats], weights)
    params = tune_shared([(X, mu) for X in mats], cfg.group_trials, cfg.folds, seed=seed * 100_003, iters=cfg.tune_iters)
    return SharedFit(params, cfg.final_iters, seed, cfg.use_validation, cfg.patience)


def server_config(cfg: ExperimentConfig, seed: int) -> ServerConfig:
    return ServerConfig(
        rank_candidates=tuple(cfg.server_ranks),
        folds=cfg.server_folds,
        val_frac=cfg.server_val_frac,
        max_iters=cfg.server_max_iters,
        tol=cfg.server_tol,
        init=cfg.server_init,
        seed=seed,
        weighted=cfg.weighted,
        fixed_rank=cfg.fixed_rank,
    )


@dataclass
class SeedResult:
    seed: int
    splits: SplitSet
    partition: GroupPartition
    run: FedSplitRun
    reports: list
    excluded_groups: list = field(default_factory=list)
    nonprivate_rmse: float | None = None
    nonprivate_hp: CnmfHyperparams | None = None
    timings: dict = field(default_factory=dict)

    @property
    def one_shot(self) -> bool:
        return self.run.ledger.one_shot([c.group_id for c in self.run.clients])

    def attack_targets(self) -> list:
        return [
            AttackTarget(c.group_id, c.state.X, c.state.model.H, c.state.model.b_H, self.run.mu_global, c.state.hyperparams, self.seed)
            for c in self.run.clients
        ]

    def manifest(self) -> dict:
        gm = self.run.global_model
        return {
            "seed": self.seed,
            "n_groups": self.partition.n_groups,
            "group_sizes": self.partition.sizes(),
            "split_sizes": [self.splits.train.nnz, self.splits.validation.nnz, self.splits.test.nnz],
            "server_rank": gm.K,
            "rank_scores": {str(k): v for k, v in sorted(gm.rank_scores.items())},
            "server_relative_error": gm.relative_error,
            "mu_global": self.run.mu_global,
            "local_hyperparams": {str(c.group_id): c.state.hyperparams.to_dict() for c in self.run.clients},
            "nonprivate_rmse": self.nonprivate_rmse,
            "nonprivate_hyperparams": None if self.nonprivate_hp is None else self.nonprivate_hp.to_dict(),
            "excluded_groups": self.excluded_groups,
            "one_shot": self.one_shot,
            "ledger": self.run.ledger.as_rows(),
            "timings": {**self.timings, **{f"fedsplit_{k}": v for k, v in self.run.timings.items()}},
        }


def nonprivate_baseline(splits: SplitSet, cfg: ExperimentConfig, seed: int) -> tuple[float, CnmfHyperparams]:
    """Single CNMF over all training users; test RMSE after clamping."""
    fit = TunedFit(cfg.global_trials, cfg.folds, cfg.tune_iters, cfg.final_iters, seed, cfg.use_validation, cfg.patience)
    train = splits.train
    mu = group_mean(train)
    hp = fit.hyperparams(train, mu)
    model = cnmf_fit(train, mu, hp, validation=splits.validation if cfg.use_validation else None, patience=cfg.patience)
    return evaluate_group(lambda r, c: predict_many(model, r, c), splits.test), hp


def group_reports(splits: SplitSet, run: FedSplitRun, seed: int) -> tuple[list, list]:
    """Local vs federated test RMSE for every group with test ratings."""
    index = splits.train.user_index()
    reports, excluded = [], []
    for client, fed in zip(run.clients, run.federated):
        X = client.state.X
        positions = [index[u] for u in X.user_ids.tolist()]
        test = splits.test.restrict_users(positions)
        if test.nnz == 0:
            excluded.append(client.group_id)
            continue
        local = evaluate_group(lambda r, c: predict_many(client.state.model, r, c), test)
        federated = evaluate_group(lambda r, c: federated_predict_many(fed, r, c), test)
        reports.append(GroupReport(client.group_id, X.n_users, X.nnz, local, federated, seed))
    return reports, excluded


def run_seed(ratings: SparseRatings, cfg: ExperimentConfig, seed: int, jobs: int = 1) -> SeedResult:
    timings = {}
    splits = split(ratings, cfg.test_frac, cfg.val_frac, seed)
    partition = partition_groups(splits.train.user_ids.tolist(), cfg.min_group, cfg.max_group, seed)

    nonprivate = (None, None)
    if cfg.nonprivate:
        t0 = time.perf_counter()
        nonprivate = nonprivate_baseline(splits, cfg, seed)
        timings["nonprivate"] = time.perf_counter() - t0

    if cfg.shared_tuning:
        fit = shared_fit(splits, partition, cfg, seed)
    else:
        fit = TunedFit(cfg.group_trials, cfg.folds, cfg.tune_iters, cfg.final_iters, seed, cfg.use_validation, cfg.patience)
    run = run_fedsplit(splits, partition, fit, server_config(cfg, seed), use_validation=cfg.use_validation, jobs=jobs)
    reports, excluded = group_reports(splits, run, seed)
    if excluded:
        log.warning("seed %d: groups without test ratings excluded: %s", seed, excluded)
    return SeedResult(seed, splits, partition, run, reports, excluded, nonprivate[0], nonprivate[1], timings)
