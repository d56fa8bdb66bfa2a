import numpy as np
import pytest

from conftest import synthetic_ratings
from fedsplit.config import ExperimentConfig
from fedsplit.experiment import SharedFit, TunedFit, run_seed

SMALL = dict(
    seeds=(0,),
    global_trials=2,
    group_trials=2,
    folds=2,
    tune_iters=10,
    final_iters=30,
    server_ranks=(2, 4),
    server_folds=2,
    server_max_iters=100,
    min_group=8,
    max_group=15,
)


@pytest.fixture(scope="module")
def ratings():
    return synthetic_ratings(n_users=50, n_items=40, density=0.6, seed=3)


def test_seed_result(ratings):
    res = run_seed(ratings, ExperimentConfig(**SMALL), 0)
    assert res.one_shot
    assert len(res.reports) + len(res.excluded_groups) == res.partition.n_groups
    assert res.nonprivate_rmse is not None and np.isfinite(res.nonprivate_rmse)
    assert {"nonprivate", "fedsplit_aggregation"} <= set(res.manifest()["timings"])
    assert len(res.attack_targets()) == res.partition.n_groups


def test_independent_tuning_differs_per_group(ratings):
    res = run_seed(ratings, ExperimentConfig(**{**SMALL, "group_trials": 4, "nonprivate": False}), 0)
    assert res.nonprivate_rmse is None
    assert len({c.state.hyperparams.alpha for c in res.run.clients}) > 1


def test_shared_tuning_gives_every_group_the_same_parameters(ratings):
    res = run_seed(ratings, ExperimentConfig(**{**SMALL, "shared_tuning": True, "nonprivate": False}), 0)
    hps = [c.state.hyperparams for c in res.run.clients]
    assert len({(hp.alpha, hp.beta, hp.eta_W) for hp in hps}) == 1
    assert all(hp.k <= c.state.X.n_users - 1 or hp.k == 2 for hp, c in zip(hps, res.run.clients))
    assert all(hp.max_iters == 30 for hp in hps)


def test_fit_functions_pickle():
    import pickle

    for fn in (TunedFit(trials=3), SharedFit({"k": 3, "alpha": 0.05, "beta": 0.05, "gamma": 0.02, "delta": 0.02, "eta_W": 0.005, "eta_H": 0.005})):
        assert pickle.loads(pickle.dumps(fn)) == fn
