"""One-shot federated collaborative filtering with non-negative factorizations."""

from fedsplit.cnmf import CnmfHyperparams, CnmfModel, cnmf_fit
from fedsplit.data import SparseRatings, SplitSet, load_movielens, partition_groups, preprocess, split
from fedsplit.federation import FedSplitRun, ServerConfig, run_fedsplit
from fedsplit.nmf import NmfConfig, nmf_fit, select_rank

__version__ = "0.1.0"

__all__ = [
    "CnmfHyperparams",
    "CnmfModel",
    "FedSplitRun",
    "NmfConfig",
    "ServerConfig",
    "SparseRatings",
    "SplitSet",
    "cnmf_fit",
    "load_movielens",
    "nmf_fit",
    "partition_groups",
    "preprocess",
    "run_fedsplit",
    "select_rank",
    "split",
]
