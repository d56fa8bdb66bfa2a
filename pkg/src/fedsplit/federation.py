"""One-shot federated protocol: mean exchange, local CNMF, joint NMF on the
processor, slicing and distillation back into the clients.

Clients and the processor run in-process but only talk through the typed
messages below, each logged in a :class:`CommunicationLedger`. The
processor never receives user factors, user biases or ratings.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from fedsplit import nmf
from fedsplit.cnmf import CnmfHyperparams, CnmfModel, cnmf_fit, group_mean
from fedsplit.data import GroupPartition, SparseRatings, SplitSet
from fedsplit.errors import FedSplitError, PhaseError, ProtocolError, ShapeError, UndefinedMetricError

log = logging.getLogger(__name__)

SERVER_RANKS = tuple(range(2, 31, 2))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


# --- messages -------------------------------------------------------------


@dataclass(frozen=True)
class MeanMessage:
    group_id: int
    mu: float
    n_ratings: int | None = None  # only consulted by the weighted variant


@dataclass(frozen=True)
class GlobalMeanMessage:
    mu_global: float


@dataclass(frozen=True, eq=False)
class ClientUpload:
    group_id: int
    H_transpose: np.ndarray  # m x k_g
    b_H: np.ndarray  # length m

    def __post_init__(self):
        object.__setattr__(self, "H_transpose", _frozen(self.H_transpose))
        object.__setattr__(self, "b_H", _frozen(self.b_H))


@dataclass(frozen=True, eq=False)
class GlobalDownload:
    group_id: int
    W_global: np.ndarray
    M_g: np.ndarray
    b_H_global: np.ndarray


@dataclass
class CommunicationLedger:
    entries: list = field(default_factory=list)

    def record(self, direction: str, group_id: int, kind: str, payload_floats: int) -> None:
        self.entries.append((direction, group_id, kind, payload_floats))

    def count(self, direction: str, group_id: int | None = None, kind: str | None = None) -> int:
        return sum(
            1
            for d, g, k, _ in self.entries
            if d == direction and (group_id is None or g == group_id) and (kind is None or k == kind)
        )

    @property
    def uplinks(self) -> int:
        return self.count("up")

    @property
    def downlinks(self) -> int:
        return self.count("down")

    def one_shot(self, group_ids) -> bool:
        """Exactly one setup pair and one post-setup pair per client."""
        for g in group_ids:
            if self.count("up", g, "mean") != 1 or self.count("down", g, "global_mean") != 1:
                return False
            if self.count("up", g, "factors") != 1 or self.count("down", g, "global_model") != 1:
                return False
            if self.count("up", g) != 2 or self.count("down", g) != 2:
                return False
        return True

    def as_rows(self) -> list:
        return [dict(direction=d, group_id=g, kind=k, payload_floats=p) for d, g, k, p in self.entries]


# --- model state ----------------------------------------------------------


@dataclass
class ClientState:
    group_id: int
    X: SparseRatings
    mu_g: float
    model: CnmfModel | None = None
    hyperparams: CnmfHyperparams | None = None

    @property
    def k(self) -> int:
        return self.model.k


@dataclass
class GlobalModel:
    W_global: np.ndarray  # m x K
    H_global: np.ndarray  # K x sum(k_g)
    slices: list  # M^g, K x k_g, upload order
    b_H_global: np.ndarray
    mu_global: float
    group_ids: list
    rank_scores: dict = field(default_factory=dict)
    relative_error: float = float("nan")

    @property
    def K(self) -> int:
        return self.W_global.shape[1]

    def slice_for(self, group_id: int) -> np.ndarray:
        return self.slices[self.group_ids.index(group_id)]


@dataclass
class FederatedClientModel:
    group_id: int
    W_star: np.ndarray  # n_g x K
    b_W: np.ndarray
    W_global: np.ndarray
    b_H_global: np.ndarray
    mu_global: float

    @property
    def shape(self):
        return self.W_star.shape[0], self.W_global.shape[0]


@dataclass(frozen=True)
class ServerConfig:
    rank_candidates: tuple = SERVER_RANKS
    folds: int = 5
    val_frac: float = 0.2
    max_iters: int = 1000
    tol: float = 1e-6
    init: str = "nndsvd"
    seed: int = 0
    weighted: bool = False
    fixed_rank: int | None = None

    def nmf_config(self, k: int) -> nmf.NmfConfig:
        return nmf.NmfConfig(k=k, max_iters=self.max_iters, tol=self.tol, init=self.init, seed=self.seed)


# --- protocol steps -------------------------------------------------------


def compute_global_mean(mus, weights=None) -> float:
    """Unweighted mean of group means (weighted by ``weights`` if given)."""
    mus = list(mus)
    if not mus:
        raise UndefinedMetricError("no group means")
    values = np.array([m[1] if isinstance(m, tuple) else m for m in mus], dtype=float)
    if weights is None:
        return float(values.mean())
    return float(np.average(values, weights=np.asarray(weights, dtype=float)))


def server_aggregate(uploads, server_cfg: ServerConfig | None = None, mu_global: float = float("nan"), weights=None) -> GlobalModel:
    """Joint NMF over the concatenated transposed item factors.

    ``X_joint = [H^1.T | ... | H^N.T]``; the server rank is picked by
    held-out CV over ``rank_candidates`` unless ``fixed_rank`` is set, and
    ``H_global`` is cut back into per-client slices in upload order.
    """
    server_cfg = server_cfg or ServerConfig()
    uploads = list(uploads)
    if not uploads:
        raise ProtocolError("no uploads")
    m = uploads[0].H_transpose.shape[0]
    for up in uploads:
        if up.H_transpose.shape[0] != m or up.b_H.shape != (m,):
            raise ProtocolError(f"client {up.group_id} item dimension differs from {m}")
    if len({u.group_id for u in uploads}) != len(uploads):
        raise ProtocolError("duplicate group id in uploads")
    X_joint = np.hstack([u.H_transpose for u in uploads])
    b_stack = np.vstack([u.b_H for u in uploads])
    if server_cfg.weighted and weights is not None:
        b_H_global = np.average(b_stack, axis=0, weights=np.asarray(weights, dtype=float))
    else:
        b_H_global = b_stack.mean(axis=0)

    scores = {}
    if server_cfg.fixed_rank is not None:
        K = min(server_cfg.fixed_rank, min(X_joint.shape))
    else:
        K = nmf.select_rank(
            X_joint,
            server_cfg.rank_candidates,
            folds=server_cfg.folds,
            val_frac=server_cfg.val_frac,
            cfg=server_cfg.nmf_config(2),
            seed=server_cfg.seed,
            scores=scores,
        )
    fit = nmf.nmf_fit(X_joint, server_cfg.nmf_config(K))
    offsets = np.cumsum([0] + [u.H_transpose.shape[1] for u in uploads])
    slices = [fit.H[:, offsets[g] : offsets[g + 1]] for g in range(len(uploads))]
    return GlobalModel(fit.W, fit.H, slices, b_H_global, float(mu_global), [u.group_id for u in uploads], scores, fit.relative_error)


def distill(client: ClientState, M_g, download: GlobalDownload | None = None, mu_global: float | None = None, W_global=None, b_H_global=None) -> FederatedClientModel:
    """``W* = W^g (M^g)^T``: one matrix product, no iteration."""
    M_g = np.asarray(M_g, dtype=float)
    W = client.model.W
    if M_g.ndim != 2 or M_g.shape[1] != W.shape[1]:
        raise ShapeError(f"M_g has shape {M_g.shape}; expected (K, {W.shape[1]})")
    if download is not None:
        W_global, b_H_global = download.W_global, download.b_H_global
    if mu_global is None:
        mu_global = client.model.mu
    return FederatedClientModel(
        client.group_id,
        W @ M_g.T,
        client.model.b_W.copy(),
        None if W_global is None else np.asarray(W_global),
        None if b_H_global is None else np.asarray(b_H_global),
        float(mu_global),
    )


def federated_predict(fcm: FederatedClientModel, i: int, j: int) -> float:
    """Unclamped ``W*[i] . W_global[j] + b_W[i] + b_H_global[j] + mu_global``."""
    n, m = fcm.shape
    if not (0 <= i < n and 0 <= j < m):
        raise IndexError(f"({i}, {j}) outside model shape {(n, m)}")
    return float(fcm.W_star[i] @ fcm.W_global[j] + fcm.b_W[i] + fcm.b_H_global[j] + fcm.mu_global)


def federated_predict_many(fcm: FederatedClientModel, rows, cols) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    dots = np.einsum("ij,ij->i", fcm.W_star[rows], fcm.W_global[cols])
    return dots + fcm.b_W[rows] + fcm.b_H_global[cols] + fcm.mu_global


# --- in-process actors ----------------------------------------------------


class Client:
    """Holds private data and the local model; exposes only protocol messages."""

    def __init__(self, group_id: int, X: SparseRatings, validation: SparseRatings | None = None):
        self.state = ClientState(group_id, X, group_mean(X))
        self.validation = validation
        self.mu_global = None
        self.federated = None

    @property
    def group_id(self) -> int:
        return self.state.group_id

    def mean_message(self) -> MeanMessage:
        return MeanMessage(self.group_id, self.state.mu_g, self.state.X.nnz)

    def receive_global_mean(self, msg: GlobalMeanMessage) -> None:
        self.mu_global = msg.mu_global

    def upload(self) -> ClientUpload:
        if self.state.model is None:
            raise ProtocolError(f"client {self.group_id} has no local model to upload")
        return ClientUpload(self.group_id, self.state.model.H.T, self.state.model.b_H)

    def receive_global_model(self, download: GlobalDownload) -> FederatedClientModel:
        if download.group_id != self.group_id:
            raise ProtocolError(f"client {self.group_id} received slice for {download.group_id}")
        self.federated = distill(self.state, download.M_g, download, self.mu_global)
        return self.federated


class Processor:
    """Aggregator: sees group means, item factors and item biases only."""

    def __init__(self, server_cfg: ServerConfig | None = None):
        self.server_cfg = server_cfg or ServerConfig()
        self.means = []
        self.uploads = []
        self.mu_global = None
        self.global_model = None

    def receive_mean(self, msg: MeanMessage) -> None:
        self.means.append(msg)

    def global_mean(self) -> GlobalMeanMessage:
        weights = [m.n_ratings for m in self.means] if self.server_cfg.weighted else None
        self.mu_global = compute_global_mean([(m.group_id, m.mu) for m in self.means], weights)
        return GlobalMeanMessage(self.mu_global)

    def receive_upload(self, upload: ClientUpload) -> None:
        self.uploads.append(upload)

    def aggregate(self) -> GlobalModel:
        weights = None
        if self.server_cfg.weighted:
            counts = {m.group_id: m.n_ratings for m in self.means}
            weights = [counts[u.group_id] for u in self.uploads]
        self.global_model = server_aggregate(self.uploads, self.server_cfg, self.mu_global, weights)
        return self.global_model

    def download_for(self, group_id: int) -> GlobalDownload:
        gm = self.global_model
        return GlobalDownload(group_id, gm.W_global, gm.slice_for(group_id), gm.b_H_global)

    def reachable_state(self) -> dict:
        """Everything the processor holds, for privacy-boundary checks."""
        return {
            "means": list(self.means),
            "uploads": list(self.uploads),
            "mu_global": self.mu_global,
            "global_model": self.global_model,
        }


class Channel:
    """In-process transport that logs every message."""

    def __init__(self, ledger: CommunicationLedger | None = None):
        self.ledger = ledger or CommunicationLedger()

    def up(self, kind: str, msg, processor_fn):
        self.ledger.record("up", msg.group_id, kind, _payload_size(msg))
        return processor_fn(msg)

    def down(self, kind: str, group_id: int, msg, client_fn):
        self.ledger.record("down", group_id, kind, _payload_size(msg))
        return client_fn(msg)


def _payload_size(msg) -> int:
    total = 0
    for f in fields(msg):
        v = getattr(msg, f.name)
        if isinstance(v, np.ndarray):
            total += v.size
        elif isinstance(v, float):
            total += 1
    return total


# --- orchestration --------------------------------------------------------


@dataclass
class FedSplitRun:
    clients: list  # Client objects, group order
    federated: list  # FederatedClientModel, group order
    global_model: GlobalModel
    ledger: CommunicationLedger
    timings: dict
    mu_global: float

    def local_models(self) -> list:
        return [c.state.model for c in self.clients]


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_fedsplit(
    dataset: SplitSet,
    partition: GroupPartition,
    fit_fn,
    server_cfg: ServerConfig | None = None,
    use_validation: bool = False,
    jobs: int = 1,
) -> FedSplitRun:
    """Execute the protocol phases in order.

    ``fit_fn(client) -> (hyperparams, CnmfModel)`` trains one local model;
    it is handed the client (private data plus ``mu_global``), runs on the
    client side and may tune. Any phase failure is re-raised as
    :class:`PhaseError` tagged with the phase number.
    """
    train = dataset.train
    index = train.user_index()
    clients = []
    for g, members in enumerate(partition.groups(), start=1):
        pos = sorted(index[u] for u in members if u in index)
        if not pos:
            raise PhaseError(0, FedSplitError(f"group {g} has no training users"))
        X_g = train.restrict_users(pos)
        val = dataset.validation.restrict_users(pos) if use_validation else None
        clients.append(Client(g, X_g, val))
    processor = Processor(server_cfg)
    channel = Channel()
    timings = {}

    t0 = time.perf_counter()
    try:
        for c in clients:
            channel.up("mean", c.mean_message(), processor.receive_mean)
        reply = processor.global_mean()
        for c in clients:
            channel.down("global_mean", c.group_id, reply, c.receive_global_mean)
    except FedSplitError as exc:
        raise PhaseError(0, exc) from exc
    timings["setup"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        results = _map(fit_fn, clients, jobs)
        for c, (hp, model) in zip(clients, results):
            c.state.hyperparams, c.state.model = hp, model
    except FedSplitError as exc:
        raise PhaseError(1, exc) from exc
    timings["local_training"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        for c in clients:
            channel.up("factors", c.upload(), processor.receive_upload)
        global_model = processor.aggregate()
        downloads = [processor.download_for(c.group_id) for c in clients]
    except FedSplitError as exc:
        raise PhaseError(2, exc) from exc
    timings["aggregation"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        federated = [channel.down("global_model", c.group_id, d, c.receive_global_model) for c, d in zip(clients, downloads)]
    except FedSplitError as exc:
        raise PhaseError(3, exc) from exc
    timings["distillation"] = time.perf_counter() - t0

    return FedSplitRun(clients, federated, global_model, channel.ledger, timings, processor.mu_global)


@dataclass(frozen=True)
class FixedFit:
    """``fit_fn`` that trains every client with the same hyperparameters."""

    hyperparams: CnmfHyperparams
    use_validation: bool = False

    def __call__(self, client: Client):
        val = client.validation if self.use_validation else None
        return self.hyperparams, cnmf_fit(client.state.X, client.mu_global, self.hyperparams, validation=val)
