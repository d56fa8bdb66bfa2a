"""Collaborative NMF: bias-aware matrix completion with non-negative factors.

The model predicts ``W[i] @ H[:, j] + b_W[i] + b_H[j] + mu`` and is fitted
only on observed ratings. One iteration runs, in order:

1. user-bias step, one observed rating at a time:
   ``b_W[i] += eta_W * (err_ij - gamma * b_W[i])``
2. item-bias step, same scheme with ``eta_H`` / ``delta``
3. masked multiplicative W step  ``W *= (X H^T) / (Xhat H^T + alpha W)``
4. masked multiplicative H step  ``H *= (W^T X) / (W^T Xhat + beta H)``

where ``Xhat`` is only ever evaluated at observed coordinates. Factor
entries that a step would push below zero are projected back to 0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numba
import numpy as np

from fedsplit.data import SparseRatings
from fedsplit.errors import DivergenceError, UndefinedMetricError

EPSILON = 1e-12
RATING_MIN, RATING_MAX = 1.0, 5.0


@dataclass(frozen=True)
class CnmfHyperparams:
    k: int = 10
    alpha: float = 0.06
    beta: float = 0.06
    gamma: float = 0.02
    delta: float = 0.02
    eta_W: float = 0.005
    eta_H: float = 0.005
    max_iters: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if min(self.alpha, self.beta, self.gamma, self.delta) < 0:
            raise ValueError("regularisation weights must be non-negative")
        if self.eta_W <= 0 or self.eta_H <= 0:
            raise ValueError("learning rates must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CnmfModel:
    W: np.ndarray  # n x k
    H: np.ndarray  # k x m
    b_W: np.ndarray
    b_H: np.ndarray
    mu: float
    hyperparams: CnmfHyperparams
    n_iter: int = 0
    projections: int = 0
    history: list = field(default_factory=list)

    @property
    def shape(self):
        return self.W.shape[0], self.H.shape[1]

    @property
    def k(self) -> int:
        return self.W.shape[1]


def group_mean(X: SparseRatings) -> float:
    """Average of the stored (non-zero) ratings."""
    if X.nnz == 0:
        raise UndefinedMetricError("mean of an empty rating set")
    return float(X.vals.mean())


@numba.njit(cache=True)
def _dots(rows, cols, W, Q, out):
    k = W.shape[1]
    for t in range(rows.shape[0]):
        u, i = rows[t], cols[t]
        s = 0.0
        for f in range(k):
            s += W[u, f] * Q[i, f]
        out[t] = s


@numba.njit(cache=True)
def _bias_step(rows, cols, vals, dots, mu, bu, bi, eta, reg, which):
    # which == 0 updates user biases, 1 updates item biases
    for t in range(rows.shape[0]):
        u, i = rows[t], cols[t]
        err = vals[t] - (mu + bu[u] + bi[i] + dots[t])
        if which == 0:
            bu[u] += eta * (err - reg * bu[u])
        else:
            bi[i] += eta * (err - reg * bi[i])


@numba.njit(cache=True)
def _factor_step(rows, cols, vals, dots, mu, bu, bi, A, B, reg, eps, side):
    """Multiplicative update of A (rows of A indexed by user if side == 0,
    by item if side == 1) against the fixed factor B. Returns the number of
    entries projected to zero."""
    k = A.shape[1]
    num = np.zeros(A.shape)
    den = np.zeros(A.shape)
    for t in range(rows.shape[0]):
        u, i = rows[t], cols[t]
        est = mu + bu[u] + bi[i] + dots[t]
        r = vals[t]
        if side == 0:
            a, b = u, i
        else:
            a, b = i, u
        for f in range(k):
            num[a, f] += r * B[b, f]
            den[a, f] += est * B[b, f]
    projected = 0
    for a in range(A.shape[0]):
        for f in range(k):
            d = den[a, f] + reg * A[a, f] + eps
            if d <= 0.0:
                if A[a, f] != 0.0:
                    projected += 1
                A[a, f] = 0.0
                continue
            v = A[a, f] * num[a, f] / d
            if v < 0.0:
                projected += 1
                v = 0.0
            A[a, f] = v
    return projected


@numba.njit(cache=True)
def _predict_at(rows, cols, mu, W, Q, bu, bi, out):
    k = W.shape[1]
    for t in range(rows.shape[0]):
        u, i = rows[t], cols[t]
        s = mu + bu[u] + bi[i]
        for f in range(k):
            s += W[u, f] * Q[i, f]
        out[t] = s


def _init_factors(n, m, k, seed):
    rng = np.random.default_rng(seed)
    high = 1.0 / math.sqrt(k)
    W = rng.uniform(0.0, high, (n, k))
    H = rng.uniform(0.0, high, (k, m))
    return W, H


def _rmse_clamped(pred, actual):
    pred = np.clip(pred, RATING_MIN, RATING_MAX)
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


def cnmf_fit(
    X: SparseRatings,
    mu: float,
    hp: CnmfHyperparams,
    validation: SparseRatings | None = None,
    *,
    patience: int = 10,
    init: tuple | None = None,
    update_biases: bool = True,
    update_factors: bool = True,
    update_user_side_only: bool = False,
    record: bool = False,
) -> CnmfModel:
    """Fit CNMF on the observed ratings of ``X`` with a fixed global offset ``mu``.

    ``init`` may supply ``(W, H)`` or ``(W, H, b_W, b_H)``; otherwise factors
    are drawn uniformly from ``[0, 1/sqrt(k)]`` and biases start at zero.
    With a ``validation`` set, training stops once the clamped validation
    RMSE has not improved for ``patience`` iterations and the best
    parameters are returned. ``update_user_side_only`` freezes ``H`` and
    ``b_H`` (used by the reconstruction attack).
    """
    n, m = X.shape
    k = hp.k
    if init is None:
        W, H = _init_factors(n, m, k, hp.seed)
        bu, bi = np.zeros(n), np.zeros(m)
    else:
        W, H = (np.array(a, dtype=float) for a in init[:2])
        if len(init) > 2:
            bu, bi = (np.array(a, dtype=float) for a in init[2:4])
        else:
            bu, bi = np.zeros(n), np.zeros(m)
        k = W.shape[1]
        if W.shape != (n, k) or H.shape != (k, m) or bu.shape != (n,) or bi.shape != (m,):
            raise ValueError("initial parameters do not conform to X")
    Q = np.ascontiguousarray(H.T)
    W = np.ascontiguousarray(W)
    rows, cols, vals = X.rows, X.cols, X.vals
    mu = float(mu)
    dots = np.empty(len(vals))
    projections = 0
    history = []

    if validation is not None:
        vrows, vcols, vvals = validation.rows, validation.cols, validation.vals
        vpred = np.empty(len(vvals))
        best = (np.inf, 0, None)
        stale = 0

    it = 0
    for it in range(1, hp.max_iters + 1):
        _dots(rows, cols, W, Q, dots)
        if update_biases:
            _bias_step(rows, cols, vals, dots, mu, bu, bi, hp.eta_W, hp.gamma, 0)
            if not update_user_side_only:
                _bias_step(rows, cols, vals, dots, mu, bu, bi, hp.eta_H, hp.delta, 1)
        if update_factors:
            projections += _factor_step(rows, cols, vals, dots, mu, bu, bi, W, Q, hp.alpha, EPSILON, 0)
            if not update_user_side_only:
                _dots(rows, cols, W, Q, dots)
                projections += _factor_step(rows, cols, vals, dots, mu, bu, bi, Q, W, hp.beta, EPSILON, 1)
        if not math.isfinite(W.sum() + Q.sum() + bu.sum() + bi.sum()):
            raise DivergenceError("non-finite CNMF parameters", it)
        if record:
            history.append(objective(X, mu, W, Q.T, bu, bi, hp))
        if validation is not None and len(vvals):
            _predict_at(vrows, vcols, mu, W, Q, bu, bi, vpred)
            score = _rmse_clamped(vpred, vvals)
            if score < best[0]:
                best = (score, it, (W.copy(), Q.copy(), bu.copy(), bi.copy()))
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break

    if validation is not None and best[2] is not None:
        W, Q, bu, bi = best[2]
        it = best[1]
    return CnmfModel(W, np.ascontiguousarray(Q.T), bu, bi, mu, hp, it, projections, history)


def objective(X: SparseRatings, mu, W, H, b_W, b_H, hp: CnmfHyperparams) -> float:
    """Regularised squared error over observed entries."""
    pred = np.empty(X.nnz)
    _predict_at(X.rows, X.cols, float(mu), np.ascontiguousarray(W), np.ascontiguousarray(H.T), b_W, b_H, pred)
    err = X.vals - pred
    return float(
        err @ err
        + hp.alpha * np.sum(W * W)
        + hp.beta * np.sum(H * H)
        + hp.gamma * (b_W @ b_W)
        + hp.delta * (b_H @ b_H)
    )


def predict(model: CnmfModel, i: int, j: int) -> float:
    """Unclamped rating estimate for user position ``i`` and item position ``j``."""
    n, m = model.shape
    if not (0 <= i < n and 0 <= j < m):
        raise IndexError(f"({i}, {j}) outside model shape {(n, m)}")
    return float(model.W[i] @ model.H[:, j] + model.b_W[i] + model.b_H[j] + model.mu)


def predict_many(model: CnmfModel, rows, cols) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = np.empty(len(rows))
    _predict_at(rows, cols, float(model.mu), np.ascontiguousarray(model.W), np.ascontiguousarray(model.H.T), model.b_W, model.b_H, out)
    return out


def rmse(pairs) -> float:
    """Root mean squared error over ``(predicted, actual)`` pairs."""
    pairs = np.asarray(list(pairs), dtype=float)
    if pairs.size == 0:
        raise UndefinedMetricError("RMSE of an empty list")
    d = pairs[:, 0] - pairs[:, 1]
    return float(np.sqrt(np.mean(d * d)))


def frobenius_rmse(X, Xhat) -> float:
    """Full-matrix diagnostic ``||X - Xhat||_F^2 / sqrt(m n)``.

    Counts unobserved zeros, so it is not comparable with held-out RMSE.
    """
    X = np.asarray(X, dtype=float)
    R = X - np.asarray(Xhat, dtype=float)
    return float(np.sum(R * R) / math.sqrt(X.size))


def with_iters(hp: CnmfHyperparams, max_iters: int) -> CnmfHyperparams:
    return replace(hp, max_iters=max_iters)
