"""Dense NMF with Frobenius-loss multiplicative updates, NNDSVD initialisation
and held-out-entry cross-validation for picking the rank.

This is the processor-side factorisation; the joint matrix it sees is dense,
so the fit itself is unmasked; only rank selection hides entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from fedsplit.errors import DivergenceError, FedSplitError, ShapeError

EPSILON = 1e-12


@dataclass(frozen=True)
class NmfConfig:
    k: int = 2
    max_iters: int = 1000
    tol: float = 1e-6
    init: str = "nndsvd"  # or "random"
    seed: int = 0
    epsilon: float = EPSILON

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("rank must be >= 1")
        if self.tol <= 0 or self.epsilon <= 0:
            raise ValueError("tol and epsilon must be positive")
        if self.init not in ("nndsvd", "random"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class DenseFactorPair:
    W: np.ndarray
    H: np.ndarray
    relative_error: float = float("nan")
    n_iter: int = 0
    history: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.W.shape[1]


def relative_error(X, W, H) -> float:
    """||X - WH||_F^2 / ||X||_F^2."""
    X = np.asarray(X, dtype=float)
    denom = float(np.sum(X * X))
    if denom == 0:
        raise FedSplitError("relative error undefined for an all-zero X")
    R = X - np.asarray(W) @ np.asarray(H)
    return float(np.sum(R * R)) / denom


def _svd(X):
    try:
        return np.linalg.svd(X, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise FedSplitError(f"SVD failed: {exc}") from exc


def nndsvd_init(X, k: int, svd=None) -> DenseFactorPair:
    """Basic NNDSVD (zeros stay zero). ``svd`` may carry a precomputed
    thin SVD of ``X`` so several ranks can share one decomposition."""
    X = np.asarray(X, dtype=float)
    n, m = X.shape
    if k > min(n, m):
        raise ShapeError(f"rank {k} exceeds min(n, m) = {min(n, m)}")
    U, S, Vt = svd if svd is not None else _svd(X)
    W = np.zeros((n, k))
    H = np.zeros((k, m))
    W[:, 0] = np.sqrt(S[0]) * np.abs(U[:, 0])
    H[0, :] = np.sqrt(S[0]) * np.abs(Vt[0, :])
    for j in range(1, k):
        x, y = U[:, j], Vt[j, :]
        xp, xn = np.maximum(x, 0), np.maximum(-x, 0)
        yp, yn = np.maximum(y, 0), np.maximum(-y, 0)
        xpn, ypn = np.linalg.norm(xp), np.linalg.norm(yp)
        xnn, ynn = np.linalg.norm(xn), np.linalg.norm(yn)
        mp, mn = xpn * ypn, xnn * ynn
        if mp > mn:
            u, v, sigma = xp / xpn, yp / ypn, mp
        elif mn > 0:
            u, v, sigma = xn / xnn, yn / ynn, mn
        else:
            continue
        scale = np.sqrt(S[j] * sigma)
        W[:, j] = scale * u
        H[j, :] = scale * v
    return DenseFactorPair(W, H)


def random_init(X, k: int, seed: int = 0) -> DenseFactorPair:
    X = np.asarray(X, dtype=float)
    rng = np.random.default_rng(seed)
    scale = np.sqrt(max(X.mean(), EPSILON) / k)
    return DenseFactorPair(rng.uniform(0, 2 * scale, (X.shape[0], k)), rng.uniform(0, 2 * scale, (k, X.shape[1])))


def _init(X, cfg: NmfConfig, svd=None) -> DenseFactorPair:
    if cfg.init == "nndsvd":
        return nndsvd_init(X, cfg.k, svd)
    return random_init(X, cfg.k, cfg.seed)


def update_W(X, W, H, eps=EPSILON):
    return W * (X @ H.T) / (W @ (H @ H.T) + eps)


def update_H(X, W, H, eps=EPSILON):
    return H * (W.T @ X) / ((W.T @ W) @ H + eps)


def _check_finite(W, H, it):
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(H))):
        raise DivergenceError("non-finite NMF factors", it)


def nmf_fit(X, cfg: NmfConfig, init: DenseFactorPair | None = None, record: bool = False) -> DenseFactorPair:
    """Alternate W and H multiplicative updates until the relative error
    changes by less than ``cfg.tol`` or ``cfg.max_iters`` sweeps are done.

    With ``record`` the relative error after every sweep is kept in
    ``history`` (index 0 is the initialisation).
    """
    X = np.asarray(X, dtype=float)
    if np.any(X < 0):
        raise ValueError("NMF input must be non-negative")
    if not np.any(X):
        raise FedSplitError("NMF input is all zeros")
    start = init if init is not None else _init(X, cfg)
    W, H = start.W.astype(float, copy=True), start.H.astype(float, copy=True)
    if W.shape != (X.shape[0], cfg.k) or H.shape != (cfg.k, X.shape[1]):
        raise ShapeError("initial factors do not conform to X and cfg.k")
    err = relative_error(X, W, H)
    history = [err] if record else []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        W = update_W(X, W, H, cfg.epsilon)
        H = update_H(X, W, H, cfg.epsilon)
        _check_finite(W, H, it)
        new_err = relative_error(X, W, H)
        if record:
            history.append(new_err)
        done = abs(err - new_err) < cfg.tol
        err = new_err
        if done:
            break
    return DenseFactorPair(W, H, err, it if cfg.max_iters else 0, history)


@njit(cache=True)
def _impute(X, WH, train_mask, Xf):
    """Write the EM fill (observed X, else WH) into ``Xf`` and return the
    squared error of WH on the observed entries, in one pass."""
    n, m = X.shape
    sq = 0.0
    for i in range(n):
        for j in range(m):
            if train_mask[i, j]:
                d = X[i, j] - WH[i, j]
                sq += d * d
                Xf[i, j] = X[i, j]
            else:
                Xf[i, j] = WH[i, j]
    return sq


def _masked_fit(X, train_mask, cfg: NmfConfig, svd=None) -> DenseFactorPair:
    """Fit on the entries flagged in ``train_mask``; the rest are re-imputed
    from the current reconstruction before every sweep. ``svd`` is the thin
    SVD of the mean-filled start matrix, shared across ranks."""
    observed = X[train_mask]
    fill = observed.mean() if observed.size else 0.0
    Xf = np.where(train_mask, X, fill)
    f = _init(Xf, cfg, svd)
    W, H = f.W, f.H
    norm = max(float(observed @ observed), EPSILON)
    _impute(X, W @ H, train_mask, Xf)
    prev = np.inf
    for it in range(1, cfg.max_iters + 1):
        W = update_W(Xf, W, H, cfg.epsilon)
        H = update_H(Xf, W, H, cfg.epsilon)
        _check_finite(W, H, it)
        err = _impute(X, W @ H, train_mask, Xf) / norm
        if abs(prev - err) < cfg.tol:
            break
        prev = err
    return DenseFactorPair(W, H, err, it)


def select_rank(X, candidates, folds: int = 5, val_frac: float = 0.2, cfg: NmfConfig | None = None, seed: int = 0, scores: dict | None = None) -> int:
    """Pick the rank with the lowest mean held-out reconstruction error.

    Entries are shuffled and cut into ``folds`` disjoint held-out sets of
    ``val_frac`` of the entries each (the last folds may be smaller when
    ``folds * val_frac > 1``). Ties go to the smaller rank. When ``scores``
    is a dict it receives ``{k: mean_error}``.
    """
    candidates = sorted(set(int(k) for k in candidates))
    if not candidates:
        raise ValueError("no candidate ranks")
    X = np.asarray(X, dtype=float)
    limit = min(X.shape)
    usable = [k for k in candidates if k <= limit]
    if not usable:
        usable = [min(candidates[0], limit)]
    if len(usable) == 1:
        if scores is not None:
            scores[usable[0]] = float("nan")
        return usable[0]
    cfg = cfg or NmfConfig()
    rng = np.random.default_rng(seed)
    n_entries = X.size
    perm = rng.permutation(n_entries)
    fold_size = max(1, int(round(val_frac * n_entries)))
    held = [perm[f * fold_size : (f + 1) * fold_size] for f in range(folds)]
    held = [h for h in held if len(h)]
    masks, svds = [], []
    for h in held:
        mask = np.ones(n_entries, dtype=bool)
        mask[h] = False
        mask = mask.reshape(X.shape)
        masks.append(mask)
        if cfg.init == "nndsvd":
            svds.append(_svd(np.where(mask, X, X[mask].mean())))
        else:
            svds.append(None)
    best_k, best = None, np.inf
    for k in usable:
        errs = []
        kcfg = NmfConfig(k=k, max_iters=cfg.max_iters, tol=cfg.tol, init=cfg.init, seed=cfg.seed, epsilon=cfg.epsilon)
        for mask, svd in zip(masks, svds):
            fit = _masked_fit(X, mask, kcfg, svd)
            R = (X - fit.W @ fit.H)[~mask]
            V = X[~mask]
            errs.append(float(R @ R) / max(float(V @ V), EPSILON))
        score = float(np.mean(errs))
        if scores is not None:
            scores[k] = score
        if score < best:
            best_k, best = k, score
    return best_k
