"""MovieLens ingestion, preprocessing, train/validation/test splitting and
random group partitioning.

Ratings are held as coordinate triples over dense row/column positions.
External user and item ids are kept in ``user_ids`` / ``item_ids`` so that
position ``p`` maps back to ``user_ids[p]``. Zeros are never stored.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import scipy.sparse as sp

from fedsplit.errors import (
    DegenerateDatasetError,
    EmptyDatasetError,
    ParseError,
    SplitInfeasibleError,
    TooFewUsersError,
)

FORMATS = ("udata", "csv", "dat")


class RatingTriple(NamedTuple):
    user_id: int
    item_id: int
    rating: float


@dataclass(frozen=True, eq=False)
class SparseRatings:
    """Users x items explicit-feedback matrix stored by its non-zero triples.

    ``rows``/``cols`` index into ``user_ids``/``item_ids``. Triples are kept
    sorted by (row, col) and each coordinate appears at most once.
    """

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray

    def __post_init__(self):
        if not (len(self.rows) == len(self.cols) == len(self.vals)):
            raise ValueError("rows, cols and vals must have equal length")
        if len(self.vals) and np.any(self.vals <= 0):
            raise ValueError("stored ratings must be strictly positive")
        if len(self.rows) and (self.rows.max() >= len(self.user_ids) or self.cols.max() >= len(self.item_ids)):
            raise ValueError("coordinates out of range of the index maps")

    @classmethod
    def from_triples(cls, users, items, ratings, user_ids=None, item_ids=None) -> "SparseRatings":
        """Build from external ids. Duplicated (user, item) pairs keep the last one.

        When ``user_ids``/``item_ids`` are given they fix the index space;
        otherwise the sorted unique ids are used.
        """
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        ratings = np.asarray(ratings, dtype=np.float64)
        if user_ids is None:
            user_ids = np.unique(users)
        if item_ids is None:
            item_ids = np.unique(items)
        user_ids = np.asarray(user_ids, dtype=np.int64)
        item_ids = np.asarray(item_ids, dtype=np.int64)
        rows = np.searchsorted(user_ids, users)
        cols = np.searchsorted(item_ids, items)
        if len(users):
            bad = (rows >= len(user_ids)) | (cols >= len(item_ids))
            bad |= user_ids[np.minimum(rows, len(user_ids) - 1)] != users
            bad |= item_ids[np.minimum(cols, len(item_ids) - 1)] != items
            if bad.any():
                raise ValueError("triples reference ids outside the given index maps")
        return cls._from_positions(rows, cols, ratings, user_ids, item_ids)

    @classmethod
    def _from_positions(cls, rows, cols, vals, user_ids, item_ids) -> "SparseRatings":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        key = rows * max(len(item_ids), 1) + cols
        # stable sort keeps input order among duplicates; take the last of each run
        order = np.argsort(key, kind="stable")
        key = key[order]
        last = np.ones(len(key), dtype=bool)
        if len(key):
            last[:-1] = key[1:] != key[:-1]
        order = order[last]
        return cls(rows[order], cols[order], vals[order], np.asarray(user_ids), np.asarray(item_ids))

    @classmethod
    def from_dense(cls, X) -> "SparseRatings":
        X = np.asarray(X, dtype=np.float64)
        rows, cols = np.nonzero(X)
        return cls._from_positions(rows, cols, X[rows, cols], np.arange(X.shape[0]), np.arange(X.shape[1]))

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_users, self.n_items

    @property
    def nnz(self) -> int:
        return len(self.vals)

    def __len__(self) -> int:
        return self.nnz

    def triples(self) -> Iterator[RatingTriple]:
        for r, c, v in zip(self.rows, self.cols, self.vals):
            yield RatingTriple(int(self.user_ids[r]), int(self.item_ids[c]), float(v))

    def user_index(self) -> dict:
        return {int(u): p for p, u in enumerate(self.user_ids)}

    def item_index(self) -> dict:
        return {int(i): p for p, i in enumerate(self.item_ids)}

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        X = np.zeros(self.shape)
        X[self.rows, self.cols] = self.vals
        return X

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n_users)

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.n_items)

    def select(self, mask) -> "SparseRatings":
        """Keep the triples where ``mask`` is true; index maps are unchanged."""
        mask = np.asarray(mask)
        return SparseRatings(self.rows[mask], self.cols[mask], self.vals[mask], self.user_ids, self.item_ids)

    def restrict_users(self, positions) -> "SparseRatings":
        """Sub-matrix over the given user positions (in that order), same item space."""
        positions = np.asarray(positions, dtype=np.int64)
        remap = np.full(self.n_users, -1, dtype=np.int64)
        remap[positions] = np.arange(len(positions))
        keep = remap[self.rows] >= 0
        return SparseRatings._from_positions(
            remap[self.rows[keep]], self.cols[keep], self.vals[keep], self.user_ids[positions], self.item_ids
        )

    def compact(self) -> "SparseRatings":
        """Drop users and items without any stored rating."""
        urows = np.unique(self.rows)
        ucols = np.unique(self.cols)
        return SparseRatings(
            np.searchsorted(urows, self.rows),
            np.searchsorted(ucols, self.cols),
            self.vals.copy(),
            self.user_ids[urows],
            self.item_ids[ucols],
        )

    def same_space(self, other: "SparseRatings") -> bool:
        return np.array_equal(self.user_ids, other.user_ids) and np.array_equal(self.item_ids, other.item_ids)


@dataclass(frozen=True, eq=False)
class SplitSet:
    train: SparseRatings
    validation: SparseRatings
    test: SparseRatings

    @property
    def train_full(self) -> SparseRatings:
        """train and validation merged (everything except the test set)."""
        return concat([self.train, self.validation])


@dataclass(frozen=True)
class GroupPartition:
    """Assignment of users (external ids) to groups numbered 1..N."""

    assignments: dict
    n_groups: int

    def members(self, group_id: int) -> list:
        return [u for u, g in self.assignments.items() if g == group_id]

    def groups(self) -> list:
        """Member lists in group order, each in the order users were assigned."""
        out = [[] for _ in range(self.n_groups)]
        for u, g in self.assignments.items():
            out[g - 1].append(u)
        return out

    def sizes(self) -> list:
        return [len(m) for m in self.groups()]


def concat(parts) -> SparseRatings:
    base = parts[0]
    for p in parts[1:]:
        if not p.same_space(base):
            raise ValueError("cannot concatenate ratings over different index spaces")
    return SparseRatings._from_positions(
        np.concatenate([p.rows for p in parts]),
        np.concatenate([p.cols for p in parts]),
        np.concatenate([p.vals for p in parts]),
        base.user_ids,
        base.item_ids,
    )


def _detect_format(path: Path) -> str:
    name = path.name.lower()
    if name.endswith(".csv"):
        return "csv"
    if name.endswith(".dat"):
        return "dat"
    return "udata"


def load_movielens(path, format: str = "auto") -> SparseRatings:
    """Read a MovieLens rating file.

    ``format`` is one of ``udata`` (whitespace/tab separated ``user item
    rating [timestamp]``), ``csv`` (``user,item,rating[,timestamp]`` with an
    optional header) or ``dat`` (``user::item::rating::timestamp``).
    """
    path = Path(path)
    if format == "auto":
        format = _detect_format(path)
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    users, items, ratings = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if format == "csv":
                fields = line.split(",")
            elif format == "dat":
                fields = line.split("::")
            else:
                fields = line.split()
            if len(fields) < 3:
                raise ParseError(f"expected at least 3 fields, got {len(fields)}", lineno)
            try:
                u, i, r = int(fields[0]), int(fields[1]), float(fields[2])
            except ValueError:
                if format == "csv" and lineno == 1 and not users:
                    continue  # header row
                raise ParseError(f"malformed record {line!r}", lineno) from None
            if not 0.5 <= r <= 5:
                raise ParseError(f"rating {r} outside [0.5, 5]", lineno)
            users.append(u)
            items.append(i)
            ratings.append(r)
    if not users:
        raise EmptyDatasetError(f"{path} contains no ratings")
    return SparseRatings.from_triples(users, items, ratings)


def preprocess(raw: SparseRatings, min_user_ratings: int = 20, min_item_ratings: int = 20, rounding: str = "ceil") -> SparseRatings:
    """Drop sparse users, then sparse items (one pass each), then round half stars.

    ``rounding="ceil"`` maps every half-star rating up to the next integer
    (3.5 -> 4); ``rounding="half"`` only maps 0.5 -> 1.
    """
    if raw.nnz == 0:
        raise EmptyDatasetError("nothing to preprocess")
    if rounding not in ("ceil", "half"):
        raise ValueError(f"unknown rounding mode {rounding!r}")
    keep = raw.user_counts()[raw.rows] >= min_user_ratings
    step = raw.select(keep)
    keep = step.item_counts()[step.cols] >= min_item_ratings
    step = step.select(keep)
    if step.nnz == 0:
        raise DegenerateDatasetError(
            f"no ratings left after filtering (min_user_ratings={min_user_ratings}, min_item_ratings={min_item_ratings})"
        )
    vals = np.ceil(step.vals) if rounding == "ceil" else np.where(step.vals == 0.5, 1.0, step.vals)
    step = SparseRatings(step.rows, step.cols, vals, step.user_ids, step.item_ids)
    return step.compact()


def split(ratings: SparseRatings, test_frac: float = 0.2, val_frac: float = 0.2, seed: int = 0) -> SplitSet:
    """Uniform random triple split, then repair so train covers every user and item.

    ``val_frac`` is a share of the non-test part. Repair walks the held-out
    triples in (row, col) order and moves a triple to train whenever its user
    or item has no train rating yet.
    """
    if not (0 < test_frac < 1 and 0 < val_frac < 1):
        raise ValueError("fractions must lie in (0, 1)")
    n = ratings.nnz
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = int(round(test_frac * n))
    n_val = int(round(val_frac * (n - n_test)))
    label = np.zeros(n, dtype=np.int8)  # 0 train, 1 validation, 2 test
    label[perm[:n_test]] = 2
    label[perm[n_test : n_test + n_val]] = 1

    ucount = np.bincount(ratings.rows[label == 0], minlength=ratings.n_users)
    icount = np.bincount(ratings.cols[label == 0], minlength=ratings.n_items)
    for t in np.flatnonzero(label != 0):
        u, i = ratings.rows[t], ratings.cols[t]
        if ucount[u] == 0 or icount[i] == 0:
            label[t] = 0
            ucount[u] += 1
            icount[i] += 1
    if not np.any(label == 2):
        raise SplitInfeasibleError("test set is empty after coverage repair")
    return SplitSet(ratings.select(label == 0), ratings.select(label == 1), ratings.select(label == 2))


def partition_groups(users, min_size: int = 3, max_size: int = 30, seed: int = 0) -> GroupPartition:
    """Shuffle users and cut them into groups of uniformly drawn size.

    A trailing remainder smaller than ``min_size`` joins the previous group.
    """
    users = list(users)
    if len(users) < min_size:
        raise TooFewUsersError(f"{len(users)} users cannot form a group of at least {min_size}")
    if not 1 <= min_size <= max_size:
        raise ValueError("need 1 <= min_size <= max_size")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(users))
    groups = []
    start = 0
    while start < len(users):
        size = int(rng.integers(min_size, max_size + 1))
        chunk = order[start : start + size]
        start += size
        if len(chunk) < min_size and groups:
            groups[-1] = np.concatenate([groups[-1], chunk])
        else:
            groups.append(chunk)
    assignments = {}
    for g, chunk in enumerate(groups, start=1):
        for p in chunk:
            assignments[users[p]] = g
    return GroupPartition(assignments, len(groups))


def group_matrices(train: SparseRatings, partition: GroupPartition) -> list:
    """Per-group sub-matrices X^g of ``train`` in group order."""
    index = train.user_index()
    out = []
    for members in partition.groups():
        out.append(train.restrict_users(sorted(index[u] for u in members)))
    return out


def write_snapshot(ratings: SparseRatings, path, header: str | None = None) -> None:
    """Write canonical ``user,item,rating`` rows sorted by external ids."""
    order = np.lexsort((ratings.item_ids[ratings.cols], ratings.user_ids[ratings.rows]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("user,item,rating\n")
        u = ratings.user_ids[ratings.rows[order]]
        i = ratings.item_ids[ratings.cols[order]]
        r = ratings.vals[order]
        fh.writelines(f"{a},{b},{c:g}\n" for a, b, c in zip(u, i, r))


def read_snapshot(path, user_ids=None, item_ids=None) -> SparseRatings:
    users, items, ratings = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#") or line.startswith("user,"):
                continue
            try:
                a, b, c = line.rstrip("\n").split(",")
                users.append(int(a))
                items.append(int(b))
                ratings.append(float(c))
            except ValueError:
                raise ParseError(f"malformed snapshot row {line!r}", lineno) from None
    return SparseRatings.from_triples(users, items, ratings, user_ids, item_ids)


def default_data_dir() -> Path:
    return Path(os.environ.get("FEDSPLIT_DATA_DIR", Path.home() / ".fedsplit" / "data"))

