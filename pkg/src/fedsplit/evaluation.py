"""Per-group RMSE reports, aggregate summaries with normal-approximation
confidence intervals, and the CSV / plot-data writers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from fedsplit.cnmf import RATING_MAX, RATING_MIN
from fedsplit.data import SparseRatings
from fedsplit.errors import UndefinedMetricError

Z_95 = 1.96


@dataclass(frozen=True)
class GroupReport:
    group_id: int
    n_members: int
    n_ratings: int
    rmse_local: float
    rmse_fed: float
    seed: int = 0
    delta: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "delta", self.rmse_fed - self.rmse_local)


def evaluate_group(predict_fn, test: SparseRatings) -> float:
    """Held-out RMSE of ``predict_fn(rows, cols)`` after clamping to the rating scale."""
    if test.nnz == 0:
        raise UndefinedMetricError("group has no test ratings")
    pred = np.clip(np.asarray(predict_fn(test.rows, test.cols), dtype=float), RATING_MIN, RATING_MAX)
    err = pred - test.vals
    return float(np.sqrt(np.mean(err * err)))


@dataclass(frozen=True)
class Estimate:
    mean: float
    ci: float  # half-width
    n: int
    defined: bool = True


def mean_ci(values) -> Estimate:
    """Mean and 1.96 * sample-sd / sqrt(n). A single value gets ci=0 and
    ``defined=False``. ``fsum`` keeps the result independent of order."""
    v = [float(x) for x in values]
    if not v:
        raise UndefinedMetricError("no values")
    n = len(v)
    mean = math.fsum(v) / n
    if n == 1:
        return Estimate(mean, 0.0, 1, False)
    var = math.fsum((x - mean) ** 2 for x in v) / (n - 1)
    return Estimate(mean, Z_95 * math.sqrt(var) / math.sqrt(n), n)


def pearson(x, y) -> tuple[float, bool]:
    """Pearson r and a definedness flag (False for zero variance or n < 2)."""
    x = [float(a) for a in x]
    y = [float(b) for b in y]
    if len(x) != len(y):
        raise ValueError("length mismatch")
    n = len(x)
    if n < 2:
        return float("nan"), False
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        return float("nan"), False
    r = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r)), True


@dataclass(frozen=True)
class ExperimentSummary:
    reports: tuple
    local: Estimate
    fed: Estimate
    delta: Estimate
    improved: int
    worsened: int
    unchanged: int
    mean_gain_improved: float  # mean delta over improved groups (negative)
    mean_loss_worsened: float  # mean delta over worsened groups (positive)
    r_members: float
    r_members_defined: bool
    r_ratings: float
    r_ratings_defined: bool
    seeds: tuple

    @property
    def total(self) -> int:
        return len(self.reports)

    @property
    def improved_share(self) -> float:
        return self.improved / self.total

    def seed_means(self, attr: str) -> dict:
        out = {}
        for s in self.seeds:
            out[s] = mean_ci(getattr(r, attr) for r in self.reports if r.seed == s).mean
        return out


def _sort_key(r: GroupReport):
    return (r.seed, r.group_id)


def summarize(reports) -> ExperimentSummary:
    reports = tuple(sorted(reports, key=_sort_key))
    if not reports:
        raise UndefinedMetricError("no group reports")
    deltas = [r.delta for r in reports]
    improved = [d for d in deltas if d < 0]
    worsened = [d for d in deltas if d > 0]
    r_m, ok_m = pearson([r.n_members for r in reports], deltas)
    r_r, ok_r = pearson([r.n_ratings for r in reports], deltas)
    return ExperimentSummary(
        reports,
        mean_ci(r.rmse_local for r in reports),
        mean_ci(r.rmse_fed for r in reports),
        mean_ci(deltas),
        len(improved),
        len(worsened),
        len(deltas) - len(improved) - len(worsened),
        math.fsum(improved) / len(improved) if improved else float("nan"),
        math.fsum(worsened) / len(worsened) if worsened else float("nan"),
        r_m,
        ok_m,
        r_r,
        ok_r,
        tuple(sorted({r.seed for r in reports})),
    )


# --- writers --------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path, header, rows, config_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> tuple[str, list]:
    """Returns (config_hash, rows as dicts)."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        digest = first.split("=", 1)[1] if first.startswith("# config_hash=") else ""
        return digest, list(csv.DictReader(fh))


REPORT_FIELDS = ["seed", "group_id", "n_members", "n_ratings", "rmse_local", "rmse_fed", "delta"]


def write_reports(reports, path, config_hash: str) -> None:
    rows = [[getattr(r, f) for f in REPORT_FIELDS] for r in sorted(reports, key=_sort_key)]
    write_csv(path, REPORT_FIELDS, rows, config_hash)


def read_reports(path) -> list:
    _, rows = read_csv(path)
    return [
        GroupReport(int(r["group_id"]), int(r["n_members"]), int(r["n_ratings"]), float(r["rmse_local"]), float(r["rmse_fed"]), int(r["seed"]))
        for r in rows
    ]


def summary_rows(summary: ExperimentSummary, nonprivate=None) -> list:
    rows = [
        ("groups", summary.total, ""),
        ("rmse_local_mean", summary.local.mean, summary.local.ci),
        ("rmse_fed_mean", summary.fed.mean, summary.fed.ci),
        ("delta_mean", summary.delta.mean, summary.delta.ci),
        ("improved", summary.improved, ""),
        ("worsened", summary.worsened, ""),
        ("unchanged", summary.unchanged, ""),
        ("mean_gain_improved", summary.mean_gain_improved, ""),
        ("mean_loss_worsened", summary.mean_loss_worsened, ""),
        ("pearson_members_delta", summary.r_members, "" if summary.r_members_defined else "undefined"),
        ("pearson_ratings_delta", summary.r_ratings, "" if summary.r_ratings_defined else "undefined"),
    ]
    if nonprivate is not None:
        rows.append(("rmse_nonprivate_mean", nonprivate.mean, nonprivate.ci))
    return rows


def write_summary(summary: ExperimentSummary, path, config_hash: str, nonprivate: Estimate | None = None) -> None:
    write_csv(path, ["metric", "value", "ci_or_note"], summary_rows(summary, nonprivate), config_hash)


def write_plot_data(reports, path, config_hash: str) -> None:
    """One row per group, ordered by delta: the x position and the four
    series (RMSE before/after, members, ratings, delta)."""
    ordered = sorted(reports, key=lambda r: (r.delta, r.seed, r.group_id))
    rows = [[x, r.seed, r.group_id, r.rmse_local, r.rmse_fed, r.n_members, r.n_ratings, r.delta] for x, r in enumerate(ordered)]
    write_csv(path, ["x", "seed", "group_id", "rmse_local", "rmse_fed", "members", "ratings", "delta"], rows, config_hash)
