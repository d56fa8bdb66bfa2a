"""End-to-end acceptance checks.

The dataset-backed criteria run the CLI pipeline (prepare, run over ten
seeds, audit) once and cache the outputs under a directory keyed by the
package source and the budget, so reruns only re-evaluate.

Environment:
  FEDSPLIT_ML100K            u.data path (default /root/data/ml-100k/u.data)
  FEDSPLIT_ML1M              ratings.dat path for the large-dataset check (optional)
  FEDSPLIT_ACCEPTANCE_DIR    cache root (default ~/.cache/fedsplit-acceptance)
  FEDSPLIT_ACCEPTANCE_BUDGET "reduced" (default) or "full"
"""

from __future__ import annotations

import csv
import hashlib
import os
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import isotonic_regression

import property_checks
from conftest import ACCEPTANCE_LINES
from fedsplit import cli
from fedsplit import evaluation as ev
from fedsplit.federation import CommunicationLedger

pytestmark = pytest.mark.acceptance

ML100K = Path(os.environ.get("FEDSPLIT_ML100K", "/root/data/ml-100k/u.data"))
ML1M = os.environ.get("FEDSPLIT_ML1M", "")
CACHE = Path(os.environ.get("FEDSPLIT_ACCEPTANCE_DIR", Path.home() / ".cache" / "fedsplit-acceptance"))
BUDGET = os.environ.get("FEDSPLIT_ACCEPTANCE_BUDGET", "reduced")

SEEDS = "0-9"
AUDIT_SEEDS = "0-2"
# The full budget is 100 tuning trials per group and for the pooled model.
# One seed takes about 6 minutes on one core at the reduced budget
# and close to 10 at the full one.
BUDGETS = {
    "reduced": ["group_trials=20", "global_trials=10"],
    "full": [],
}


def report(number: int, ok: bool | None, detail: str) -> None:
    status = "NOT RUN" if ok is None else ("PASS" if ok else "FAIL")
    line = f"criterion {number}: {status}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted((Path(cli.__file__).parent).glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def _cli(command: str, dataset: Path, out: Path, seeds: str, extra=()) -> int:
    args = [command, "--dataset", str(dataset), "--out", str(out), "--seeds", seeds]
    for item in [*BUDGETS[BUDGET], *extra]:
        args += ["--set", item]
    return cli.main(args)


@pytest.fixture(scope="session")
def ml100k_run():
    if not ML100K.is_file():
        return None
    out = CACHE / f"ml100k-{BUDGET}-{_source_digest()}"
    done = out / "run" / "summary.csv"
    if not done.exists():
        assert _cli("prepare", ML100K, out, SEEDS) == 0
        assert _cli("run", ML100K, out, SEEDS) == 0
    if not (out / "audit" / "curves.csv").exists():
        code = _cli("audit", ML100K, out, AUDIT_SEEDS)
        assert code in (0, 4)  # 4 flags failed attack cells, which criterion 7 reports
    return out


def _need(run):
    if run is None:
        return f"ML-100K not found at {ML100K}"
    return None


def _summary(run):
    reports = []
    nonprivate = []
    for seed in range(10):
        d = run / "run" / f"seed_{seed}"
        reports += ev.read_reports(d / "group_reports.csv")
        nonprivate += [float(r["rmse"]) for r in ev.read_csv(d / "nonprivate.csv")[1]]
    return ev.summarize(reports), ev.mean_ci(nonprivate)


def test_criterion_1_nonprivate_rmse(ml100k_run):
    if (why := _need(ml100k_run)):
        report(1, None, why)
        pytest.skip(why)
    _, nonprivate = _summary(ml100k_run)
    ok = abs(nonprivate.mean - 0.71) <= 0.04
    report(1, ok, f"non-private RMSE {nonprivate.mean:.4f} (+/- {nonprivate.ci:.4f}) over 10 seeds; target 0.71 +/- 0.04")
    assert ok


def test_criterion_2_local_rmse(ml100k_run):
    if (why := _need(ml100k_run)):
        report(2, None, why)
        pytest.skip(why)
    s, _ = _summary(ml100k_run)
    ok = abs(s.local.mean - 1.00) <= 0.06
    report(2, ok, f"local CNMF group RMSE {s.local.mean:.4f} (+/- {s.local.ci:.4f}); target 1.00 +/- 0.06")
    assert ok


def test_criterion_3_fedsplit_rmse_and_improvement(ml100k_run):
    if (why := _need(ml100k_run)):
        report(3, None, why)
        pytest.skip(why)
    s, _ = _summary(ml100k_run)
    rmse_ok = abs(s.fed.mean - 0.78) <= 0.06
    share_ok = s.improved_share >= 0.90
    gain = -s.delta.mean
    gain_ok = 0.12 <= gain <= 0.32
    ok = rmse_ok and share_ok and gain_ok
    report(
        3,
        ok,
        f"FedSPLIT RMSE {s.fed.mean:.4f} (target 0.78 +/- 0.06: {'ok' if rmse_ok else 'miss'}); "
        f"improved {s.improved}/{s.total} = {s.improved_share:.1%} (>= 90%: {'ok' if share_ok else 'miss'}); "
        f"mean improvement {gain:.4f} (in [0.12, 0.32]: {'ok' if gain_ok else 'miss'})",
    )
    assert ok


def test_criterion_4_correlation_signs(ml100k_run):
    if (why := _need(ml100k_run)):
        report(4, None, why)
        pytest.skip(why)
    s, _ = _summary(ml100k_run)
    ok = (
        s.r_members_defined
        and s.r_ratings_defined
        and -0.3 < s.r_members < 0
        and -0.3 < s.r_ratings < 0
    )
    report(4, ok, f"r(members, delta) {s.r_members:+.3f}, r(ratings, delta) {s.r_ratings:+.3f}; need both in (-0.3, 0)")
    assert ok


def test_criterion_5_one_shot_ledger(ml100k_run):
    if (why := _need(ml100k_run)):
        report(5, None, why)
        pytest.skip(why)
    bad = []
    for seed in range(10):
        groups = {int(r["group"]) for r in ev.read_csv(ml100k_run / "prepared" / f"seed_{seed}" / "groups.csv")[1]}
        ledger = CommunicationLedger()
        for r in ev.read_csv(ml100k_run / "run" / f"seed_{seed}" / "ledger.csv")[1]:
            ledger.record(r["direction"], int(r["group_id"]), r["kind"], int(r["payload_floats"]))
        logged = {g for _, g, _, _ in ledger.entries}
        if logged != groups or not ledger.one_shot(sorted(groups)):
            bad.append(seed)
    ok = not bad
    report(5, ok, "every client sent 2 and received 2 messages in all 10 runs" if ok else f"ledger violations in seeds {bad}")
    assert ok


def test_criterion_6_property_suite():
    checks = [
        ("non-negativity and monotone objective", property_checks.nmf_monotone_nonnegative),
        ("masked updates skip missing entries", property_checks.masked_updates_ignore_missing),
        ("slice round trip", property_checks.slicing_roundtrip),
        ("distillation vs loop product", property_checks.distillation_matches_loops),
        ("bias-only fit vs ridge", property_checks.bias_only_matches_ridge),
    ]
    results = [(name, *check()) for name, check in checks]
    ok = all(r[1] for r in results)
    report(6, ok, "; ".join(f"{name}: {'ok' if passed else 'FAILED'} ({detail})" for name, passed, detail in results))
    assert ok


def _curves(run):
    _, rows = ev.read_csv(run / "audit" / "curves.csv")
    out = {}
    for r in rows:
        out.setdefault(r["mode"], []).append((float(r["fraction"]), float(r["mean_relative_error"]), float(r["ci_half_width"]), int(r["n_failed"])))
    return {m: sorted(v) for m, v in out.items()}


def test_criterion_7_attack_curves(ml100k_run):
    if (why := _need(ml100k_run)):
        report(7, None, why)
        pytest.skip(why)
    curves = _curves(ml100k_run)
    notes, ok = [], True
    for mode, pts in curves.items():
        y = np.array([p[1] for p in pts])
        ci = np.array([p[2] for p in pts])
        fit = isotonic_regression(y, increasing=False).x
        worst = float(np.max(np.abs(y - fit) - ci))
        mono = worst <= 0
        ok &= mono
        notes.append(f"{mode} non-increasing within CI: {'ok' if mono else f'miss by {worst:.4f}'}")
    gap = max(abs(a[1] - b[1]) for a, b in zip(curves["movie"], curves["ratings"]))
    ok &= gap < 0.1
    notes.append(f"max |movie - ratings| {gap:.4f} (< 0.1)")
    with open(ml100k_run / "audit" / "cells.csv", newline="") as fh:
        next(fh)
        full = [float(r["relative_error"]) for r in csv.DictReader(fh) if float(r["fraction"]) == 1.0 and r["failed"] == "false"]
    positive = bool(full) and min(full) > 0
    ok &= positive
    notes.append(f"full-knowledge error min {min(full):.2e} over {len(full)} attacks (> 0)")
    failed = sum(p[3] for pts in curves.values() for p in pts)
    notes.append(f"{failed} failed attack cells")
    report(7, ok, "; ".join(notes))
    assert ok


def test_criterion_8_large_dataset(tmp_path):
    path = Path(ML1M) if ML1M else None
    if path is None or not path.is_file():
        why = "ML-1M ratings file not available (set FEDSPLIT_ML1M)"
        report(8, None, why)
        pytest.skip(why)
    out = CACHE / f"ml1m-{_source_digest()}"
    extra = ["group_trials=10", "global_trials=10", "nonprivate=false"]
    if not (out / "run" / "summary.csv").exists():
        assert _cli("prepare", path, out, "0", extra) == 0
        assert _cli("run", path, out, "0", extra) == 0
    s = ev.summarize(ev.read_reports(out / "run" / "seed_0" / "group_reports.csv"))
    ok = s.fed.mean < s.local.mean
    report(8, ok, f"single seed, 10 trials: FedSPLIT {s.fed.mean:.4f} vs local {s.local.mean:.4f}")
    assert ok
