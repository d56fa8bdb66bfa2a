"""``fedsplit`` command line: prepare, run, audit, report.

Exit codes: 0 success, 2 input error, 3 missing upstream artifact,
4 numeric failure (including partially failed multi-seed runs).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from fedsplit import container
from fedsplit import evaluation as ev
from fedsplit import privacy_audit as pa
from fedsplit.config import ConfigError, ExperimentConfig, load_config, parse_seeds, parse_value
from fedsplit.data import SparseRatings, load_movielens, partition_groups, preprocess, read_snapshot, split, write_snapshot
from fedsplit.errors import DivergenceError, FedSplitError, ParseError, PhaseError
from fedsplit.experiment import run_seed

log = logging.getLogger("fedsplit")

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# --- layout ---------------------------------------------------------------


def prepared_dir(cfg) -> Path:
    return Path(cfg.out) / "prepared"


def run_dir(cfg, seed=None) -> Path:
    base = Path(cfg.out) / "run"
    return base if seed is None else base / f"seed_{seed}"


def audit_dir(cfg) -> Path:
    return Path(cfg.out) / "audit"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {what}: {path} (run the upstream command first)", EXIT_MISSING)
    return path


def _write_config(cfg, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.ini").write_text(f"# config_hash={cfg.hash()}\n" + cfg.to_ini())


# --- commands -------------------------------------------------------------


def load_dataset(cfg) -> SparseRatings:
    path = Path(cfg.dataset)
    if not path.is_file():
        raise CliError(f"dataset not found: {path}", EXIT_INPUT)
    return load_movielens(path, cfg.format)


def cmd_prepare(cfg) -> int:
    raw = load_dataset(cfg)
    ratings = preprocess(raw, cfg.min_user_ratings, cfg.min_item_ratings, cfg.rounding)
    out = prepared_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    header = f"config_hash={cfg.hash()}"
    write_snapshot(raw, out / "raw.csv", header)
    write_snapshot(ratings, out / "ratings.csv", header)
    for seed in cfg.seeds:
        d = out / f"seed_{seed}"
        d.mkdir(exist_ok=True)
        s = split(ratings, cfg.test_frac, cfg.val_frac, seed)
        for name, part in (("train", s.train), ("validation", s.validation), ("test", s.test)):
            write_snapshot(part, d / f"{name}.csv", header)
        partition = partition_groups(s.train.user_ids.tolist(), cfg.min_group, cfg.max_group, seed)
        rows = sorted(partition.assignments.items())
        ev.write_csv(d / "groups.csv", ["user", "group"], rows, cfg.hash())
    _write_config(cfg, out)
    print(f"prepared {raw.nnz} raw / {ratings.nnz} filtered ratings ({ratings.n_users} users, {ratings.n_items} items) in {out}")
    return EXIT_OK


def _save_models(result, directory: Path, config_hash: str) -> None:
    """Models go into binary containers; the group rating matrices the audit
    scores against go into ``group_data.npz``."""
    directory.mkdir(parents=True, exist_ok=True)
    extra = {"config_hash": config_hash, "seed": result.seed}
    for c in result.run.clients:
        container.save(c.state.model, directory / f"local_g{c.group_id}.fspm", extra)
    for f in result.run.federated:
        container.save(f, directory / f"federated_g{f.group_id}.fspm", extra)
    container.save(result.run.global_model, directory / "global.fspm", extra)
    arrays = {"config_hash": np.array(config_hash), "group_ids": np.array([c.group_id for c in result.run.clients])}
    for c in result.run.clients:
        X = c.state.X
        for name in ("rows", "cols", "vals", "user_ids", "item_ids"):
            arrays[f"g{c.group_id}_{name}"] = getattr(X, name)
    np.savez_compressed(directory / "group_data.npz", **arrays)


def load_targets(directory: Path, seed: int) -> list:
    """Attack targets: true group ratings plus the item side each group published."""
    _require(directory / "global.fspm", f"models for seed {seed}")
    mu = container.load(directory / "global.fspm").mu_global
    targets = []
    with np.load(_require(directory / "group_data.npz", f"group data for seed {seed}")) as z:
        for g in z["group_ids"].tolist():
            X = SparseRatings(*(z[f"g{g}_{name}"] for name in ("rows", "cols", "vals", "user_ids", "item_ids")))
            model = container.load(_require(directory / f"local_g{g}.fspm", f"local model {g} for seed {seed}"))
            targets.append(pa.AttackTarget(g, X, model.H, model.b_H, mu, model.hyperparams, seed))
    return targets


def _write_seed(result, cfg) -> None:
    h = cfg.hash()
    d = run_dir(cfg, result.seed)
    d.mkdir(parents=True, exist_ok=True)
    ev.write_reports(result.reports, d / "group_reports.csv", h)
    ledger = [[r["direction"], r["group_id"], r["kind"], r["payload_floats"]] for r in result.run.ledger.as_rows()]
    ev.write_csv(d / "ledger.csv", ["direction", "group_id", "kind", "payload_floats"], ledger, h)
    if result.nonprivate_rmse is not None:
        ev.write_csv(d / "nonprivate.csv", ["seed", "rmse"], [[result.seed, result.nonprivate_rmse]], h)
    manifest = {"config_hash": h, **result.manifest()}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float))
    _save_models(result, d / "models", h)


def _summaries(cfg) -> tuple:
    reports, nonprivate = [], []
    for seed in cfg.seeds:
        d = run_dir(cfg, seed)
        reports.extend(ev.read_reports(_require(d / "group_reports.csv", f"run artifacts for seed {seed}")))
        if (d / "nonprivate.csv").exists():
            nonprivate.extend(float(r["rmse"]) for r in ev.read_csv(d / "nonprivate.csv")[1])
    summary = ev.summarize(reports)
    return summary, (ev.mean_ci(nonprivate) if nonprivate else None)


def _write_run_outputs(cfg, summary, nonprivate) -> None:
    h = cfg.hash()
    d = run_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    ev.write_reports(summary.reports, d / "group_reports.csv", h)
    ev.write_summary(summary, d / "summary.csv", h, nonprivate)
    ev.write_plot_data(summary.reports, d / "plot_data.csv", h)
    rows = []
    if nonprivate is not None:
        rows.append(["non_private_cf", nonprivate.mean, nonprivate.ci])
    rows.append(["local_cf", summary.local.mean, summary.local.ci])
    rows.append(["fedsplit", summary.fed.mean, summary.fed.ci])
    ev.write_csv(d / "table.csv", ["method", "rmse_mean", "ci_half_width"], rows, h)


def _print_table(summary, nonprivate) -> None:
    if nonprivate is not None:
        print(f"non-private CF  {nonprivate.mean:.4f} (+/- {nonprivate.ci:.4f})")
    print(f"local CF        {summary.local.mean:.4f} (+/- {summary.local.ci:.4f})")
    print(f"FedSPLIT        {summary.fed.mean:.4f} (+/- {summary.fed.ci:.4f})")
    print(
        f"groups {summary.total}: improved {summary.improved}, worsened {summary.worsened}, "
        f"mean delta {summary.delta.mean:+.4f}, r(members) {summary.r_members:+.3f}, r(ratings) {summary.r_ratings:+.3f}"
    )


def cmd_run(cfg) -> int:
    path = _require(prepared_dir(cfg) / "ratings.csv", "prepared dataset")
    ratings = read_snapshot(path)
    _write_config(cfg, run_dir(cfg))
    failed = []
    for seed in cfg.seeds:
        try:
            result = run_seed(ratings, cfg, seed, jobs=cfg.jobs)
        except FedSplitError as exc:
            log.error("seed %d failed: %s", seed, exc)
            failed.append(seed)
            continue
        _write_seed(result, cfg)
        log.info("seed %d done: K=%d, one-shot=%s", seed, result.run.global_model.K, result.one_shot)
    ok = [s for s in cfg.seeds if s not in failed]
    if ok:
        summary, nonprivate = _summaries(cfg.with_overrides(seeds=tuple(ok)))
        _write_run_outputs(cfg, summary, nonprivate)
        _print_table(summary, nonprivate)
    if failed:
        print(f"failed seeds: {failed}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_audit(cfg) -> int:
    targets = []
    for seed in cfg.seeds:
        targets.extend(load_targets(run_dir(cfg, seed) / "models", seed))
    cells = pa.attack_cells(targets, cfg.audit_modes, cfg.audit_fractions, cfg.audit_seeds, cfg.audit_iters, cfg.audit_biases)
    table = pa.curve_table(cells, cfg.audit_modes, cfg.audit_fractions)
    h = cfg.hash()
    d = audit_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    ev.write_csv(d / "curves.csv", pa.CURVE_FIELDS, pa.curve_rows(table), h)
    cell_rows = [[s, g, m, f, a, r.relative_error, r.failed] for s, g, m, f, a, r in cells]
    ev.write_csv(d / "cells.csv", ["seed", "group_id", "mode", "fraction", "attack_seed", "relative_error", "failed"], cell_rows, h)
    wide = []
    for frac in cfg.audit_fractions:
        row = [float(frac)]
        for mode in cfg.audit_modes:
            p = next(p for p in table if p.mode == mode and p.fraction == float(frac))
            row += [p.mean, p.ci]
        wide.append(row)
    header = ["fraction"] + [f"{m}_{k}" for m in cfg.audit_modes for k in ("mean", "ci")]
    ev.write_csv(d / "plot_data.csv", header, wide, h)
    _write_config(cfg, d)
    for p in table:
        print(f"{p.mode:8s} {p.fraction:.2f}  {p.mean:.5f} (+/- {p.ci:.5f})  n={p.n_cells} failed={p.n_failed}")
    return EXIT_NUMERIC if any(p.n_failed for p in table) else EXIT_OK


def cmd_report(cfg) -> int:
    summary, nonprivate = _summaries(cfg)
    _write_run_outputs(cfg, summary, nonprivate)
    _print_table(summary, nonprivate)
    curves = audit_dir(cfg) / "curves.csv"
    if curves.exists():
        print(f"attack curves: {curves}")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "run": cmd_run, "audit": cmd_audit, "report": cmd_report}


# --- argument handling ----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsplit", description="One-shot federated collaborative filtering experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--seeds", help="seed list, e.g. 0-9 or 0,3,7")
    p.add_argument("--dataset", help="ratings file (overrides [data] dataset)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="worker processes for local training")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    by_name = {f.name: f for f in fields(ExperimentConfig)}
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in by_name:
            raise ConfigError(f"bad --set {item!r}")
        overrides[key] = parse_value(by_name[key], value)
    if args.seeds is not None:
        overrides["seeds"] = parse_seeds(args.seeds)
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    overrides.update(dataset=args.dataset, out=args.out, jobs=args.jobs)
    return cfg.with_overrides(**overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.dry_run:
            print(f"# config_hash={cfg.hash()}")
            print(cfg.to_ini())
            return EXIT_OK
        return COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DivergenceError, PhaseError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, FedSplitError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
