"""Experiment configuration: a sectioned INI file mapped onto a frozen dataclass.

Every field lives in one section; unknown keys are rejected so typos fail
loudly. The config hash covers every field that can change results (the
output directory and worker count are excluded).
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

from fedsplit.data import FORMATS, default_data_dir
from fedsplit.privacy_audit import DEFAULT_FRACTIONS, MODES


class ConfigError(ValueError):
    pass


def _section(name, **kw):
    return field(metadata={"section": name}, **kw)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = _section("data", default_factory=lambda: str(default_data_dir() / "ml-latest-small" / "ratings.csv"))
    format: str = _section("data", default="auto")
    min_user_ratings: int = _section("data", default=20)
    min_item_ratings: int = _section("data", default=20)
    rounding: str = _section("data", default="ceil")

    test_frac: float = _section("split", default=0.2)
    val_frac: float = _section("split", default=0.2)

    min_group: int = _section("groups", default=3)
    max_group: int = _section("groups", default=30)

    seeds: tuple = _section("run", default=tuple(range(10)))
    nonprivate: bool = _section("run", default=True)
    use_validation: bool = _section("run", default=False)
    patience: int = _section("run", default=10)

    global_trials: int = _section("tuning", default=100)
    group_trials: int = _section("tuning", default=100)
    shared_tuning: bool = _section("tuning", default=False)
    folds: int = _section("tuning", default=5)
    tune_iters: int = _section("tuning", default=100)
    final_iters: int = _section("tuning", default=500)

    server_ranks: tuple = _section("server", default=tuple(range(2, 31, 2)))
    server_folds: int = _section("server", default=5)
    server_val_frac: float = _section("server", default=0.2)
    server_max_iters: int = _section("server", default=1000)
    server_tol: float = _section("server", default=1e-6)
    server_init: str = _section("server", default="nndsvd")
    weighted: bool = _section("server", default=False)
    fixed_rank: int | None = _section("server", default=None)

    audit_modes: tuple = _section("audit", default=MODES)
    audit_fractions: tuple = _section("audit", default=DEFAULT_FRACTIONS)
    audit_iters: int = _section("audit", default=500)
    audit_seeds: tuple = _section("audit", default=(0,))
    audit_biases: bool = _section("audit", default=True)

    out: str = _section("output", default="fedsplit-out")
    jobs: int = _section("output", default=1)

    def __post_init__(self):
        problems = []
        if self.format not in ("auto", *FORMATS):
            problems.append(f"format must be auto or one of {FORMATS}")
        if self.rounding not in ("ceil", "half"):
            problems.append("rounding must be ceil or half")
        if min(self.min_user_ratings, self.min_item_ratings) < 0:
            problems.append("rating thresholds must be >= 0")
        for name in ("test_frac", "val_frac", "server_val_frac"):
            if not 0 < getattr(self, name) < 1:
                problems.append(f"{name} must lie in (0, 1)")
        if not 1 <= self.min_group <= self.max_group:
            problems.append("need 1 <= min_group <= max_group")
        if not self.seeds:
            problems.append("at least one seed is required")
        for name in ("global_trials", "group_trials", "folds", "tune_iters", "server_folds", "server_max_iters", "audit_iters", "jobs", "patience"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.final_iters < 0:
            problems.append("final_iters must be >= 0")
        if not self.server_ranks or min(self.server_ranks) < 1:
            problems.append("server_ranks must be positive")
        if self.fixed_rank is not None and self.fixed_rank < 1:
            problems.append("fixed_rank must be positive")
        if self.server_init not in ("nndsvd", "random"):
            problems.append("server_init must be nndsvd or random")
        if self.server_tol <= 0:
            problems.append("server_tol must be positive")
        if not set(self.audit_modes) <= set(MODES) or not self.audit_modes:
            problems.append(f"audit_modes must be a subset of {MODES}")
        if not self.audit_fractions or any(not 0 < f <= 1 for f in self.audit_fractions):
            problems.append("audit_fractions must lie in (0, 1]")
        if problems:
            raise ConfigError("; ".join(problems))

    # --- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        d.pop("jobs")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for f in fields(self):
            sec = f.metadata["section"]
            if not parser.has_section(sec):
                parser.add_section(sec)
            parser.set(sec, f.name, _dump(getattr(self, f.name)))
        lines = []
        for sec in parser.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in parser.items(sec))
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def _dump(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_dump(x) for x in v)
    return str(v)


def parse_value(f, raw: str):
    default = f.default if f.default is not MISSING else ""
    raw = raw.strip()
    try:
        if f.name == "fixed_rank":
            return int(raw) if raw else None
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if f.name == "audit_modes":
                return tuple(items)
            if f.name == "audit_fractions":
                return tuple(float(x) for x in items)
            return tuple(int(x) for x in items)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from exc


def parse_seeds(text: str) -> tuple:
    """``"0-9"`` or ``"0,2,5"`` or a mix."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
        except ValueError as exc:
            raise ConfigError(f"bad seed list {text!r}") from exc
    if not out:
        raise ConfigError(f"empty seed list {text!r}")
    return tuple(out)


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    by_name = {f.name: f for f in fields(ExperimentConfig)}
    values = {}
    for sec in parser.sections():
        for key, raw in parser.items(sec):
            f = by_name.get(key)
            if f is None or f.metadata["section"] != sec:
                raise ConfigError(f"{path}: unknown key [{sec}] {key}")
            values[key] = parse_value(f, raw)
    return ExperimentConfig(**values)
