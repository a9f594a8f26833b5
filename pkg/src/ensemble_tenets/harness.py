"""Configuration, runs, sweeps and reports.

A config file is JSON::

    {
      "schema_version": 1,
      "scenario": "bell",
      "seed": 0,
      "out_dir": "runs/bell",
      "grid": {"n": 256},
      "params": {"checks": ["chsh"]}
    }

Only ``schema_version`` and ``scenario`` are required.  ``grid`` and
``params`` override the scenario defaults key by key.  Unknown keys are
errors, and so are values whose type differs from the default.

A run writes ``report.json`` and ``checks.csv``, one CSV per table, and field
bundles.  All of them are byte-identical for the same config and seed.
Wall-clock timings and runtime checks go to ``timing.json``, which is not.
"""
from __future__ import annotations

import copy
import difflib
import hashlib
import json
import logging
import math
import re
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .bundles import canonical_json, sha256_file, write_bundle, write_csv, write_text
from .scenarios import SCENARIOS, Check, ScenarioResult

SCHEMA_VERSION = 1
TOP_KEYS = ("schema_version", "scenario", "seed", "out_dir", "grid", "params", "description")
log = logging.getLogger("ensemble_tenets")


class ConfigError(ValueError):
    """Config file that cannot be parsed or does not match the schema."""


# ------------------------------------------------------------------ config
@dataclass
class ScenarioConfig:
    scenario: str
    grid: dict
    params: dict
    seed: int = 0
    out_dir: str | None = None
    description: str = ""

    def normalized(self) -> dict:
        """Everything that determines the results; the hash is taken over this."""
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario,
            "seed": self.seed,
            "grid": self.grid,
            "params": self.params,
        }

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.normalized()).encode()).hexdigest()


def _line_of(text: str | None, key: str) -> str:
    if not text:
        return ""
    for i, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return f"line {i}: "
    return ""


def _unknown(key: str, allowed: Sequence[str], where: str, text: str | None) -> ConfigError:
    near = difflib.get_close_matches(key, list(allowed), n=1)
    hint = f" (did you mean {near[0]!r}?)" if near else ""
    return ConfigError(f"{_line_of(text, key)}unknown key {key!r} in {where}{hint}; allowed: {', '.join(sorted(allowed))}")


def _same_kind(default: Any, value: Any) -> bool:
    if isinstance(default, bool) or isinstance(value, bool):
        return isinstance(default, bool) and isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float))
    if isinstance(default, int):
        return isinstance(value, int)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def _merge(block: str, defaults: dict, given: Any, text: str | None) -> dict:
    if given is None:
        return copy.deepcopy(defaults)
    if not isinstance(given, dict):
        raise ConfigError(f"{_line_of(text, block)}{block!r} must be an object")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if k not in defaults:
            raise _unknown(k, defaults, f"'{block}'", text)
        if not _same_kind(defaults[k], v):
            raise ConfigError(f"{_line_of(text, k)}{block}.{k} must be {type(defaults[k]).__name__}, "
                              f"got {type(v).__name__} {v!r}")
        out[k] = float(v) if isinstance(defaults[k], float) else v
    return out


def config_from_dict(raw: Any, text: str | None = None) -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for k in raw:
        if k not in TOP_KEYS:
            raise _unknown(k, TOP_KEYS, "the top level", text)
    for k in ("schema_version", "scenario"):
        if k not in raw:
            raise ConfigError(f"missing required key {k!r}")
    if raw["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"{_line_of(text, 'schema_version')}unsupported schema_version {raw['schema_version']!r}; "
                          f"this tool reads version {SCHEMA_VERSION}")
    key = raw["scenario"]
    if key not in SCENARIOS:
        raise ConfigError(f"{_line_of(text, 'scenario')}unknown scenario {key!r}; choose one of {', '.join(SCENARIOS)}")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"{_line_of(text, 'seed')}seed must be a non-negative integer, got {seed!r}")
    scn = SCENARIOS[key]
    d = scn.defaults()
    grid = _merge("grid", d["grid"], raw.get("grid"), text)
    params = _merge("params", d["params"], raw.get("params"), text)
    bad = [c for c in params["checks"] if c not in scn.groups]
    if bad or not params["checks"]:
        raise ConfigError(f"{_line_of(text, 'checks')}params.checks must name groups of {key!r} "
                          f"({', '.join(scn.groups)}); got {params['checks']!r}")
    out_dir = raw.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("out_dir must be a string")
    return ScenarioConfig(key, grid, params, seed, out_dir, str(raw.get("description", "")))


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return config_from_dict(raw, text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def default_config(scenario: str) -> dict:
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}")
    return {"schema_version": SCHEMA_VERSION, "scenario": scenario, "seed": 0, **SCENARIOS[scenario].defaults()}


def set_path(cfg: ScenarioConfig, path: str, value: Any) -> ScenarioConfig:
    """Copy of ``cfg`` with ``grid.<k>``, ``params.<k>`` or ``seed`` replaced (and re-validated)."""
    raw = {"schema_version": SCHEMA_VERSION, **copy.deepcopy(cfg.normalized())}
    parts = path.split(".")
    if parts == ["seed"]:
        raw["seed"] = value
    elif len(parts) == 2 and parts[0] in ("grid", "params"):
        if parts[1] not in raw[parts[0]]:
            raise _unknown(parts[1], raw[parts[0]], f"'{parts[0]}'", None)
        raw[parts[0]][parts[1]] = value
    else:
        raise ConfigError(f"sweep path must be 'seed', 'grid.<key>' or 'params.<key>', got {path!r}")
    new = config_from_dict(raw)
    new.out_dir = cfg.out_dir
    return new


# ------------------------------------------------------------------ runs
@dataclass
class RunReport:
    config: ScenarioConfig
    threads: int
    result: ScenarioResult
    artifacts: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.result.passed

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.config.config_hash, "tool_version": __version__,
                "scenario": self.config.scenario, "seed": str(self.config.seed)}

    def to_dict(self) -> dict:
        return {
            "tool": "ensemble-tenets",
            "tool_version": __version__,
            "config_hash": self.config.config_hash,
            "config": self.config.normalized(),
            "seed": self.config.seed,
            "threads": self.threads,
            "passed": all(c.passed for c in self.result.checks),
            "checks": [c.to_dict() for c in self.result.checks],
            "metrics": self.result.metrics,
            "artifacts": self.artifacts,
        }

    def timing_dict(self) -> dict:
        return {
            "tool_version": __version__,
            "config_hash": self.config.config_hash,
            "wall_seconds": self.result.timings,
            "checks": [c.to_dict() for c in self.result.timing_checks],
            "passed": all(c.passed for c in self.result.timing_checks),
        }


def execute(cfg: ScenarioConfig, threads: int = 1) -> RunReport:
    """Run the configured groups; a group that raises becomes a failed check."""
    scn = SCENARIOS[cfg.scenario]
    res = ScenarioResult()
    for name in cfg.params["checks"]:
        part = ScenarioResult()
        # shared so a group can bound the time of work done by earlier groups
        part.timings = res.timings
        try:
            t0 = time.perf_counter()
            scn.groups[name](cfg.grid, cfg.params, cfg.seed, part)
            part.timings[name] = time.perf_counter() - t0
        except Exception as exc:  # noqa: BLE001 - recorded in the report, the run continues
            log.error("group %s failed: %s", name, exc)
            res.checks.append(Check(None, f"{name}:error", False, math.nan, 0.0, "==",
                                    {"error": f"{type(exc).__name__}: {exc}",
                                     "traceback": traceback.format_exc().splitlines()[-3:]}))
            continue
        res.checks += part.checks
        res.timing_checks += part.timing_checks
        res.metrics.update(part.metrics)
        res.bundles.update(part.bundles)
        for k, t in part.tables.items():
            if k in res.tables:
                res.tables[k].rows += t.rows
            else:
                res.tables[k] = t
    if scn.runtime is not None:
        crit, label = scn.runtime
        total = sum(res.timings.get(n, 0.0) for n in cfg.params["checks"])
        limit = cfg.params["runtime_limit"]
        res.timing_checks.append(Check(crit, label, total < limit, total, limit, "<"))
    return RunReport(cfg, threads, res)


def write_outputs(report: RunReport, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = report.provenance
    files: list[Path] = []
    rows = [[c.criterion if c.criterion is not None else "", c.name, c.passed, c.value, c.tolerance, c.relation]
            for c in report.result.checks]
    write_csv(out / "checks.csv", ["criterion", "name", "passed", "value", "tolerance", "relation"], rows, prov)
    files.append(out / "checks.csv")
    for name in sorted(report.result.tables):
        t = report.result.tables[name]
        write_csv(out / f"{name}.csv", t.columns, t.rows, prov)
        files.append(out / f"{name}.csv")
    for name in sorted(report.result.bundles):
        b = report.result.bundles[name]
        files += write_bundle(out, name, b.components, b.axes, b.grid, prov)
    report.artifacts = [{"file": p.name, "sha256": sha256_file(p)} for p in files]
    write_text(out / "report.json", canonical_json(report.to_dict()))
    write_text(out / "timing.json", canonical_json(report.timing_dict()))
    return out


def default_out_dir(cfg: ScenarioConfig) -> Path:
    return Path(cfg.out_dir) if cfg.out_dir else Path("runs") / f"{cfg.scenario}-{cfg.config_hash[:12]}"


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path | None = None, threads: int = 1) -> RunReport:
    report = execute(cfg, threads)
    write_outputs(report, out_dir if out_dir is not None else default_out_dir(cfg))
    return report


# ------------------------------------------------------------------ sweeps
_SPACES = re.compile(r"^(linspace|geomspace)\(\s*([^,]+),\s*([^,]+),\s*(\d+)\s*\)$")


def parse_values(text: str) -> list:
    """``[1, 2]`` (JSON), ``a,b,c`` or ``linspace(a, b, n)`` / ``geomspace(a, b, n)``."""
    import numpy as np

    text = text.strip()
    m = _SPACES.match(text)
    if m:
        fn = getattr(np, m.group(1))
        return [float(v) for v in fn(float(m.group(2)), float(m.group(3)), int(m.group(4)))]
    if text.startswith("["):
        vals = json.loads(text)
        if not isinstance(vals, list):
            raise ConfigError("--values must be a JSON list")
        return vals
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        try:
            out.append(json.loads(tok))
        except json.JSONDecodeError:
            out.append(tok)
    return out


@dataclass
class SweepResult:
    path: str
    values: list
    reports: list[RunReport | None]
    errors: list[str]

    @property
    def passed(self) -> bool:
        return all(r is not None and r.passed for r in self.reports)


def sweep(cfg: ScenarioConfig, path: str, values: Sequence[Any], out_dir: str | Path | None = None,
          threads: int = 1) -> SweepResult:
    """One run per value under ``out_dir/run_<i>``, then ``sweep.csv`` and ``sweep.json``."""
    root = Path(out_dir) if out_dir is not None else default_out_dir(cfg).with_name(default_out_dir(cfg).name + "-sweep")
    root.mkdir(parents=True, exist_ok=True)
    reports: list[RunReport | None] = []
    errors: list[str] = []
    for i, v in enumerate(values):
        try:
            c = set_path(cfg, path, v)
            reports.append(run_scenario(c, root / f"run_{i:03d}", threads))
            errors.append("")
        except Exception as exc:  # noqa: BLE001 - a failing run is recorded and the sweep goes on
            log.error("sweep value %r failed: %s", v, exc)
            reports.append(None)
            errors.append(f"{type(exc).__name__}: {exc}")
    metric_keys = sorted({k for r in reports if r is not None for k in r.result.metrics})
    ratio_keys = [k for k in metric_keys if k.endswith(("residual", "deviation"))]
    cols = ["index", path, "passed", "failed_checks", "config_hash", *metric_keys, *[f"{k}_ratio" for k in ratio_keys], "error"]
    rows, prev = [], {}
    for i, (v, r, err) in enumerate(zip(values, reports, errors)):
        m = r.result.metrics if r is not None else {}
        ratios = []
        for k in ratio_keys:
            ratios.append(prev[k] / m[k] if k in prev and m.get(k) else "")
        prev = {k: m[k] for k in ratio_keys if k in m}
        rows.append([i, json.dumps(v), r is not None and r.passed,
                     sum(not c.passed for c in r.result.checks) if r is not None else "",
                     r.config.config_hash if r is not None else "",
                     *[m.get(k, "") for k in metric_keys], *ratios, err])
    prov = {"config_hash": cfg.config_hash, "tool_version": __version__, "sweep_path": path}
    write_csv(root / "sweep.csv", cols, rows, prov)
    summary = {
        "tool_version": __version__,
        "config_hash": cfg.config_hash,
        "path": path,
        "values": list(values),
        "runs": [{"index": i, "dir": f"run_{i:03d}", "passed": r is not None and r.passed,
                  "config_hash": r.config.config_hash if r is not None else None, "error": e}
                 for i, (r, e) in enumerate(zip(reports, errors))],
    }
    write_text(root / "sweep.json", canonical_json(summary))
    return SweepResult(path, list(values), reports, errors)
