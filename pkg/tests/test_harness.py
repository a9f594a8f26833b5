import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ensemble_tenets import __version__
from ensemble_tenets.bundles import read_bundle, read_csv, sha256_file, write_bundle
from ensemble_tenets.cli import main
from ensemble_tenets.harness import (
    ConfigError,
    config_from_dict,
    default_config,
    load_config,
    parse_values,
    run_scenario,
    set_path,
    sweep,
)


def _write(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(obj if isinstance(obj, str) else json.dumps(obj, indent=2))
    return p


def _cli(*args, cwd=None):
    env = dict(os.environ)
    env["PYTHONPATH"] = str(Path(__file__).resolve().parents[1] / "src")
    return subprocess.run([sys.executable, "-m", "ensemble_tenets", *args], capture_output=True, text=True,
                          cwd=cwd, env=env, timeout=300)


QUICK = {"schema_version": 1, "scenario": "manybody", "params": {"checks": ["total_energy"]}}


# ------------------------------------------------------------------ config validation
def test_unknown_top_level_key_is_named_with_line(tmp_path):
    p = _write(tmp_path, {**QUICK, "sed": 3})
    with pytest.raises(ConfigError) as err:
        load_config(p)
    msg = str(err.value)
    assert "'sed'" in msg and "did you mean 'seed'" in msg and "line " in msg


def test_unknown_nested_key(tmp_path):
    p = _write(tmp_path, {**QUICK, "params": {"checks": ["total_energy"], "trapp": 0.1}})
    with pytest.raises(ConfigError, match="trapp.*did you mean 'trap'"):
        load_config(p)


def test_cli_rejects_unknown_key_before_running(tmp_path):
    p = _write(tmp_path, {**QUICK, "grid": {"lenght": 3.0}})
    r = _cli("run", str(p), "--out-dir", str(tmp_path / "out"))
    assert r.returncode == 2
    assert "lenght" in r.stderr
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize(
    "raw, pattern",
    [
        ({"scenario": "manybody"}, "schema_version"),
        ({"schema_version": 2, "scenario": "manybody"}, "unsupported schema_version"),
        ({"schema_version": 1, "scenario": "plasma"}, "unknown scenario"),
        ({"schema_version": 1, "scenario": "manybody", "seed": -1}, "non-negative"),
        ({"schema_version": 1, "scenario": "manybody", "params": {"trap": "big"}}, "must be float"),
        ({"schema_version": 1, "scenario": "manybody", "grid": {"levels": 64}}, "must be list"),
        ({"schema_version": 1, "scenario": "manybody", "params": {"checks": ["nope"]}}, "params.checks"),
    ],
)
def test_schema_violations(raw, pattern):
    with pytest.raises(ConfigError, match=pattern):
        config_from_dict(raw)


def test_json_syntax_error_has_line_and_column(tmp_path):
    p = _write(tmp_path, '{\n  "schema_version": 1,\n  "scenario": "bell",,\n}')
    with pytest.raises(ConfigError, match=r"cfg\.json:3:\d+:"):
        load_config(p)


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/cfg.json")


def test_defaults_fill_and_hash_ignores_out_dir():
    a = config_from_dict(QUICK)
    b = config_from_dict({**QUICK, "out_dir": "elsewhere"})
    assert a.params["trap"] == default_config("manybody")["params"]["trap"]
    assert a.config_hash == b.config_hash
    assert set_path(a, "seed", 5).config_hash != a.config_hash
    # int given where a float is expected normalizes to the same hash
    c = config_from_dict({**QUICK, "params": {"checks": ["total_energy"], "trap": 1}})
    d = config_from_dict({**QUICK, "params": {"checks": ["total_energy"], "trap": 1.0}})
    assert c.config_hash == d.config_hash


def test_defaults_command_round_trips(tmp_path, capsys):
    assert main(["defaults", "spectra"]) == 0
    p = _write(tmp_path, capsys.readouterr().out)
    cfg = load_config(p)
    assert cfg.scenario == "spectra"
    assert cfg.config_hash == config_from_dict({"schema_version": 1, "scenario": "spectra"}).config_hash


# ------------------------------------------------------------------ bundles
def test_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    rho = rng.random((3, 4, 5))
    psi = rng.normal(size=(3, 4, 5)) + 1j * rng.normal(size=(3, 4, 5))
    files = write_bundle(tmp_path, "b", {"rho": rho, "psi": psi}, ("t", "x", "y"), provenance={"k": "v"})
    header, data = read_bundle(tmp_path, "b")
    assert header["components"] == ["rho", "psi.re", "psi.im"]
    assert header["provenance"] == {"k": "v"}
    assert np.array_equal(data["rho"], rho) and np.array_equal(data["psi"], psi)
    # payload is plain little-endian float64 in header order
    raw = np.fromfile(files[1], dtype="<f8")
    assert np.array_equal(raw[60:120].reshape(3, 4, 5), psi.real)


def test_bundle_detects_corruption(tmp_path):
    _, bp = write_bundle(tmp_path, "b", {"a": np.arange(6.0)}, ("x",))
    raw = bytearray(bp.read_bytes())
    raw[3] ^= 1
    bp.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        read_bundle(tmp_path, "b")


def test_bundle_rejects_mismatched_shapes(tmp_path):
    with pytest.raises(ValueError, match="shape"):
        write_bundle(tmp_path, "b", {"a": np.zeros(3), "b": np.zeros(4)}, ("x",))


# ------------------------------------------------------------------ runs
@pytest.fixture(scope="module")
def pair_run(tmp_path_factory):
    cfg = config_from_dict({"schema_version": 1, "scenario": "manybody", "seed": 7,
                            "grid": {"levels": [32, 64, 128]}, "params": {"checks": ["conservation", "total_energy"]}})
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    return cfg, run_scenario(cfg, a), a, run_scenario(cfg, b), b


def test_report_contents(pair_run):
    cfg, rep, out, _, _ = pair_run
    report = json.loads((out / "report.json").read_text())
    assert report["tool_version"] == __version__
    assert report["config_hash"] == cfg.config_hash
    assert report["config"]["params"]["checks"] == ["conservation", "total_energy"]
    assert report["seed"] == 7 and report["threads"] == 1
    names = [c["name"] for c in report["checks"]]
    assert len(names) == len(set(names))
    for art in report["artifacts"]:
        assert sha256_file(out / art["file"]) == art["sha256"]
    assert {"checks.csv", "pair_density.json", "pair_density.f64"} <= {a["file"] for a in report["artifacts"]}
    timing = json.loads((out / "timing.json").read_text())
    assert set(timing["wall_seconds"]) >= {"conservation", "total_energy"}


def test_csv_provenance(pair_run):
    cfg, _, out, _, _ = pair_run
    prov, header, rows = read_csv(out / "checks.csv")
    assert prov["config_hash"] == cfg.config_hash and prov["tool_version"] == __version__
    assert header[:3] == ["criterion", "name", "passed"]
    assert len(rows) == len(json.loads((out / "report.json").read_text())["checks"])


def test_rerun_is_byte_identical(pair_run):
    _, _, a, _, b = pair_run
    files = sorted(p.name for p in a.iterdir() if p.name != "timing.json")
    assert files == sorted(p.name for p in b.iterdir() if p.name != "timing.json")
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_bundle_from_run_reads_back(pair_run):
    _, _, out, _, _ = pair_run
    header, data = read_bundle(out, "pair_density")
    assert header["provenance"]["config_hash"]
    rho = data[header["components"][0]]
    assert np.all(np.isfinite(rho))


def test_failing_check_sets_exit_status(tmp_path):
    # a nearly coherent "random" pulse moves population, so the wide-band check fails
    p = _write(tmp_path, {"schema_version": 1, "scenario": "spectra",
                          "params": {"checks": ["wide_band"], "coherence_length": 1.0e6}})
    assert main(["run", str(p), "--out-dir", str(tmp_path / "o")]) == 1
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert not report["passed"]


def test_cli_run_with_threads(tmp_path):
    p = _write(tmp_path, QUICK)
    r = _cli("run", str(p), "--out-dir", str(tmp_path / "o"), "--threads", "2", "--seed", "3")
    assert r.returncode == 0, r.stderr
    assert "PASS" in r.stdout
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["threads"] == 2 and report["seed"] == 3


# ------------------------------------------------------------------ sweeps
def test_parse_values():
    assert parse_values("[1, 2.5]") == [1, 2.5]
    assert parse_values("0.5, 1, true") == [0.5, 1, True]
    assert parse_values("linspace(0, 1, 3)") == [0.0, 0.5, 1.0]
    assert np.allclose(parse_values("geomspace(1, 100, 3)"), [1, 10, 100])


def test_sweep_records_failures_and_continues(tmp_path):
    cfg = config_from_dict(QUICK)
    res = sweep(cfg, "params.softening", [0.5, "soft", 1.0], tmp_path)
    assert [r is not None for r in res.reports] == [True, False, True]
    assert not res.passed
    prov, header, rows = read_csv(tmp_path / "sweep.csv")
    assert prov["sweep_path"] == "params.softening"
    assert len(rows) == 3
    col = dict(zip(header, zip(*rows)))
    assert col["passed"] == ("true", "false", "true")
    assert "must be float" in col["error"][1]
    assert (tmp_path / "run_000" / "report.json").exists() and (tmp_path / "run_002" / "report.json").exists()
    hashes = {json.loads((tmp_path / f"run_00{i}" / "report.json").read_text())["config_hash"] for i in (0, 2)}
    assert len(hashes) == 2


def test_sweep_path_validation():
    cfg = config_from_dict(QUICK)
    with pytest.raises(ConfigError, match="sweep path"):
        set_path(cfg, "trap", 1.0)
    with pytest.raises(ConfigError, match="unknown key"):
        set_path(cfg, "params.trapp", 1.0)


def test_cli_sweep(tmp_path):
    p = _write(tmp_path, QUICK)
    code = main(["sweep", str(p), "--param", "seed", "--values", "1,2", "--out-dir", str(tmp_path / "s")])
    assert code == 0
    summary = json.loads((tmp_path / "s" / "sweep.json").read_text())
    assert [r["passed"] for r in summary["runs"]] == [True, True]


def test_separate_processes_write_identical_bytes(tmp_path):
    p = _write(tmp_path, {"schema_version": 1, "scenario": "manybody", "grid": {"levels": [32, 64, 128]},
                          "params": {"checks": ["conservation"]}})
    outs = []
    for k, hseed in enumerate(("1", "2")):
        env = dict(os.environ, PYTHONHASHSEED=hseed, PYTHONPATH=str(Path(__file__).resolve().parents[1] / "src"))
        out = tmp_path / f"o{k}"
        subprocess.run([sys.executable, "-m", "ensemble_tenets", "run", str(p), "--out-dir", str(out)],
                       env=env, capture_output=True, timeout=300)
        outs.append({f.name: f.read_bytes() for f in out.iterdir() if f.name != "timing.json"})
    assert "pair_density.f64" in outs[0]
    assert outs[0] == outs[1]


@pytest.mark.parametrize("path", sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.json")),
                         ids=lambda p: p.stem)
def test_shipped_configs_are_valid(path):
    cfg = load_config(path)
    assert cfg.scenario in path.stem


def test_refinement_sweep_reports_ratios(tmp_path):
    cfg = config_from_dict({"schema_version": 1, "scenario": "kg", "params": {"checks": ["probe_residual"]}})
    res = sweep(cfg, "grid.n", [64, 128, 256], tmp_path)
    assert res.passed
    _, header, rows = read_csv(tmp_path / "sweep.csv")
    ratios = [float(r[header.index("tenet_residual_ratio")]) for r in rows[1:]]
    assert all(r > 3.5 for r in ratios)
