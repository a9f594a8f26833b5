"""Command line entry point.

    ensemble-tenets run CONFIG [--seed N] [--out-dir DIR] [--threads N]
    ensemble-tenets sweep CONFIG --param params.delta --values "linspace(0, 3.14159, 8)"
    ensemble-tenets defaults SCENARIO

The exit status is 0 only when every check of every run passed, runtime
checks included.  Config errors exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ensemble-tenets", description="Run verification scenarios and parameter sweeps.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out-dir", help="output directory (default: config out_dir, else runs/<scenario>-<hash>)")
        sp.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads (default 1)")

    run = sub.add_parser("run", help="run one scenario")
    common(run)
    sw = sub.add_parser("sweep", help="run a scenario once per parameter value")
    common(sw)
    sw.add_argument("--param", required=True, help="seed, grid.<key> or params.<key>")
    sw.add_argument("--values", required=True, help='JSON list, comma list, or linspace(a, b, n) / geomspace(a, b, n)')
    d = sub.add_parser("defaults", help="print a complete default config")
    d.add_argument("scenario")
    return p


def _set_threads(n: int) -> bool:
    """Pin thread pools; only effective before numpy is first imported."""
    for var in _THREAD_VARS:
        os.environ[var] = str(n)
    return "numpy" not in sys.modules


def _print_checks(report) -> None:
    for c in report.result.checks + report.result.timing_checks:
        crit = f"[{c.criterion}]" if c.criterion is not None else "[-]"
        print(f"{'PASS' if c.passed else 'FAIL'} {crit:>5} {c.name}: {c.value:.6g} {c.relation} {c.tolerance:.6g}")


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command != "defaults":
        if args.threads < 1:
            print("error: --threads must be at least 1", file=sys.stderr)
            return 2
        pinned = _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from . import harness

    if args.command == "defaults":
        try:
            print(json.dumps(harness.default_config(args.scenario), indent=2))
        except harness.ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0
    if not pinned:
        logging.getLogger("ensemble_tenets").warning("numpy was already imported; --threads is declared but not enforced")
    try:
        cfg = harness.load_config(args.config)
        if args.seed is not None:
            cfg = harness.set_path(cfg, "seed", args.seed)
        if args.command == "sweep":
            values = harness.parse_values(args.values)
            if not values:
                raise harness.ConfigError("--values is empty")
            # fail early on a bad path instead of after the first run
            harness.set_path(cfg, args.param, values[0])
    except (harness.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = args.out_dir if args.out_dir else harness.default_out_dir(cfg)

    if args.command == "run":
        report = harness.run_scenario(cfg, out, args.threads)
        _print_checks(report)
        print(f"{'PASSED' if report.passed else 'FAILED'}: {cfg.scenario} -> {out}")
        return 0 if report.passed else 1

    if args.out_dir is None:
        out = harness.default_out_dir(cfg).with_name(harness.default_out_dir(cfg).name + "-sweep")
    res = harness.sweep(cfg, args.param, values, out, args.threads)
    for v, r, err in zip(res.values, res.reports, res.errors):
        status = "PASS" if r is not None and r.passed else "FAIL"
        print(f"{status} {args.param}={v!r}" + (f" ({err})" if err else ""))
    print(f"{'PASSED' if res.passed else 'FAILED'}: sweep of {args.param} -> {out}")
    return 0 if res.passed else 1


if __name__ == "__main__":
    sys.exit(main())
