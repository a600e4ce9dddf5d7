"""Command-line entry point: ``dynrecon run|compare|spectrum``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, parse_config, with_overrides
from .runner import (IncompatibleReports, StageError, _system_stage, compare_runs,
                     load_tolerances, run_experiment)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED, EXIT_COMPARE = 0, 1, 2, 3, 4
THREADS_ENV = "DYNRECON_THREADS"


def _threads(flag):
    if flag is not None:
        return flag
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
        if n < 1:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        return n
    return None


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    cfg = with_overrides(cfg, seed=args.seed, out=args.out, threads=_threads(args.threads))
    if not cfg.run.out:
        cfg = with_overrides(cfg, out=str(Path("runs") / cfg.run.name))
    try:
        report = run_experiment(cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if exc.numeric else EXIT_FAIL
    print(json.dumps({"out": report.out_dir, "timings": report.timings, "summary": report.summary},
                     indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_compare(args) -> int:
    tol = load_tolerances(args.tol) if args.tol else None
    try:
        cmp = compare_runs(args.report_a, args.report_b, tol)
    except IncompatibleReports as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPARE
    print(json.dumps(cmp.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK if cmp.ok else EXIT_COMPARE


def _cmd_spectrum(args) -> int:
    from ..cocycle import lyapunov_spectrum, tangent_generator
    cfg = parse_config(args.config)
    cfg = with_overrides(cfg, seed=args.seed)
    try:
        bundle = _system_stage(cfg)
        n = min(cfg.analyses.spectrum_steps, len(bundle))
        sp = lyapunov_spectrum(tangent_generator(bundle, n), refactor_every=cfg.analyses.refactor_every)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if exc.numeric else EXIT_FAIL
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        sp.to_csv(out / "base.csv")
        sp.to_json(out / "base.json")
    print(json.dumps(sp.summary(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynrecon", description="Reconstruction and forecasting experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or config)")
    r.set_defaults(fn=_cmd_run)
    c = sub.add_parser("compare", help="compare two run reports")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("--tol", help="TOML file of per-metric relative tolerances")
    c.set_defaults(fn=_cmd_compare)
    s = sub.add_parser("spectrum", help="Lyapunov spectrum of the configured base system")
    s.add_argument("config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=_cmd_spectrum)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
