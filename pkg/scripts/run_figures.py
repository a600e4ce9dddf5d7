"""Run the figure configs in configs/ and print their headline numbers.

    python3 scripts/run_figures.py                # all fig*.toml
    python3 scripts/run_figures.py fig4 --threads 4
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from dynrecon.expcli.config import parse_config, with_overrides
from dynrecon.expcli.runner import StageError, run_experiment

ROOT = Path(__file__).resolve().parent.parent
HEADLINE = ("saturation", "slope_per_step", "slope_ratio", "delta", "n_diverged", "ratio")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", help="config stems, e.g. fig2_l63 (default: all fig*)")
    ap.add_argument("--out", default=str(ROOT / "runs"))
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args(argv)

    paths = sorted((ROOT / "configs").glob("fig*.toml"))
    if args.names:
        paths = [p for p in paths if any(p.stem.startswith(n) for n in args.names)]
    status = 0
    for path in paths:
        cfg = with_overrides(parse_config(path), out=str(Path(args.out) / path.stem))
        t0 = time.perf_counter()
        try:
            report = run_experiment(cfg, threads=args.threads)
        except StageError as exc:
            print(f"{path.stem}: failed at {exc.stage}: {exc}", file=sys.stderr)
            status = 1
            continue
        print(f"{path.stem}  ({time.perf_counter() - t0:.1f} s)  -> {report.out_dir}")
        for k, v in report.summary.items():
            if k.rsplit(".", 1)[-1] in HEADLINE:
                print(f"  {k:45s} {v}")
    return status


if __name__ == "__main__":
    sys.exit(main())
