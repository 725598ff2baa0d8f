"""Replicated runs of the two analytic benchmarks with a pass/fail table.

    python3 scripts/run_benchmarks.py --replications 20 --jobs 4 --output-dir runs/bench
"""
import argparse
import sys

from mfreliability.cli import run_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--replications", type=int, default=20)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--output-dir", default="runs/bench")
    args = ap.parse_args()
    ok, rows = run_bench(args.replications, args.output_dir, args.jobs)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
