"""Cut-in study: single- vs bi-fidelity cost to reach the tolerance band, and
how the choice of low-fidelity step size shifts the sampling mix.

Runs the shipped cut-in configurations (or reads finished runs with
``--reuse``) and prints per-replication first-reach costs and pick counts.

    python3 scripts/cutin_study.py --output-dir runs/cutin --jobs 4
"""
import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from mfreliability.cli import execute, prepare, shipped_config

CONFIGS = ("cutin_single_d3.json", "cutin_bifi.json", "cutin_bifi_dt5.json")


def load_traces(outdir: Path):
    paths = sorted((outdir / "traces").glob("rep_*.jsonl"))
    return [[json.loads(line) for line in p.read_text().splitlines()] for p in paths]


def first_reach(records, truth, tol):
    start = [r for r in records if r["iter"] == 0][-1]
    for r in [start] + [r for r in records if r["iter"] > 0]:
        if abs(r["pa_estimate"] - truth) <= tol * truth:
            return r["cost_total"]
    return math.inf


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--output-dir", default="runs/cutin")
    ap.add_argument("--replications", type=int, default=None)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--reuse", action="store_true", help="summarize existing outputs only")
    args = ap.parse_args()
    root = Path(args.output_dir)

    stats = {}
    for name in CONFIGS:
        outdir = root / name.removesuffix(".json")
        if not args.reuse:
            cfg, problem, _ = prepare(shipped_config(name))
            cfg["output_dir"] = str(outdir.resolve())
            if args.replications:
                cfg["replications"] = args.replications
            execute(cfg, problem, args.jobs)
        summary = json.loads((outdir / "summary.json").read_text())
        truth, tol = summary["truth"]["value"], summary["tolerance"]
        traces = load_traces(outdir)
        reach = [first_reach(t, truth, tol) for t in traces]
        picks = [(sum(r["iter"] > 0 and r["fidelity"] == "low" for r in t),
                  sum(r["iter"] > 0 and r["fidelity"] == "high" for r in t)) for t in traces]
        stats[name] = (float(np.median(reach)), picks)
        print(f"\n{name}: truth {truth:.6g}, median first-reach cost {np.median(reach):g}")
        print("  first reach:", " ".join(f"{c:g}" for c in reach))
        print("  picks (low, high):", " ".join(f"{lo}/{hi}" for lo, hi in picks))

    single, bifi = stats[CONFIGS[0]][0], stats[CONFIGS[1]][0]
    print(f"\nbi/single median cost ratio: {bifi / single:.3g}")
    for name in CONFIGS[1:]:
        picks = stats[name][1]
        lo, hi = sum(p[0] for p in picks), sum(p[1] for p in picks)
        print(f"{name}: pooled n_l/n_h = {lo}/{hi} = {lo / max(hi, 1):.3g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
