"""Command-line experiment runner.

    mfrel run <config.json> [--jobs N] [--seed S]
    mfrel truth <config.json> [--method grid|mc] [--resolution R]
    mfrel bench [--replications K]

Exit codes: 0 success, 1 runtime or acceptance failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from importlib import resources
from pathlib import Path

import jsonschema

from .active_loop import (
    ExperimentConfig,
    LoopAbortedError,
    build_candidate_sets,
    replication_config,
    run_experiment,
    summarize_replications,
)
from .gp_core import InvalidArgumentError
from .problems import (
    IngestionError,
    StandardGaussian,
    TruncatedGaussian,
    ground_truth_Pa,
    idm_cost,
    load_empirical_csv,
    make_problem,
)

log = logging.getLogger("mfreliability")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
TRACE_KEYS = ("iter", "fidelity", "x", "y", "cost_total", "pa_estimate", "benefit", "score")
TRUTH_DEFAULTS = {"method": "grid", "resolution": 2000, "seed": 0}
RUN_DEFAULTS = {"replications": 1, "tolerance": 0.05}
BENCHMARKS = {
    # name: (shipped config, percentile threshold, median threshold)
    "multimodal": ("multimodal.json", 28.0, 22.0),
    "four_branch": ("four_branch.json", 60.0, 45.0),
}


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- serialization


def fmt_float(v) -> str:
    v = float(v)
    if not math.isfinite(v):
        return "null"
    text = format(v, ".17g")
    # keep integral floats recognizable as floats when read back
    return text if any(c in text for c in ".en") else text + ".0"


def dumps(obj) -> str:
    """JSON with every float written to 17 significant digits."""
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v) for v in obj) + "]"
    if hasattr(obj, "tolist"):
        return dumps(obj.tolist())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def trace_lines(trace) -> list:
    out = []
    for r in trace.all_records():
        rec = asdict(r)
        out.append(dumps({k: rec[k] for k in TRACE_KEYS}))
    return out


# ---------------------------------------------------------------- config


def schema() -> dict:
    return json.loads(resources.files("mfreliability").joinpath("run_config.schema.json").read_text())


def shipped_config(name: str) -> Path:
    return Path(str(resources.files("mfreliability").joinpath("configs", name)))


def load_config(path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{path}: {'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("\n".join(lines))
    return raw, path.resolve().parent


def effective_config(raw: dict) -> dict:
    """Fill every default so the result reproduces the run on its own."""
    cfg = copy.deepcopy(raw)
    for k, v in RUN_DEFAULTS.items():
        cfg.setdefault(k, v)
    prob = cfg["problem"]
    prob.setdefault("delta", 0.0)
    if prob["name"] == "cutin":
        prob.setdefault("dt_high", 0.2)
        prob.setdefault("dt_low", 1.0)
    exp = cfg.setdefault("experiment", {})
    if prob["name"] == "cutin":
        exp.setdefault("cost_high", 1.0)
        if prob["dt_low"] is not None:
            exp.setdefault("cost_low", idm_cost(prob["dt_low"]) / idm_cost(prob["dt_high"]))
    for f in fields(ExperimentConfig):
        if f.name not in ("replication", "delta"):
            exp.setdefault(f.name, f.default)
    truth = cfg.setdefault("truth", {})
    for k, v in TRUTH_DEFAULTS.items():
        truth.setdefault(k, v)
    return cfg


def build_distribution(spec: dict | None, base_dir: Path):
    if spec is None:
        return None
    kind = spec["kind"]
    if kind == "standard_gaussian":
        return StandardGaussian(spec.get("dim", 2))
    if kind == "truncated_gaussian":
        return TruncatedGaussian(spec["means"], spec["sds"], spec["lows"], spec["highs"])
    path = Path(spec["path"])
    return load_empirical_csv(path if path.is_absolute() else base_dir / path)


def build_problem(cfg: dict, base_dir: Path):
    prob = cfg["problem"]
    kwargs = {"delta": prob["delta"]}
    dist = build_distribution(prob.get("distribution"), base_dir)
    if dist is not None:
        kwargs["distribution"] = dist
    if prob["name"] == "cutin":
        kwargs.update(dt_high=prob["dt_high"], dt_low=prob["dt_low"])
    problem = make_problem(prob["name"], **kwargs)
    if problem.distribution.dim != problem.dim:
        raise InvalidArgumentError(
            f"distribution dimension {problem.distribution.dim} does not match problem dimension {problem.dim}"
        )
    return problem


def build_experiment(cfg: dict) -> ExperimentConfig:
    return ExperimentConfig(delta=cfg["problem"]["delta"], **cfg["experiment"])


def prepare(config_path, seed=None):
    """Load, validate and instantiate; every failure here is a configuration error."""
    raw, base_dir = load_config(config_path)
    cfg = effective_config(raw)
    if seed is not None:
        cfg["experiment"]["seed"] = int(seed)
    try:
        problem = build_problem(cfg, base_dir)
        experiment = build_experiment(cfg)
    except (InvalidArgumentError, IngestionError, TypeError) as exc:
        raise ConfigError(f"{config_path}: {exc}") from None
    if experiment.mode != "single" and problem.evaluator_low is None:
        raise ConfigError(f"{config_path}: mode {experiment.mode!r} needs problem.dt_low")
    # relative output paths follow the working directory, data paths the config file
    cfg["output_dir"] = str(Path(cfg["output_dir"]).resolve())
    cfg["_base_dir"] = str(base_dir)
    return cfg, problem, experiment


def public(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


# ---------------------------------------------------------------- truth


def truth_record(problem, method, resolution, seed) -> dict:
    t0 = time.perf_counter()
    value, err = ground_truth_Pa(problem, method, resolution, seed=seed)
    return {
        "problem": problem.name, "delta": problem.delta, "meta": problem.meta,
        "distribution": problem.distribution.to_dict(), "method": method,
        "resolution": resolution, "seed": seed, "value": value, "std_error": err,
        "seconds": time.perf_counter() - t0,
    }


def _truth_key(rec: dict) -> tuple:
    return (rec.get("problem"), rec.get("delta"), json.dumps(rec.get("meta"), sort_keys=True),
            json.dumps(rec.get("distribution"), sort_keys=True), rec.get("method"), rec.get("resolution"),
            rec.get("seed"))


def resolve_truth(cfg: dict, problem) -> dict:
    """Truth from the config, a matching cached truth.json, or a fresh computation."""
    t = cfg["truth"]
    if "value" in t:
        return {"problem": problem.name, "method": "given", "value": t["value"],
                "std_error": t.get("std_error", 0.0)}
    wanted = {"problem": problem.name, "delta": problem.delta, "meta": problem.meta,
              "distribution": problem.distribution.to_dict(), "method": t["method"],
              "resolution": t["resolution"], "seed": t["seed"]}
    cache = Path(cfg["output_dir"]) / "truth.json"
    if cache.exists():
        try:
            rec = json.loads(cache.read_text())
            if _truth_key(rec) == _truth_key(wanted):
                rec["reused"] = str(cache)
                return rec
        except (OSError, json.JSONDecodeError):
            log.warning("ignoring unreadable truth cache %s", cache)
    rec = truth_record(problem, t["method"], t["resolution"], t["seed"])
    cache.parent.mkdir(parents=True, exist_ok=True)
    cache.write_text(dumps(rec) + "\n")
    return rec


# ---------------------------------------------------------------- run


def _replicate(cfg: dict, index: int):
    """Run one replication and write its JSONL; returns (index, trace, error)."""
    problem = build_problem(cfg, Path(cfg["_base_dir"]))
    exp = replication_config(build_experiment(cfg), index)
    cands, est = build_candidate_sets(problem, exp)
    error = None
    try:
        trace = run_experiment(problem, exp, cands, est)
    except LoopAbortedError as exc:
        trace, error = exc.partial, str(exc)
    path = Path(cfg["output_dir"]) / "traces" / f"rep_{index:03d}.jsonl"
    path.write_text("".join(line + "\n" for line in trace_lines(trace)))
    return index, trace, error


def execute(cfg: dict, problem, jobs: int = 1, out=None):
    """Run all replications, write outputs; returns (summary or None, errors)."""
    outdir = Path(cfg["output_dir"])
    (outdir / "traces").mkdir(parents=True, exist_ok=True)
    (outdir / "effective_config.json").write_text(dumps(public(cfg)) + "\n")
    truth = resolve_truth(cfg, problem)
    print(f"truth P = {fmt_float(truth['value'])} ({truth['method']}, se {fmt_float(truth['std_error'])})", file=out)
    n = cfg["replications"]
    results = []
    if jobs > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, n)) as pool:
            futures = [pool.submit(_replicate, cfg, i) for i in range(n)]
            results = [f.result() for f in futures]
    else:
        results = [_replicate(cfg, i) for i in range(n)]
    errors = [(i, e) for i, _, e in results if e]
    for i, e in errors:
        print(f"replication {i} failed: {e}", file=sys.stderr)
    traces = [t for _, t, e in results if not e]
    summary = None
    if traces:
        summary = summarize_replications(traces, truth["value"], cfg["tolerance"], provenance=truth)
        with open(outdir / "summary.csv", "w") as fh:
            fh.write("cost,p15,median,p85\n")
            for row in summary.rows():
                fh.write(",".join(fmt_float(v) for v in row) + "\n")
        meta = {
            "problem": problem.name, "replications": len(traces), "tolerance": summary.tolerance,
            "truth": truth, "convergence_cost": summary.convergence_cost,
            "median_convergence_cost": summary.median_convergence_cost,
            "final_median": float(summary.median[-1]),
            "picks": [{"high": t.n_picks("high"), "low": t.n_picks("low")} for t in traces],
        }
        (outdir / "summary.json").write_text(dumps(meta) + "\n")
        print(f"convergence cost (p15/p85 within {summary.tolerance:g}): {summary.convergence_cost:g}; "
              f"median: {summary.median_convergence_cost:g}", file=out)
    return summary, errors


def cmd_run(args) -> int:
    try:
        cfg, problem, _ = prepare(args.config, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _, errors = execute(cfg, problem, args.jobs)
    except (InvalidArgumentError, ValueError, RuntimeError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_FAIL if errors else EXIT_OK


def cmd_truth(args) -> int:
    try:
        cfg, problem, _ = prepare(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    t = cfg["truth"]
    method = args.method or t["method"]
    resolution = args.resolution or t["resolution"]
    try:
        rec = truth_record(problem, method, resolution, t["seed"])
    except InvalidArgumentError as exc:
        print(f"truth failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outdir = Path(cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "truth.json").write_text(dumps(rec) + "\n")
    print(f"{problem.name}: P = {fmt_float(rec['value'])} +/- {fmt_float(rec['std_error'])} "
          f"({method}, resolution {resolution}, {rec['seconds']:.1f} s)")
    return EXIT_OK


def run_bench(replications: int = 20, output_dir=None, jobs: int = 1, out=None) -> tuple[bool, list]:
    rows = []
    root = Path(output_dir) if output_dir else Path(tempfile.mkdtemp(prefix="mfrel-bench-"))
    for name, (fname, p_thr, m_thr) in BENCHMARKS.items():
        cfg, problem, _ = prepare(shipped_config(fname))
        cfg["replications"] = replications
        cfg["output_dir"] = str(root / name)
        summary, errors = execute(cfg, problem, jobs, out=out)
        conv = summary.convergence_cost if summary else math.inf
        mconv = summary.median_convergence_cost if summary else math.inf
        ok = not errors and conv <= p_thr and mconv <= m_thr
        rows.append({"benchmark": name, "convergence": conv, "median_convergence": mconv,
                     "threshold": p_thr, "median_threshold": m_thr, "pass": ok})
    print(f"\n{'benchmark':<12} {'p15/p85 conv':>12} {'(<=)':>6} {'median conv':>12} {'(<=)':>6}  result", file=out)
    for r in rows:
        print(f"{r['benchmark']:<12} {r['convergence']:>12g} {r['threshold']:>6g} "
              f"{r['median_convergence']:>12g} {r['median_threshold']:>6g}  {'PASS' if r['pass'] else 'FAIL'}", file=out)
    if replications < 10:
        print(f"note: {replications} replications is statistically weak; percentiles are unreliable", file=out)
    print(f"outputs in {root}", file=out)
    return all(r["pass"] for r in rows), rows


def cmd_bench(args) -> int:
    ok, _ = run_bench(args.replications, args.output_dir, args.jobs)
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfrel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run replicated adaptive-sampling experiments")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("truth", help="compute the reference failure probability")
    p.add_argument("config")
    p.add_argument("--method", choices=["grid", "mc"], default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.set_defaults(func=cmd_truth)

    p = sub.add_parser("bench", help="benchmark reproductions with a pass/fail table")
    p.add_argument("--replications", type=int, default=20)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("--jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
