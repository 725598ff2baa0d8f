import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfreliability.cli import dumps, effective_config, fmt_float, main
from mfreliability.problems import four_branch, multimodal

TINY = {
    "n_init_high": 6,
    "budget": 8,
    "candidate_method": "grid",
    "candidate_size": 256,
    "fit_restarts": 3,
    "acq_restarts": 2,
    "acq_seeds": 2,
    "acq_pool": 32,
}


def write_config(tmp_path, name="cfg.json", **over):
    cfg = {
        "problem": {"name": "multimodal"},
        "experiment": dict(TINY),
        "replications": 2,
        "truth": {"method": "grid", "resolution": 200},
        "output_dir": str(tmp_path / "out"),
    }
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k] = {**cfg[k], **v}
        else:
            cfg[k] = v
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


# ---- serialization


def test_fmt_float_seventeen_digits():
    assert fmt_float(0.1) == "0.10000000000000001"
    assert fmt_float(35.0) == "35.0"
    assert fmt_float(1e-20) == "9.9999999999999995e-21"
    assert fmt_float(math.nan) == "null"


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_float_round_trips(v):
    assert float(fmt_float(v)) == v


def test_dumps_is_valid_json():
    obj = {"a": [1, 2.5, None, True], "b": {"c": np.float64(1 / 3)}, "d": np.arange(2)}
    back = json.loads(dumps(obj))
    assert back == {"a": [1, 2.5, None, True], "b": {"c": 1 / 3}, "d": [0, 1]}


# ---- configuration errors


def test_bad_json_reports_position(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"problem": {"name": "multimodal"},\n "output_dir": }')
    assert main(["run", str(path)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    path = write_config(tmp_path, experiment={"learning_rate": 0.1})
    assert main(["run", str(path)]) == 2
    err = capsys.readouterr().err
    assert "experiment" in err and "learning_rate" in err
    assert not (tmp_path / "out").exists()


def test_schema_violations(tmp_path):
    assert main(["run", str(write_config(tmp_path, problem={"name": "three_branch"}))]) == 2
    assert main(["run", str(write_config(tmp_path, experiment={"n_init_high": 1}))]) == 2
    assert main(["run", str(write_config(tmp_path, replications=0))]) == 2


def test_semantic_config_errors(tmp_path):
    # budget below the initial design cost
    assert main(["run", str(write_config(tmp_path, experiment={"budget": 3}))]) == 2
    # bi-fidelity without a low-fidelity model
    path = write_config(tmp_path, problem={"name": "cutin", "dt_low": None}, experiment={"mode": "bifi"})
    assert main(["run", str(path)]) == 2


def test_missing_files(tmp_path):
    assert main(["run", str(tmp_path / "nope.json")]) == 2
    path = write_config(tmp_path, problem={"name": "cutin", "distribution": {"kind": "empirical", "path": "x.csv"}})
    assert main(["run", str(path)]) == 2


def test_bad_empirical_file(tmp_path, capsys):
    (tmp_path / "d.csv").write_text("x1,x2,weight\n10,0,1\n20,abc,1\n")
    path = write_config(tmp_path, problem={"name": "cutin", "distribution": {"kind": "empirical", "path": "d.csv"}})
    assert main(["run", str(path)]) == 2
    assert "row" in capsys.readouterr().err


def test_bad_arguments():
    assert main(["run"]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["truth", "x.json", "--method", "quadrature"]) == 2


# ---- run outputs


def test_run_with_budget_equal_to_initial(tmp_path):
    path = write_config(tmp_path, experiment={"budget": 6}, replications=1)
    assert main(["run", str(path)]) == 0
    out = tmp_path / "out"
    rows = list(csv.reader((out / "summary.csv").open()))
    assert rows[0] == ["cost", "p15", "median", "p85"]
    assert len(rows) == 2
    trace = read_jsonl(out / "traces" / "rep_000.jsonl")
    assert len(trace) == 6
    assert all(set(r) == {"iter", "fidelity", "x", "y", "cost_total", "pa_estimate", "benefit", "score"}
               for r in trace)
    assert {r["iter"] for r in trace} == {0}


def test_run_outputs_and_invariants(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", str(path)]) == 0
    out = tmp_path / "out"
    traces = sorted((out / "traces").glob("rep_*.jsonl"))
    assert [p.name for p in traces] == ["rep_000.jsonl", "rep_001.jsonl"]
    for p in traces:
        recs = read_jsonl(p)
        assert [r["iter"] for r in recs] == [0] * 6 + [1, 2]
        assert [r["cost_total"] for r in recs] == [float(i) for i in range(1, 9)]
        for r in recs:
            # replaying the record reproduces the model output bit for bit
            assert float(multimodal(np.array(r["x"]))) == r["y"]
            assert 0.0 <= r["pa_estimate"] <= 1.0
    with (out / "summary.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["cost"]) for r in rows] == [6.0, 7.0, 8.0]
    for r in rows:
        assert float(r["p15"]) <= float(r["median"]) <= float(r["p85"])
    summary = json.loads((out / "summary.json").read_text())
    assert summary["replications"] == 2
    assert summary["picks"] == [{"high": 2, "low": 0}] * 2


def test_floats_written_with_seventeen_digits(tmp_path):
    path = write_config(tmp_path, replications=1)
    assert main(["run", str(path)]) == 0
    line = (tmp_path / "out" / "traces" / "rep_000.jsonl").read_text().splitlines()[0]
    rec = json.loads(line)
    assert dumps(rec) == line
    assert f'"x": [{fmt_float(rec["x"][0])}, {fmt_float(rec["x"][1])}]' in line


def test_rerun_is_byte_identical(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", str(path)]) == 0
    first = {p.name: p.read_bytes() for p in (tmp_path / "out" / "traces").iterdir()}
    csv1 = (tmp_path / "out" / "summary.csv").read_bytes()
    assert main(["run", str(path)]) == 0
    second = {p.name: p.read_bytes() for p in (tmp_path / "out" / "traces").iterdir()}
    assert first == second
    assert csv1 == (tmp_path / "out" / "summary.csv").read_bytes()


def test_seed_override_changes_traces(tmp_path):
    path = write_config(tmp_path, replications=1)
    assert main(["run", str(path)]) == 0
    a = (tmp_path / "out" / "traces" / "rep_000.jsonl").read_bytes()
    assert main(["run", str(path), "--seed", "5"]) == 0
    b = (tmp_path / "out" / "traces" / "rep_000.jsonl").read_bytes()
    assert a != b
    eff = json.loads((tmp_path / "out" / "effective_config.json").read_text())
    assert eff["experiment"]["seed"] == 5


def test_effective_config_round_trip(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", str(path)]) == 0
    out = tmp_path / "out"
    eff = json.loads((out / "effective_config.json").read_text())
    assert eff["experiment"]["fit_restarts"] == 3
    assert eff["experiment"]["warm_restarts"] == 3
    assert eff["truth"] == {"method": "grid", "resolution": 200, "seed": 0}
    assert effective_config(eff) == eff
    before = {p.name: p.read_bytes() for p in (out / "traces").iterdir()}
    eff["output_dir"] = str(tmp_path / "again")
    again = tmp_path / "eff.json"
    again.write_text(json.dumps(eff))
    assert main(["run", str(again)]) == 0
    after = {p.name: p.read_bytes() for p in (tmp_path / "again" / "traces").iterdir()}
    assert before == after


def test_jobs_do_not_change_results(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", str(path)]) == 0
    serial = {p.name: p.read_bytes() for p in (tmp_path / "out" / "traces").iterdir()}
    assert main(["run", str(path), "--jobs", "2"]) == 0
    parallel = {p.name: p.read_bytes() for p in (tmp_path / "out" / "traces").iterdir()}
    assert serial == parallel


def test_cutin_defaults_and_empirical_input(tmp_path):
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(5, 60, 50), rng.uniform(-15, 5, 50)])
    lines = ["x1,x2"] + [f"{float(a)!r},{float(b)!r}" for a, b in pts]
    (tmp_path / "nd.csv").write_text("\n".join(lines) + "\n")
    path = write_config(tmp_path, problem={"name": "cutin", "delta": 3.0,
                                           "distribution": {"kind": "empirical", "path": "nd.csv"}},
                        experiment={"mode": "bifi", "n_init_low": 5, "budget": 8}, replications=1)
    assert main(["run", str(path)]) == 0
    eff = json.loads((tmp_path / "out" / "effective_config.json").read_text())
    assert eff["problem"]["dt_high"] == 0.2 and eff["problem"]["dt_low"] == 1.0
    assert eff["experiment"]["cost_low"] == pytest.approx(0.2)
    truth = json.loads((tmp_path / "out" / "truth.json").read_text())
    from mfreliability.problems import idm_evaluator
    exact = float(np.mean(idm_evaluator(0.2)(pts) < 3.0))
    assert truth["value"] == pytest.approx(exact, abs=1e-12)


# ---- truth


def test_truth_constant_safe_toy(tmp_path, capsys):
    # four-branch fails where f > delta; it never exceeds 100 on the box
    path = write_config(tmp_path, problem={"name": "four_branch", "delta": 100.0})
    assert main(["truth", str(path), "--method", "grid", "--resolution", "300"]) == 0
    rec = json.loads((tmp_path / "out" / "truth.json").read_text())
    assert rec["value"] == 0.0
    assert rec["method"] == "grid" and rec["resolution"] == 300


def test_truth_mc_four_branch(tmp_path):
    path = write_config(tmp_path, problem={"name": "four_branch"})
    assert main(["truth", str(path), "--method", "mc", "--resolution", "1000000"]) == 0
    rec = json.loads((tmp_path / "out" / "truth.json").read_text())
    assert rec["std_error"] == pytest.approx(math.sqrt(rec["value"] * (1 - rec["value"]) / 1e6), rel=1e-9)
    x = np.random.default_rng(1).standard_normal((10**6, 2))
    # independent draw: agreement within a few joint standard errors
    other = float(np.mean(four_branch(x) > 0))
    assert abs(rec["value"] - other) < 5 * math.sqrt(2) * rec["std_error"]


def test_truth_resolution_guard(tmp_path):
    path = write_config(tmp_path)
    assert main(["truth", str(path), "--method", "grid", "--resolution", "20000"]) == 2


def test_run_reuses_cached_truth(tmp_path, capsys):
    path = write_config(tmp_path, replications=1)
    assert main(["truth", str(path)]) == 0
    cached = json.loads((tmp_path / "out" / "truth.json").read_text())
    assert main(["run", str(path)]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["truth"]["value"] == cached["value"]
    assert "reused" in summary["truth"]


# ---- bench


@pytest.mark.slow
def test_bench_smoke(tmp_path, capsys):
    code = main(["bench", "--replications", "2", "--output-dir", str(tmp_path)])
    out = capsys.readouterr().out
    assert code in (0, 1)
    assert "statistically weak" in out
    for name in ("multimodal", "four_branch"):
        assert name in out
        assert (tmp_path / name / "summary.csv").exists()
