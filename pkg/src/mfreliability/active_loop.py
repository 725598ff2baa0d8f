"""Budgeted adaptive sampling loops and the plug-in failure-probability estimate."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import qmc

from .acquisition import AcquisitionOptions, CandidateSet, select_next_bifi, select_next_single
from .bifi_gp import BiDataset, fit_bifi_gp, fit_difference_gp
from .gp_core import HIGH, LOW, Dataset, FitOptions, InvalidArgumentError, fit_gp
from .problems import Problem, make_candidates

log = logging.getLogger(__name__)

MODES = ("single", "bifi", "known_lofi")
PURPOSES = {"init": 0, "candidates": 1, "optimizer": 2, "mc": 3}


class LoopAbortedError(RuntimeError):
    """A model evaluation or fit failed; ``partial`` holds the trace so far."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "single"
    n_init_high: int = 12
    n_init_low: int = 0
    cost_high: float = 1.0
    cost_low: float = 0.2
    budget: float = 80.0
    delta: float = 0.0
    candidate_size: int = 4096
    candidate_method: str = "mc"
    estimate_size: int = 0  # 0: estimate on the acquisition candidates
    estimate_method: str = "grid"
    seed: int = 0
    replication: int = 0
    refit_every: int = 1
    fit_restarts: int = 10
    warm_restarts: int = 3
    acq_restarts: int = 20
    acq_seeds: int = 10
    acq_pool: int = 256
    acq_gradient: str = "analytic"

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_init_high < 2:
            raise InvalidArgumentError("n_init_high must be at least 2")
        if self.n_init_low < 0 or self.candidate_size < 1 or self.refit_every < 1:
            raise InvalidArgumentError("counts must be nonnegative (candidate_size, refit_every >= 1)")
        if not (self.cost_high > 0 and self.cost_low > 0):
            raise InvalidArgumentError("costs must be positive")
        if self.budget < self.initial_cost - 1e-12:
            raise InvalidArgumentError(
                f"budget {self.budget} is below the initial design cost {self.initial_cost}"
            )

    @property
    def initial_cost(self) -> float:
        low = self.n_init_low * self.cost_low if self.mode == "bifi" else 0.0
        return self.n_init_high * self.cost_high + low

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Record:
    iter: int
    fidelity: str
    x: list
    y: float
    cost_total: float
    pa_estimate: float
    benefit: float | None = None
    score: float | None = None


@dataclass
class Trace:
    """Initial design plus one record per adaptive step.

    ``initial`` lists the design evaluations (iter 0, no benefit); ``records``
    holds only adaptive picks.
    """

    config: ExperimentConfig
    problem: str
    initial: list = field(default_factory=list)
    records: list = field(default_factory=list)
    initial_pa: float = math.nan
    surrogate: dict = field(default_factory=dict)

    @property
    def initial_cost(self) -> float:
        return self.initial[-1].cost_total if self.initial else 0.0

    def costs(self) -> np.ndarray:
        return np.array([self.initial_cost] + [r.cost_total for r in self.records])

    def estimates(self) -> np.ndarray:
        return np.array([self.initial_pa] + [r.pa_estimate for r in self.records])

    def n_picks(self, fidelity) -> int:
        return sum(r.fidelity == fidelity for r in self.records)

    def n_evaluations(self, fidelity) -> int:
        return sum(r.fidelity == fidelity for r in self.initial) + self.n_picks(fidelity)

    def all_records(self) -> list:
        return self.initial + self.records


def rng_stream(seed: int, replication: int, purpose: str) -> np.random.Generator:
    """Independent generator per (seed, replication, purpose)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(replication), PURPOSES[purpose]]))


def latin_hypercube(n: int, box, rng) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    if n == 0:
        return np.empty((0, box.shape[0]))
    u = qmc.LatinHypercube(d=box.shape[0], seed=rng).random(n)
    return qmc.scale(u, box[:, 0], box[:, 1])


def estimate_Pa(surrogate, candidates: CandidateSet, delta: float) -> float:
    """Plug-in estimate: candidate weight where the posterior mean is below delta."""
    mean = surrogate.mean(candidates.points, HIGH)
    return float(min(max(candidates.weights @ (mean < delta), 0.0), 1.0))


class _Signed:
    """Wraps a problem so failure is always ``g < delta`` with g = sign * f."""

    def __init__(self, problem: Problem, delta: float):
        self.sign = -1.0 if problem.orientation == "above" else 1.0
        self.delta = self.sign * delta
        self.problem = problem

    def evaluate(self, x, fidelity) -> float:
        f = self.problem.evaluator_high if fidelity == HIGH else self.problem.evaluator_low
        if f is None:
            raise InvalidArgumentError(f"problem {self.problem.name!r} has no {fidelity} evaluator")
        y = float(np.asarray(f(np.asarray(x, dtype=float)[None, :])).reshape(-1)[0])
        if not math.isfinite(y):
            raise FloatingPointError(f"{fidelity}-fidelity model returned {y} at {list(x)}")
        return y

    def known_low(self, X):
        return self.sign * np.asarray(self.problem.evaluator_low(X), dtype=float)


def _acq_options(cfg: ExperimentConfig) -> AcquisitionOptions:
    return AcquisitionOptions(restarts=cfg.acq_restarts, n_seed=cfg.acq_seeds, n_pool=cfg.acq_pool,
                              gradient=cfg.acq_gradient)


def build_candidate_sets(problem: Problem, cfg: ExperimentConfig):
    """Acquisition set and estimation set (the same object unless estimate_size > 0)."""
    rng = rng_stream(cfg.seed, cfg.replication, "candidates")
    acq = make_candidates(problem.distribution, cfg.candidate_size, rng, cfg.candidate_method, problem.domain)
    if cfg.estimate_size <= 0:
        return acq, acq
    est = make_candidates(problem.distribution, cfg.estimate_size, rng, cfg.estimate_method, problem.domain)
    return acq, est


def _surrogate_summary(gp) -> dict:
    out = {"prior_mean": float(gp.prior_mean), "jitter": float(gp.jitter)}
    if hasattr(gp, "low_params"):
        out["low"] = {"amplitude": gp.low_params.amplitude, "lengthscales": gp.low_params.lengthscales.tolist()}
        out["diff"] = {"amplitude": gp.diff_params.amplitude, "lengthscales": gp.diff_params.lengthscales.tolist()}
    else:
        out["amplitude"] = gp.params.amplitude
        out["lengthscales"] = gp.params.lengthscales.tolist()
    return out


def _check_problem(problem: Problem, cfg: ExperimentConfig):
    if cfg.mode in ("bifi", "known_lofi") and problem.evaluator_low is None:
        raise InvalidArgumentError(f"mode {cfg.mode!r} needs a low-fidelity evaluator")


def run_single_fidelity(problem: Problem, config: ExperimentConfig, candidates: CandidateSet | None = None,
        estimation: CandidateSet | None = None) -> Trace:
    """Sample f_h one point at a time until the budget of high-fidelity calls is spent.

    ``known_lofi`` mode models only the difference to a costless, known f_l.
    """
    cfg = config
    if cfg.mode not in ("single", "known_lofi"):
        raise InvalidArgumentError(f"run_single_fidelity cannot run mode {cfg.mode!r}")
    _check_problem(problem, cfg)
    signed = _Signed(problem, cfg.delta)
    rng_init = rng_stream(cfg.seed, cfg.replication, "init")
    rng_opt = rng_stream(cfg.seed, cfg.replication, "optimizer")
    if candidates is None:
        candidates, estimation = build_candidate_sets(problem, cfg)
    estimation = estimation if estimation is not None else candidates
    trace = Trace(cfg, problem.name)
    acq = _acq_options(cfg)
    n_lim = int(math.floor(cfg.budget / cfg.cost_high + 1e-9))

    def fit(data, previous, it):
        seed = int(rng_opt.integers(2**31))
        if previous is not None and it % cfg.refit_every != 0:
            return previous.with_data(_model_data(data))
        warm = None if previous is None else previous.params
        opts = FitOptions(restarts=cfg.fit_restarts if warm is None else cfg.warm_restarts, seed=seed, warm_start=warm)
        if cfg.mode == "known_lofi":
            return fit_difference_gp(data, signed.known_low, opts)
        return fit_gp(data, opts)

    def _model_data(data):
        if cfg.mode == "known_lofi":
            return Dataset(data.inputs, data.outputs - signed.known_low(data.inputs))
        return data

    try:
        X0 = latin_hypercube(cfg.n_init_high, problem.distribution.bounding_box(), rng_init)
        ys = []
        for i, x in enumerate(X0):
            y = signed.evaluate(x, HIGH)
            cost = (i + 1) * cfg.cost_high
            ys.append(y)
            trace.initial.append(Record(0, HIGH, x.tolist(), y, cost, math.nan))
        data = Dataset(X0, signed.sign * np.array(ys))
        gp = fit(data, None, 0)
        pa = estimate_Pa(gp, estimation, signed.delta)
        trace.initial_pa = pa
        for r in trace.initial:
            r.pa_estimate = pa
        n_total = cfg.n_init_high
        it = 0
        while n_total < n_lim:
            it += 1
            x, val = select_next_single(gp, candidates, signed.delta, problem.domain, acq, rng_opt)
            y = signed.evaluate(x, HIGH)
            n_total += 1
            cost = n_total * cfg.cost_high
            data = data.append(x, signed.sign * y)
            gp = fit(data, gp, it)
            pa = estimate_Pa(gp, estimation, signed.delta)
            trace.records.append(Record(it, HIGH, x.tolist(), y, cost, pa, val.benefit, val.score))
        trace.surrogate = _surrogate_summary(gp)
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        if isinstance(exc, InvalidArgumentError) and not trace.initial:
            raise
        raise LoopAbortedError(f"single-fidelity loop aborted: {exc}", trace) from exc
    return trace


def run_bi_fidelity(problem: Problem, config: ExperimentConfig, candidates: CandidateSet | None = None,
        estimation: CandidateSet | None = None) -> Trace:
    """Choose location and fidelity by benefit per cost until the cost budget is reached."""
    cfg = config
    if cfg.mode != "bifi":
        raise InvalidArgumentError(f"run_bi_fidelity cannot run mode {cfg.mode!r}")
    _check_problem(problem, cfg)
    signed = _Signed(problem, cfg.delta)
    rng_init = rng_stream(cfg.seed, cfg.replication, "init")
    rng_opt = rng_stream(cfg.seed, cfg.replication, "optimizer")
    if candidates is None:
        candidates, estimation = build_candidate_sets(problem, cfg)
    estimation = estimation if estimation is not None else candidates
    trace = Trace(cfg, problem.name)
    acq = _acq_options(cfg)

    def fit(data, previous, it):
        seed = int(rng_opt.integers(2**31))
        if previous is not None and it % cfg.refit_every != 0:
            return previous.with_data(data)
        warm = None if previous is None else (previous.low_params, previous.diff_params)
        opts = FitOptions(restarts=cfg.fit_restarts if warm is None else cfg.warm_restarts, seed=seed, warm_start=warm)
        return fit_bifi_gp(data, opts)

    try:
        box = problem.distribution.bounding_box()
        Xh = latin_hypercube(cfg.n_init_high, box, rng_init)
        Xl = latin_hypercube(cfg.n_init_low, box, rng_init)
        # costs come from counts so repeated additions cannot drift
        counts = {HIGH: 0, LOW: 0}

        def spend(fid):
            counts[fid] += 1
            return counts[HIGH] * cfg.cost_high + counts[LOW] * cfg.cost_low

        yh, yl = [], []
        for X, ys, fid in ((Xh, yh, HIGH), (Xl, yl, LOW)):
            for x in X:
                y = signed.evaluate(x, fid)
                cost = spend(fid)
                ys.append(y)
                trace.initial.append(Record(0, fid, x.tolist(), y, cost, math.nan))
        data = BiDataset(Xh, signed.sign * np.array(yh), Xl, signed.sign * np.array(yl, dtype=float))
        gp = fit(data, None, 0)
        pa = estimate_Pa(gp, estimation, signed.delta)
        trace.initial_pa = pa
        for r in trace.initial:
            r.pa_estimate = pa
        cost = trace.initial_cost
        it = 0
        while cost < cfg.budget - 1e-9:
            it += 1
            x, fid, per = select_next_bifi(gp, candidates, signed.delta, problem.domain,
                                           (cfg.cost_high, cfg.cost_low), acq, rng_opt)
            y = signed.evaluate(x, fid)
            cost = spend(fid)
            data = data.append(x, signed.sign * y, fid)
            gp = fit(data, gp, it)
            pa = estimate_Pa(gp, estimation, signed.delta)
            val = per[fid][1]
            trace.records.append(Record(it, fid, x.tolist(), y, cost, pa, val.benefit, val.score))
        trace.surrogate = _surrogate_summary(gp)
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        if isinstance(exc, InvalidArgumentError) and not trace.initial:
            raise
        raise LoopAbortedError(f"bi-fidelity loop aborted: {exc}", trace) from exc
    return trace


def run_experiment(problem: Problem, config: ExperimentConfig, candidates: CandidateSet | None = None,
                   estimation: CandidateSet | None = None) -> Trace:
    if config.mode == "bifi":
        return run_bi_fidelity(problem, config, candidates, estimation)
    return run_single_fidelity(problem, config, candidates, estimation)


# ---------------------------------------------------------------- replications


@dataclass
class ReplicationSummary:
    cost: np.ndarray
    median: np.ndarray
    p15: np.ndarray
    p85: np.ndarray
    truth: float
    tolerance: float
    convergence_cost: float  # both percentiles inside the band
    median_convergence_cost: float
    provenance: dict = field(default_factory=dict)

    def rows(self):
        return zip(self.cost, self.p15, self.median, self.p85)


def _first_inside(cost, lo_curve, hi_curve, lo, hi) -> float:
    inside = (lo_curve >= lo) & (hi_curve <= hi)
    idx = np.flatnonzero(inside)
    return float(cost[idx[0]]) if idx.size else math.inf


def step_interpolate(costs, values, grid) -> np.ndarray:
    """Value of the last arrival at or before each grid cost (nan before the first)."""
    costs = np.asarray(costs, dtype=float)
    idx = np.searchsorted(costs, np.asarray(grid, dtype=float) + 1e-9, side="right") - 1
    out = np.asarray(values, dtype=float)[np.clip(idx, 0, None)]
    return np.where(idx >= 0, out, np.nan)


def summarize_replications(traces, truth: float, bounds: float = 0.05, provenance: dict | None = None) -> ReplicationSummary:
    """Median and 15/85 percentiles of the estimate on a common cost axis.

    ``traces`` are Trace objects or ``(costs, estimates)`` pairs.  The grid
    runs from the latest starting cost to the largest final cost in steps of
    the smallest cost increment seen.
    """
    if not traces:
        raise InvalidArgumentError("no traces to summarize")
    pairs = []
    for t in traces:
        c, e = (t.costs(), t.estimates()) if isinstance(t, Trace) else (np.asarray(t[0], float), np.asarray(t[1], float))
        pairs.append((c, e))
    incs = [np.diff(c) for c, _ in pairs]
    incs = np.concatenate([i[i > 1e-12] for i in incs]) if any(i.size for i in incs) else np.array([])
    step = float(incs.min()) if incs.size else 1.0
    start = max(c[0] for c, _ in pairs)
    end = max(c[-1] for c, _ in pairs)
    n = int(math.floor((end - start) / step + 1e-9)) + 1
    grid = start + step * np.arange(n)
    M = np.vstack([step_interpolate(c, e, grid) for c, e in pairs])
    p15, med, p85 = np.percentile(M, [15, 50, 85], axis=0)
    lo, hi = truth * (1 - bounds), truth * (1 + bounds)
    return ReplicationSummary(
        cost=grid, median=med, p15=p15, p85=p85, truth=float(truth), tolerance=float(bounds),
        convergence_cost=_first_inside(grid, p15, p85, lo, hi),
        median_convergence_cost=_first_inside(grid, med, med, lo, hi),
        provenance=dict(provenance or {}),
    )


def replication_config(base: ExperimentConfig, index: int) -> ExperimentConfig:
    """Seed of replication i is ``seed XOR i``."""
    return replace(base, seed=base.seed ^ index, replication=index)
