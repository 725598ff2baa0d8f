"""Problem zoo: IDM cut-in dynamics, analytic benchmarks, input distributions."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .acquisition import CandidateSet
from .gp_core import InvalidArgumentError

log = logging.getLogger(__name__)

MAX_TRUTH_RESOLUTION = 10**7


class IngestionError(ValueError):
    """Empirical distribution file could not be parsed."""


# ---------------------------------------------------------------- IDM cut-in


@dataclass(frozen=True)
class IdmParams:
    alpha: float = 2.0  # max acceleration, m/s^2
    beta: float = 18.0  # desired speed, m/s
    exponent: float = 4.0
    s0: float = 2.0  # jam distance, m
    vehicle_length: float = 4.0
    b: float = 3.0  # comfortable deceleration, m/s^2
    headway: float = 1.0  # s
    dt: float = 0.2
    u_bv: float = 20.0
    horizon: float = 10.0
    u_min: float = 2.0
    u_max: float = 40.0
    a_min: float = -4.0
    a_max: float = 2.0

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidArgumentError("dt must be positive")
        if self.horizon / self.dt < 1 - 1e-12:
            raise InvalidArgumentError("horizon must cover at least one step")
        if not self.u_min < self.u_max:
            raise InvalidArgumentError("u_min must be below u_max")
        if not self.a_min < self.a_max:
            raise InvalidArgumentError("a_min must be below a_max")

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.horizon / self.dt + 1e-9))


@dataclass(frozen=True)
class ScenarioInput:
    r0: float
    rdot0: float

    def check(self, params: IdmParams):
        if not self.r0 > params.vehicle_length:
            raise InvalidArgumentError(
                f"initial range {self.r0} must exceed the vehicle length {params.vehicle_length}"
            )


def _idm_acceleration(p: IdmParams, u, R, Rdot):
    s = p.s0 + u * p.headway + u * Rdot / (2.0 * math.sqrt(p.alpha * p.b))
    gap = R - p.vehicle_length
    with np.errstate(divide="ignore", invalid="ignore"):
        a = p.alpha * (1.0 - (u / p.beta) ** p.exponent - (s / gap) ** 2)
    # overlapping vehicles: brake as hard as allowed
    a = np.where(gap > 0, a, p.a_min)
    return np.clip(a, p.a_min, p.a_max)


def idm_trajectory(params: IdmParams, r0, rdot0) -> dict:
    """Full forward-Euler trajectory; arrays have shape (n_steps + 1, *batch).

    ``accel[k]`` is the clamped acceleration applied over step k, so it has
    one fewer entry than the state arrays.
    """
    p = params
    r0 = np.asarray(r0, dtype=float)
    rdot0 = np.asarray(rdot0, dtype=float)
    u = p.u_bv - rdot0
    if np.any((u < p.u_min) | (u > p.u_max)):
        log.info("initial CAV speed outside [%g, %g]; clamped", p.u_min, p.u_max)
    u = np.clip(u, p.u_min, p.u_max)
    R = r0 + 0.0 * u
    Rdot = p.u_bv - u
    Rs, Rdots, us, accs = [R], [Rdot], [u], []
    for _ in range(p.n_steps):
        a = _idm_acceleration(p, u, R, Rdot)
        R = R + Rdot * p.dt
        u = np.clip(u + a * p.dt, p.u_min, p.u_max)
        Rdot = p.u_bv - u
        Rs.append(R)
        Rdots.append(Rdot)
        us.append(u)
        accs.append(a)
    return {
        "t": np.arange(p.n_steps + 1) * p.dt,
        "range": np.array(Rs),
        "range_rate": np.array(Rdots),
        "speed": np.array(us),
        "accel": np.array(accs),
    }


def idm_min_range_batch(params: IdmParams, r0, rdot0) -> np.ndarray:
    """Vectorized minimum range over the horizon (t = 0 included)."""
    p = params
    r0 = np.asarray(r0, dtype=float)
    rdot0 = np.asarray(rdot0, dtype=float)
    u = np.clip(p.u_bv - rdot0, p.u_min, p.u_max)
    R = r0 + 0.0 * u
    Rdot = p.u_bv - u
    Rmin = R.copy()
    for _ in range(p.n_steps):
        a = _idm_acceleration(p, u, R, Rdot)
        R = R + Rdot * p.dt
        u = np.clip(u + a * p.dt, p.u_min, p.u_max)
        Rdot = p.u_bv - u
        Rmin = np.minimum(Rmin, R)
    return Rmin


def idm_min_range(params: IdmParams, scenario: ScenarioInput) -> float:
    scenario.check(params)
    return float(idm_min_range_batch(params, scenario.r0, scenario.rdot0))


def idm_evaluator(dt: float, **overrides) -> Callable:
    params = IdmParams(dt=dt, **overrides)

    def f(x):
        x = np.asarray(x, dtype=float)
        return idm_min_range_batch(params, x[..., 0], x[..., 1])

    f.params = params
    return f


def idm_cost(dt: float) -> float:
    """Cost relative to the dt = 0.2 model (linear in the number of steps)."""
    return 0.2 / dt


# ---------------------------------------------------------------- benchmarks


def multimodal(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return ((1.5 + x1) ** 2 + 4.0) * (1.5 + x2) / 20.0 - np.sin((7.5 + 5.0 * x1) / 2.0) - 2.0


def four_branch(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    r2 = math.sqrt(2.0)
    branches = np.stack([
        3.0 + 0.1 * (x1 - x2) ** 2 + (x1 + x2) / r2,
        3.0 + 0.1 * (x1 - x2) ** 2 - (x1 + x2) / r2,
        (x1 - x2) + 6.0 / r2,
        (x2 - x1) + 6.0 / r2,
    ])
    return -branches.min(axis=0)


# ---------------------------------------------------------------- distributions


@dataclass(frozen=True)
class StandardGaussian:
    dim: int = 2
    box_sigmas: float = 4.0

    def sample(self, n, rng) -> np.ndarray:
        return rng.standard_normal((n, self.dim))

    def bounding_box(self) -> np.ndarray:
        return np.array([[-self.box_sigmas, self.box_sigmas]] * self.dim)

    def cell_mass(self, j, edges) -> np.ndarray:
        return np.diff(stats.norm.cdf(edges))

    def to_dict(self) -> dict:
        return {"kind": "standard_gaussian", "dim": self.dim}


@dataclass(frozen=True)
class TruncatedGaussian:
    """Independent per-dimension normals truncated to ``[low, high]``."""

    means: tuple
    sds: tuple
    lows: tuple
    highs: tuple

    def __post_init__(self):
        for name in ("means", "sds", "lows", "highs"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not (len(self.means) == len(self.sds) == len(self.lows) == len(self.highs)):
            raise InvalidArgumentError("truncated Gaussian parameters differ in length")
        if any(not lo < hi for lo, hi in zip(self.lows, self.highs)):
            raise InvalidArgumentError("truncation bounds need low < high")
        if any(not s > 0 for s in self.sds):
            raise InvalidArgumentError("standard deviations must be positive")

    @property
    def dim(self) -> int:
        return len(self.means)

    def _marginal(self, j):
        m, s = self.means[j], self.sds[j]
        return stats.truncnorm((self.lows[j] - m) / s, (self.highs[j] - m) / s, loc=m, scale=s)

    def sample(self, n, rng) -> np.ndarray:
        u = rng.random((n, self.dim))
        return np.column_stack([self._marginal(j).ppf(u[:, j]) for j in range(self.dim)])

    def bounding_box(self) -> np.ndarray:
        return np.column_stack([self.lows, self.highs])

    def cell_mass(self, j, edges) -> np.ndarray:
        return np.diff(self._marginal(j).cdf(edges))

    def to_dict(self) -> dict:
        return {"kind": "truncated_gaussian", "means": list(self.means), "sds": list(self.sds),
                "lows": list(self.lows), "highs": list(self.highs)}


@dataclass(frozen=True)
class EmpiricalDistribution:
    points: np.ndarray
    weights: np.ndarray
    source: str = ""

    def __post_init__(self):
        P = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if P.ndim != 2 or P.shape[0] != w.shape[0] or P.shape[0] == 0:
            raise InvalidArgumentError("empirical points and weights disagree")
        if np.any(w < 0) or not w.sum() > 0:
            raise InvalidArgumentError("empirical weights must be nonnegative with positive sum")
        object.__setattr__(self, "points", P)
        object.__setattr__(self, "weights", w / w.sum())

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def sample(self, n, rng) -> np.ndarray:
        idx = rng.choice(self.points.shape[0], size=n, p=self.weights)
        return self.points[idx]

    def bounding_box(self) -> np.ndarray:
        return np.column_stack([self.points.min(0), self.points.max(0)])

    def to_dict(self) -> dict:
        return {"kind": "empirical", "path": self.source}


def load_empirical_csv(path) -> EmpiricalDistribution:
    """Read ``x1,...,xd[,weight]`` rows; weights default to uniform."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"{path}: cannot open ({exc})") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        has_weight = header[-1].lower() == "weight"
        xcols = header[:-1] if has_weight else header
        if not xcols or any(c != f"x{i + 1}" for i, c in enumerate(xcols)):
            raise IngestionError(f"{path}: row 1: header must be x1,...,xd[,weight], got {header}")
        pts, ws = [], []
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {rowno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise IngestionError(f"{path}: row {rowno}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise IngestionError(f"{path}: row {rowno}: non-finite value")
            if has_weight and vals[-1] < 0:
                raise IngestionError(f"{path}: row {rowno}: negative weight")
            pts.append(vals[: len(xcols)])
            ws.append(vals[-1] if has_weight else 1.0)
    if not pts:
        raise IngestionError(f"{path}: no data rows")
    if sum(ws) <= 0:
        raise IngestionError(f"{path}: weights sum to zero")
    return EmpiricalDistribution(np.array(pts), np.array(ws), str(path))


def distribution_sample(dist, n: int, rng) -> np.ndarray:
    if n < 1:
        raise InvalidArgumentError("need at least one sample")
    return dist.sample(n, rng)


# ---------------------------------------------------------------- problems


@dataclass
class Problem:
    name: str
    evaluator_high: Callable
    distribution: object
    domain: np.ndarray
    delta: float = 0.0
    cost_high: float = 1.0
    evaluator_low: Optional[Callable] = None
    cost_low: Optional[float] = None
    orientation: str = "below"  # failure is f < delta ("below") or f > delta ("above")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.domain = np.asarray(self.domain, dtype=float)
        if self.orientation not in ("below", "above"):
            raise InvalidArgumentError(f"unknown orientation {self.orientation!r}")
        if not self.cost_high > 0 or (self.cost_low is not None and not self.cost_low > 0):
            raise InvalidArgumentError("costs must be positive")

    @property
    def dim(self) -> int:
        return self.domain.shape[0]

    def failed(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return values < self.delta if self.orientation == "below" else values > self.delta


def four_branch_problem(delta: float = 0.0, distribution=None) -> Problem:
    return Problem("four_branch", four_branch, distribution or StandardGaussian(2), [[-5, 5], [-5, 5]],
                   delta=delta, orientation="above")


def multimodal_problem(delta: float = 0.0, distribution=None) -> Problem:
    return Problem("multimodal", multimodal, distribution or StandardGaussian(2), [[-5, 5], [-5, 5]],
                   delta=delta, orientation="above")


# artifact choice standing in for the naturalistic-driving distribution
CUTIN_DISTRIBUTION = TruncatedGaussian(means=(35.0, -1.0), sds=(15.0, 4.0),
                                       lows=(5.0, -20.0), highs=(90.0, 10.0))


def cutin_problem(dt_high: float = 0.2, dt_low: float | None = 1.0, delta: float = 0.0,
                  distribution=None) -> Problem:
    dist = distribution or CUTIN_DISTRIBUTION
    box = dist.bounding_box()
    return Problem(
        "cutin",
        idm_evaluator(dt_high),
        dist,
        box,
        delta=delta,
        cost_high=idm_cost(dt_high) / idm_cost(dt_high),
        evaluator_low=idm_evaluator(dt_low) if dt_low else None,
        cost_low=idm_cost(dt_low) / idm_cost(dt_high) if dt_low else None,
        orientation="below",
        meta={"dt_high": dt_high, "dt_low": dt_low},
    )


PROBLEMS = {
    "four_branch": four_branch_problem,
    "multimodal": multimodal_problem,
    "cutin": cutin_problem,
}


def make_problem(name: str, **overrides) -> Problem:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**overrides)


# ---------------------------------------------------------------- integration


def grid_candidates(dist, per_dim: int, domain=None) -> CandidateSet:
    """Midpoint tensor grid with exact cell probabilities as weights (renormalized)."""
    box = np.asarray(domain if domain is not None else dist.bounding_box(), dtype=float)
    mids, masses = [], []
    for j in range(box.shape[0]):
        edges = np.linspace(box[j, 0], box[j, 1], per_dim + 1)
        mids.append(0.5 * (edges[:-1] + edges[1:]))
        masses.append(dist.cell_mass(j, edges))
    grids = np.meshgrid(*mids, indexing="ij")
    P = np.column_stack([g.reshape(-1) for g in grids])
    W = masses[0]
    for m in masses[1:]:
        W = np.multiply.outer(W, m)
    W = W.reshape(-1)
    keep = W > 0
    return CandidateSet.from_weights(P[keep], W[keep])


def make_candidates(dist, size: int, rng, method: str = "mc", domain=None) -> CandidateSet:
    if isinstance(dist, EmpiricalDistribution) and (method == "grid" or size >= dist.points.shape[0]):
        return CandidateSet.from_weights(dist.points, dist.weights)
    if method == "mc":
        return CandidateSet.uniform(distribution_sample(dist, size, rng))
    if method == "grid":
        per_dim = max(int(round(size ** (1.0 / dist.dim))), 2)
        return grid_candidates(dist, per_dim, domain)
    raise InvalidArgumentError(f"unknown candidate method {method!r}")


def _grid_probability(problem: Problem, per_dim: int, chunk: int = 1_000_000) -> float:
    cs = grid_candidates(problem.distribution, per_dim, problem.domain)
    total = 0.0
    for s in range(0, cs.size, chunk):
        f = problem.evaluator_high(cs.points[s:s + chunk])
        total += float(cs.weights[s:s + chunk] @ problem.failed(f))
    # cell masses were renormalized; undo so mass outside the box counts as safe
    mass = 1.0
    box = problem.domain
    dist = problem.distribution
    if not isinstance(dist, EmpiricalDistribution):
        mass = float(np.prod([dist.cell_mass(j, np.array(box[j])).sum() for j in range(box.shape[0])]))
    return total * mass


def ground_truth_Pa(problem: Problem, method: str = "mc", resolution: int = 10**6, seed: int = 0,
                    chunk: int = 1_000_000):
    """Reference failure probability with an error estimate.

    ``mc``: plain Monte Carlo with ``resolution`` draws; error is the binomial
    standard error.  ``grid``: tensor quadrature with ``resolution`` points
    per dimension; error is the change from halving the resolution.
    Empirical distributions are summed exactly over their atoms.
    """
    dist = problem.distribution
    if method == "mc":
        if resolution > MAX_TRUTH_RESOLUTION:
            raise InvalidArgumentError(f"resolution {resolution} exceeds {MAX_TRUTH_RESOLUTION}")
        rng = np.random.default_rng(seed)
        hits = 0
        for s in range(0, resolution, chunk):
            n = min(chunk, resolution - s)
            hits += int(np.count_nonzero(problem.failed(problem.evaluator_high(distribution_sample(dist, n, rng)))))
        p = hits / resolution
        return p, math.sqrt(max(p * (1 - p), 0.0) / resolution)
    if method == "grid":
        if isinstance(dist, EmpiricalDistribution):
            f = problem.evaluator_high(dist.points)
            return float(dist.weights @ problem.failed(f)), 0.0
        if resolution ** problem.dim > MAX_TRUTH_RESOLUTION:
            raise InvalidArgumentError(
                f"grid of {resolution}^{problem.dim} points exceeds {MAX_TRUTH_RESOLUTION}"
            )
        p = _grid_probability(problem, resolution, chunk)
        coarse = _grid_probability(problem, max(resolution // 2, 2), chunk)
        return p, abs(p - coarse)
    raise InvalidArgumentError(f"unknown method {method!r}")
