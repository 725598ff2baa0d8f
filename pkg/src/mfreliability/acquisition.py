"""Variance-reduction acquisition for failure-probability estimation.

``U`` integrates the standard deviation of the (Bernoulli) failure indicator
over the input distribution; the benefit of a hypothetical sample is the
drop in ``U`` it causes.  A hypothetical sample takes the current posterior
mean as its value, so it only shrinks variances and never moves means.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .gp_core import HIGH, LOW, FIDELITIES, InvalidArgumentError

log = logging.getLogger(__name__)



class DegeneratePointError(ValueError):
    """Indicator is undefined: zero predictive spread exactly at the threshold."""


class AlreadyResolvedError(ValueError):
    """Hypothetical location already has (numerically) zero posterior variance."""


@dataclass(frozen=True)
class CandidateSet:
    """Weighted point cloud standing in for integrals against p_x."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.points, dtype=float)
        if P.ndim == 1:
            P = P[:, None]
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if P.shape[0] < 1 or P.shape[0] != w.shape[0]:
            raise InvalidArgumentError("candidate points and weights disagree in length or are empty")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidArgumentError("candidate weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError(f"candidate weights sum to {w.sum()!r}, not 1")
        P, w = P.copy(), w.copy()
        P.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", P)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "CandidateSet":
        P = np.asarray(points, dtype=float)
        n = P.shape[0]
        return cls(P, np.full(n, 1.0 / n))

    @classmethod
    def from_weights(cls, points, raw_weights) -> "CandidateSet":
        w = np.asarray(raw_weights, dtype=float)
        w = w / w.sum()
        # renormalize twice: one pass can leave ~1e-16 * n of drift
        return cls(points, w / w.sum())

    @property
    def size(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class HypotheticalSample:
    location: np.ndarray
    fidelity: str
    value: float


@dataclass(frozen=True)
class AcquisitionValue:
    benefit: float
    cost: float
    score: float

    @classmethod
    def of(cls, benefit: float, cost: float = 1.0) -> "AcquisitionValue":
        if not cost > 0:
            raise InvalidArgumentError("cost must be positive")
        return cls(float(benefit), float(cost), float(benefit) / float(cost))


def normal_cdf(r: float) -> float:
    return float(special.ndtr(r))


def indicator_variance(mean: float, std: float, delta: float) -> float:
    """Variance ``(1 - Phi(r)) Phi(r)`` of the failure indicator, ``r = (mean - delta) / std``."""
    if std < 0:
        raise InvalidArgumentError("std must be nonnegative")
    if std == 0:
        if mean == delta:
            raise DegeneratePointError("indicator undefined at the threshold with zero spread")
        return 0.0
    r = (mean - delta) / std
    return math.exp(float(special.log_ndtr(r) + special.log_ndtr(-r)))


def indicator_std(mean, var, delta) -> np.ndarray:
    """Vectorized ``sqrt(indicator_variance)``; zero-variance entries contribute 0."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    pos = var > 0
    r = (mean - delta) / np.sqrt(np.where(pos, var, 1.0))
    # log space keeps the deep tails from underflowing to exactly 0
    h = np.exp(0.5 * (special.log_ndtr(r) + special.log_ndtr(-r)))
    return np.where(pos, h, 0.0)


def _indicator_std_dvar(mean, var, delta):
    """``h = sqrt(Phi(r)Phi(-r))`` and ``dh/dvar``; both 0 where var is ~0."""
    pos = var > 1e-300
    v = np.where(pos, var, 1.0)
    r = (mean - delta) / np.sqrt(v)
    lp, lm = special.log_ndtr(r), special.log_ndtr(-r)
    h = np.exp(0.5 * (lp + lm))
    log_phi = -0.5 * r * r - 0.5 * math.log(2 * math.pi)
    ratio = np.exp(log_phi - 0.5 * (lp + lm))
    dh_dr = 0.5 * ratio * (np.exp(lm) - np.exp(lp))
    dh_dv = dh_dr * (-r / (2.0 * v))
    return np.where(pos, h, 0.0), np.where(pos, dh_dv, 0.0)


def make_hypothetical(surrogate, x, fidelity=HIGH) -> HypotheticalSample:
    x = np.asarray(x, dtype=float).reshape(-1)
    value = float(surrogate.mean(x[None, :], fidelity)[0])
    return HypotheticalSample(x, fidelity, value)


def _guard_level(core, prior, guard_rel):
    # variance below the diagonal jitter is numerically the same as a sample
    return np.maximum(guard_rel * prior, getattr(core, "jitter", 0.0))


def _guarded_var(core, x, fidelity, guard_rel):
    s = float(core.var(x[None, :], fidelity)[0])
    prior = float(core.k_diag(x[None, :], fidelity)[0])
    if s <= _guard_level(core, prior, guard_rel):
        raise AlreadyResolvedError(
            f"posterior variance {s:.3e} at {x.tolist()} ({fidelity}) is below the guard"
        )
    return s


def hypothetical_update(surrogate, z: HypotheticalSample, query, guard_rel: float = 1e-10):
    """Moments of ``f_h(query)`` after conditioning on ``z``; returns (means, variances).

    The mean is unchanged because ``z.value`` is the current posterior mean.
    """
    core = surrogate.gaussian_core()
    q = np.asarray(query, dtype=float)
    single = q.ndim == 1
    q = q.reshape(-1, core.dim)
    x = np.asarray(z.location, dtype=float).reshape(-1)
    s = _guarded_var(core, x, z.fidelity, guard_rel)
    c = core.cov(q, x[None, :], HIGH, z.fidelity)[:, 0]
    mean = surrogate.mean(q, HIGH)
    var = np.maximum(core.var(q, HIGH) - c * c / s, 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def uncertainty_U(surrogate, candidates: CandidateSet, delta: float, z: HypotheticalSample | None = None) -> float:
    """Discretized integral of the failure-indicator std against the candidate weights."""
    if z is None:
        mean = surrogate.mean(candidates.points, HIGH)
        var = surrogate.gaussian_core().var(candidates.points, HIGH)
    else:
        mean, var = hypothetical_update(surrogate, z, candidates.points)
    return float(candidates.weights @ indicator_std(mean, var, delta))


def benefit(surrogate, candidates: CandidateSet, delta: float, x, fidelity=HIGH,
            cost: float = 1.0) -> AcquisitionValue:
    """Drop in U from a hypothetical sample at ``x``.

    A location whose variance is already below the guard (for instance an
    existing sample) cannot reduce anything and gets benefit 0.
    """
    z = make_hypothetical(surrogate, x, fidelity)
    try:
        u_new = uncertainty_U(surrogate, candidates, delta, z)
    except AlreadyResolvedError:
        return AcquisitionValue.of(0.0, cost)
    b = uncertainty_U(surrogate, candidates, delta) - u_new
    return AcquisitionValue.of(max(b, 0.0), cost)


class BenefitEvaluator:
    """Benefit of hypothetical samples with the candidate-side work done once.

    For a fitted surrogate the candidate means, variances and whitened
    training covariances are fixed, so each benefit evaluation is a couple of
    matrix-vector products.
    """

    def __init__(self, surrogate, candidates: CandidateSet, delta: float, guard_rel: float = 1e-10,
                 prune_rel: float = 1e-6):
        core = surrogate.gaussian_core()
        self.surrogate = surrogate
        self.core = core
        self.candidates = candidates
        self.delta = float(delta)
        self.guard_rel = guard_rel
        Xq = candidates.points
        self.mean_q = surrogate.mean(Xq, HIGH)
        W = core.whiten(core.k_train(Xq, HIGH))
        self.var_q = np.maximum(core.k_diag(Xq, HIGH) - np.sum(W * W, axis=0), 0.0)
        self.std_ind = indicator_std(self.mean_q, self.var_q, self.delta)
        mass = candidates.weights * self.std_ind
        self.u0 = float(mass.sum())
        # Every candidate's benefit term lies in [0, w * std], so dropping the
        # smallest terms with total mass <= prune_rel * u0 bounds the error.
        order = np.argsort(mass, kind="stable")
        dropped = np.cumsum(mass[order]) <= prune_rel * self.u0
        active = np.sort(order[~dropped])
        self.active = active
        self.Xa = Xq[active]
        self.wa = candidates.weights[active]
        self.mean_a = self.mean_q[active]
        self.var_a = self.var_q[active]
        self.W = W[:, active]
        self.u0_active = float(mass[active].sum())

    def values(self, X, fidelity=HIGH, chunk: int = 256) -> np.ndarray:
        """Benefits at each row of X (0 where the guard fails)."""
        X = np.asarray(X, dtype=float).reshape(-1, self.core.dim)
        out = np.empty(X.shape[0])
        w = self.wa
        for start in range(0, X.shape[0], chunk):
            Xc = X[start:start + chunk]
            V = self.core.whiten(self.core.k_train(Xc, fidelity))
            prior = self.core.k_diag(Xc, fidelity)
            s = prior - np.sum(V * V, axis=0)
            ok = s > _guard_level(self.core, prior, self.guard_rel)
            s_safe = np.where(ok, s, 1.0)
            C = self.core.k_prior(self.Xa, HIGH, Xc, fidelity) - self.W.T @ V
            newv = np.maximum(self.var_a[:, None] - C * C / s_safe[None, :], 0.0)
            u = w @ indicator_std(self.mean_a[:, None], newv, self.delta)
            out[start:start + chunk] = np.where(ok, np.maximum(self.u0_active - u, 0.0), 0.0)
        return out

    def value_and_grad(self, x, fidelity=HIGH):
        x = np.asarray(x, dtype=float).reshape(-1)
        core = self.core
        kt = core.k_train(x[None, :], fidelity)[:, 0]
        gk = core.k_train_grad(x, fidelity)
        v = core.whiten(kt)
        gv = core.whiten(gk)
        prior = float(core.k_diag(x[None, :], fidelity)[0])
        s = prior - v @ v
        if s <= _guard_level(core, prior, self.guard_rel):
            return 0.0, np.zeros_like(x)
        ds = -2.0 * gv.T @ v
        Xq = self.Xa
        c = core.k_prior(Xq, HIGH, x[None, :], fidelity)[:, 0] - self.W.T @ v
        dc = core.k_prior_grad(Xq, HIGH, x, fidelity) - self.W.T @ gv
        newv = self.var_a - c * c / s
        dnewv = -2.0 * c[:, None] * dc / s + (c * c / (s * s))[:, None] * ds[None, :]
        clipped = newv <= 0
        newv = np.where(clipped, 0.0, newv)
        h, dh = _indicator_std_dvar(self.mean_a, newv, self.delta)
        dh = np.where(clipped, 0.0, dh)
        w = self.wa
        b = self.u0_active - float(w @ h)
        grad = -(w * dh) @ dnewv
        return b, grad

    def value(self, x, fidelity=HIGH) -> float:
        return float(self.values(np.asarray(x, dtype=float)[None, :], fidelity)[0])


@dataclass
class AcquisitionOptions:
    restarts: int = 20
    n_seed: int = 10
    n_pool: int = 256
    n_random_pool: int = 64
    maxiter: int = 200
    gradient: str = "analytic"
    fd_step_rel: float = 1e-6
    guard_rel: float = 1e-10


def _numerical_grad(fun, x, steps):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = steps[j]
        g[j] = (fun(x + e) - fun(x - e)) / (2 * steps[j])
    return g


def maximize_benefit(evaluator: BenefitEvaluator, fidelity, domain, opts: AcquisitionOptions, rng):
    """Multi-start L-BFGS-B maximization of the benefit over a box.

    Starts are the best ``n_seed`` points of a screening pool (high
    indicator-std candidates plus uniform draws) and random uniform points.
    Returns ``(x, benefit)``; benefit 0 means nothing useful was found.
    """
    domain = np.asarray(domain, dtype=float)
    lo, hi = domain[:, 0], domain[:, 1]
    d = lo.size
    P = evaluator.Xa
    inside = np.all((P >= lo) & (P <= hi), axis=1)
    idx = np.flatnonzero(inside)
    order = idx[np.argsort(-evaluator.std_ind[evaluator.active][idx], kind="stable")][: opts.n_pool]
    pool = np.vstack([P[order], rng.uniform(lo, hi, size=(opts.n_random_pool, d))])
    pool_vals = evaluator.values(pool, fidelity)
    n_seed = min(opts.n_seed, opts.restarts)
    best_pool = np.argsort(-pool_vals, kind="stable")[:n_seed]
    starts = [pool[i] for i in best_pool if pool_vals[i] > 0]
    n_rand = opts.restarts - len(starts)
    if n_rand > 0:
        starts.extend(rng.uniform(lo, hi, size=(n_rand, d)))

    if opts.gradient == "analytic":
        def neg(x):
            b, g = evaluator.value_and_grad(x, fidelity)
            return -b, -g
    else:
        steps = opts.fd_step_rel * (hi - lo)

        def f(x):
            return evaluator.value_and_grad(x, fidelity)[0]

        def neg(x):
            return -f(x), -_numerical_grad(f, np.clip(x, lo, hi), steps)

    best_x, best_b = None, -math.inf
    if pool_vals.size:
        i = int(np.argmax(pool_vals))
        best_x, best_b = pool[i].copy(), float(pool_vals[i])
    for x0 in starts:
        res = optimize.minimize(neg, np.asarray(x0, dtype=float), jac=True, method="L-BFGS-B",
                                bounds=list(zip(lo, hi)), options={"maxiter": opts.maxiter})
        x = np.clip(np.asarray(res.x, dtype=float), lo, hi)
        b = evaluator.value(x, fidelity)
        if b > best_b:
            best_x, best_b = x, b
    return best_x, max(best_b, 0.0)


def _exploration_fallback(evaluator: BenefitEvaluator, domain):
    domain = np.asarray(domain, dtype=float)
    P = evaluator.candidates.points
    inside = np.all((P >= domain[:, 0]) & (P <= domain[:, 1]), axis=1)
    var = np.where(inside, evaluator.var_q, -np.inf)
    return P[int(np.argmax(var))].copy()


def select_next_single(surrogate, candidates, delta, domain, opts: AcquisitionOptions | None = None,
                       rng=None, evaluator: BenefitEvaluator | None = None):
    """Next high-fidelity sample location; returns ``(x, AcquisitionValue)``."""
    opts = opts or AcquisitionOptions()
    rng = rng if rng is not None else np.random.default_rng(0)
    evaluator = evaluator or BenefitEvaluator(surrogate, candidates, delta, opts.guard_rel)
    x, b = maximize_benefit(evaluator, HIGH, domain, opts, rng)
    if not b > 0:
        x = _exploration_fallback(evaluator, domain)
        log.info("zero benefit everywhere; falling back to max-variance candidate %s", x.tolist())
    return x, AcquisitionValue.of(b, 1.0)


def choose_fidelity(values: dict, tie_tol: float = 1e-12) -> str:
    """Stage two: the fidelity with the larger benefit-per-cost; ties go to high."""
    sh, sl = values[HIGH].score, values[LOW].score
    if sl > sh + tie_tol:
        return LOW
    return HIGH


def select_next_bifi(surrogate, candidates, delta, domain, costs, opts: AcquisitionOptions | None = None,
                     rng=None):
    """Location and fidelity maximizing benefit per cost.

    Returns ``(x, fidelity, {fidelity: (x_i, AcquisitionValue)})``.
    """
    c_h, c_l = costs
    if not (c_h > 0 and c_l > 0):
        raise InvalidArgumentError("costs must be positive")
    opts = opts or AcquisitionOptions()
    rng = rng if rng is not None else np.random.default_rng(0)
    evaluator = BenefitEvaluator(surrogate, candidates, delta, opts.guard_rel)
    per = {}
    for fid, c in ((HIGH, c_h), (LOW, c_l)):
        x, b = maximize_benefit(evaluator, fid, domain, opts, rng)
        per[fid] = (x, AcquisitionValue.of(b, c))
    values = {f: v for f, (_, v) in per.items()}
    if values[HIGH].benefit <= 0 and values[LOW].benefit <= 0:
        x = _exploration_fallback(evaluator, domain)
        log.info("zero benefit for both fidelities; sampling high fidelity at %s", x.tolist())
        per[HIGH] = (x, values[HIGH])
        return x, HIGH, per
    fid = choose_fidelity(values)
    return per[fid][0], fid, per


def gaussian_kl(mu1: float, s1: float, mu2: float, s2: float) -> float:
    """KL of ``N(mu2, s2^2)`` from ``N(mu1, s1^2)`` (updated vs current estimate)."""
    if not (s1 > 0 and s2 > 0):
        raise InvalidArgumentError("standard deviations must be positive")
    return math.log(s1 / s2) + s2 * s2 / (2 * s1 * s1) + (mu2 - mu1) ** 2 / (2 * s1 * s1) - 0.5


def gaussian_kl_mean_free(s1: float, s2: float) -> float:
    """KL with the mean-shift term dropped; decreasing in s2 on (0, s1)."""
    if not (s1 > 0 and s2 > 0):
        raise InvalidArgumentError("standard deviations must be positive")
    return math.log(s1 / s2) + s2 * s2 / (2 * s1 * s1) - 0.5


def mc_estimate_variance(surrogate, candidates: CandidateSet, delta: float, n_draws: int, rng,
                         orientation: str = "below"):
    """Monte Carlo variance of the failure probability over joint posterior draws.

    Draws ``f_h`` jointly on the candidate points and evaluates the weighted
    indicator sum per draw.  Returns ``(variance, standard_error)``.  Meant
    for small candidate sets; the covariance is dense.
    """
    P = candidates.points
    core = surrogate.gaussian_core()
    mean = surrogate.mean(P, HIGH)
    C = core.cov(P, P, HIGH, HIGH)
    C = 0.5 * (C + C.T)
    evals, evecs = np.linalg.eigh(C)
    A = evecs * np.sqrt(np.clip(evals, 0.0, None))
    draws = mean[None, :] + rng.standard_normal((n_draws, P.shape[0])) @ A.T
    fail = draws < delta if orientation == "below" else draws > delta
    pa = fail.astype(float) @ candidates.weights
    dev = pa - pa.mean()
    var = float(np.mean(dev**2)) * n_draws / (n_draws - 1)
    m4 = float(np.mean(dev**4))
    se = math.sqrt(max(m4 - var * var, 0.0) / n_draws)
    return var, se
