"""Single-fidelity Gaussian-process regression with an RBF kernel.

Noise-free GP with a constant prior mean, fitted by maximizing the log
marginal likelihood over log-scaled hyperparameters.  The conditioning
machinery lives in :class:`ConditionedGaussian` so the bi-fidelity model
and the acquisition code can share it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.stats import qmc

HIGH = "high"
LOW = "low"
FIDELITIES = (HIGH, LOW)

LOG_2PI = math.log(2.0 * math.pi)


class InvalidArgumentError(ValueError):
    """Bad shapes, dimensions or parameter values."""


class FactorizationError(RuntimeError):
    """Kernel matrix could not be Cholesky-factorized."""


class FittingError(RuntimeError):
    """Every hyperparameter restart failed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


@dataclass(frozen=True)
class KernelParams:
    """RBF hyperparameters: amplitude ``tau`` (kernel variance tau**2) and per-dimension lengthscales."""

    amplitude: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "amplitude", float(self.amplitude))
        if not (self.amplitude > 0 and np.isfinite(self.amplitude)):
            raise InvalidArgumentError(f"amplitude must be positive, got {self.amplitude}")
        if ls.ndim != 1 or ls.size == 0 or not np.all(ls > 0) or not np.all(np.isfinite(ls)):
            raise InvalidArgumentError(f"lengthscales must be positive, got {ls}")

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    @property
    def variance(self) -> float:
        return self.amplitude**2

    def to_log(self) -> np.ndarray:
        return np.log(np.concatenate([[self.amplitude], self.lengthscales]))

    @classmethod
    def from_log(cls, theta) -> "KernelParams":
        theta = np.asarray(theta, dtype=float)
        return cls(math.exp(theta[0]), np.exp(theta[1:]))


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Y = np.asarray(self.outputs, dtype=float).reshape(-1)
        if X.ndim != 2:
            raise InvalidArgumentError("inputs must be an n x d matrix")
        if X.shape[0] != Y.shape[0]:
            raise InvalidArgumentError(f"{X.shape[0]} inputs but {Y.shape[0]} outputs")
        if X.shape[0] < 1:
            raise InvalidArgumentError("dataset must contain at least one point")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise InvalidArgumentError("dataset contains non-finite values")
        X = X.copy()
        Y = Y.copy()
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "outputs", Y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def append(self, x, y) -> "Dataset":
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return Dataset(np.vstack([self.inputs, x]), np.append(self.outputs, float(y)))


def _as_points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise InvalidArgumentError(f"expected points of dimension {dim}, got shape {np.shape(x)}")
    return x


def _sqdist_scaled(A: np.ndarray, B: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    a = A / lengthscales
    b = B / lengthscales
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def rbf_matrix(A, B, params: KernelParams) -> np.ndarray:
    """Kernel matrix ``k(A_i, B_j)`` for point sets A (m x d) and B (p x d)."""
    A = _as_points(A, params.dim)
    B = _as_points(B, params.dim)
    return params.variance * np.exp(-0.5 * _sqdist_scaled(A, B, params.lengthscales))


def rbf_kernel(x, x2, params: KernelParams) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != (params.dim,) or x2.shape != (params.dim,):
        raise InvalidArgumentError(
            f"points of shape {x.shape}, {x2.shape} do not match {params.dim} lengthscales"
        )
    r2 = float(np.sum(((x - x2) / params.lengthscales) ** 2))
    return params.variance * math.exp(-0.5 * r2)


def rbf_grad_second(A, x, params: KernelParams, k=None) -> np.ndarray:
    """Gradient of ``k(A_i, x)`` with respect to the single point ``x``; shape (m, d)."""
    A = _as_points(A, params.dim)
    x = np.asarray(x, dtype=float).reshape(-1)
    if k is None:
        k = rbf_matrix(A, x[None, :], params)[:, 0]
    return k[:, None] * (A - x[None, :]) / params.lengthscales**2


def cholesky_lower(K: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(K, lower=True, check_finite=False)
    except (linalg.LinAlgError, ValueError) as exc:
        raise FactorizationError(str(exc)) from exc


def log_marginal_likelihood(params: KernelParams, data: Dataset, jitter: float = 0.0) -> float:
    """``log N(Y; 0, K(X, X) + jitter * I)``."""
    if jitter < 0:
        raise InvalidArgumentError("jitter must be nonnegative")
    K = rbf_matrix(data.inputs, data.inputs, params)
    K[np.diag_indices_from(K)] += jitter
    L = cholesky_lower(K)
    if np.any(np.diag(L) <= 0):
        raise FactorizationError("kernel matrix is singular")
    alpha = linalg.cho_solve((L, True), data.outputs, check_finite=False)
    return float(
        -0.5 * data.outputs @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * data.n * LOG_2PI
    )


def _lml_and_grad(theta, X, z, jitter_rel):
    """Negative LML and its gradient in log-space; jitter scales with tau**2."""
    params = KernelParams.from_log(theta)
    n = X.shape[0]
    D = [(X[:, j, None] - X[None, :, j]) ** 2 for j in range(X.shape[1])]
    K0 = rbf_matrix(X, X, params)
    Kt = K0.copy()
    Kt[np.diag_indices(n)] += jitter_rel * params.variance
    L = cholesky_lower(Kt)
    alpha = linalg.cho_solve((L, True), z, check_finite=False)
    Kinv = linalg.cho_solve((L, True), np.eye(n), check_finite=False)
    lml = -0.5 * z @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI
    inner = np.outer(alpha, alpha) - Kinv
    grad = np.empty_like(theta)
    grad[0] = 0.5 * np.sum(inner * (2.0 * Kt))
    for j, Dj in enumerate(D):
        grad[j + 1] = 0.5 * np.sum(inner * (K0 * Dj / params.lengthscales[j] ** 2))
    return -lml, -grad


@dataclass
class FitOptions:
    restarts: int = 10
    seed: int = 0
    jitter_rel: float = 1e-8
    jitter_max_rel: float = 1e-4
    normalize_y: bool = True
    lengthscale_bounds: tuple = (1e-2, 1e2)
    amplitude_bounds: tuple = (1e-3, 1e3)
    maxiter: int = 200
    warm_start: object = None


def jitter_ladder(opts: FitOptions):
    levels = []
    j = opts.jitter_rel
    while j <= opts.jitter_max_rel * (1 + 1e-9):
        levels.append(j)
        j *= 10.0
    return levels or [opts.jitter_rel]


def multistart_minimize(objective, bounds, restarts, seed, warm=None, maxiter=200):
    """Minimize ``objective(theta) -> (value, grad)`` with L-BFGS-B from scrambled Sobol starts.

    Returns ``(best_theta, best_value, diagnostics)``; best_value is inf when
    every start failed.
    """
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    n_starts = max(int(restarts), 1)
    sobol = qmc.Sobol(d=len(lo), scramble=True, seed=seed)
    m = int(2 ** math.ceil(math.log2(n_starts)))
    starts = qmc.scale(sobol.random(m), lo, hi)[:n_starts]
    if warm is not None:
        starts = np.vstack([np.clip(np.asarray(warm, dtype=float), lo, hi), starts])[:n_starts]

    def safe(theta):
        try:
            val, grad = objective(theta)
        except FactorizationError:
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(val) or not np.all(np.isfinite(grad)):
            return 1e25, np.zeros_like(theta)
        return val, grad

    best_theta, best_val, diagnostics = None, math.inf, []
    for start in starts:
        res = optimize.minimize(
            safe, start, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": maxiter},
        )
        val = float(res.fun)
        diagnostics.append({"start": start.tolist(), "value": val, "message": str(res.message)})
        if val < 1e24 and val < best_val:
            best_theta, best_val = np.asarray(res.x, dtype=float), val
    return best_theta, best_val, diagnostics


class ConditionedGaussian:
    """Jointly Gaussian latent functions conditioned on noise-free observations.

    Subclasses provide prior covariances between latent values ``f_fid(x)``
    and the training observations; this class does the linear algebra.
    """

    dim: int
    prior_mean: float
    factor: np.ndarray
    weights: np.ndarray

    def _condition(self, K: np.ndarray, y: np.ndarray):
        L = cholesky_lower(K)
        if np.any(np.diag(L) <= 0):
            raise FactorizationError("kernel matrix is singular")
        self.factor = L
        self.weights = linalg.cho_solve((L, True), y - self.prior_mean, check_finite=False)
        self.factor.setflags(write=False)
        self.weights.setflags(write=False)

    # prior pieces, provided by subclasses
    def k_train(self, x, fidelity=HIGH) -> np.ndarray:
        raise NotImplementedError

    def k_train_grad(self, x, fidelity=HIGH) -> np.ndarray:
        raise NotImplementedError

    def k_prior(self, xa, fa, xb, fb) -> np.ndarray:
        raise NotImplementedError

    def k_prior_grad(self, xa, fa, x, fb) -> np.ndarray:
        raise NotImplementedError

    def k_diag(self, x, fidelity=HIGH) -> np.ndarray:
        raise NotImplementedError

    def whiten(self, Kt: np.ndarray) -> np.ndarray:
        """``L^{-1} Kt`` for training-by-query covariance blocks."""
        return linalg.solve_triangular(self.factor, Kt, lower=True, check_finite=False)

    def mean(self, x, fidelity=HIGH) -> np.ndarray:
        x = _as_points(x, self.dim)
        return self.prior_mean + self.k_train(x, fidelity).T @ self.weights

    def var(self, x, fidelity=HIGH) -> np.ndarray:
        x = _as_points(x, self.dim)
        V = self.whiten(self.k_train(x, fidelity))
        return np.maximum(self.k_diag(x, fidelity) - np.sum(V * V, axis=0), 0.0)

    def cov(self, xa, xb, fa=HIGH, fb=HIGH) -> np.ndarray:
        xa = _as_points(xa, self.dim)
        xb = _as_points(xb, self.dim)
        Va = self.whiten(self.k_train(xa, fa))
        Vb = self.whiten(self.k_train(xb, fb))
        return self.k_prior(xa, fa, xb, fb) - Va.T @ Vb

    def gaussian_core(self) -> "ConditionedGaussian":
        return self


class GPPosterior(ConditionedGaussian):
    """Fitted single-fidelity GP; immutable after construction.

    The prior is ``GP(prior_mean, k)``; ``prior_mean`` is 0 unless outputs
    were standardized during fitting.
    """

    def __init__(self, data: Dataset, params: KernelParams, jitter: float = 0.0,
                 prior_mean: float = 0.0, fit_info=None):
        if params.dim != data.dim:
            raise InvalidArgumentError(
                f"kernel has {params.dim} lengthscales but data has dimension {data.dim}"
            )
        if jitter < 0:
            raise InvalidArgumentError("jitter must be nonnegative")
        self.data = data
        self.params = params
        self.jitter = float(jitter)
        self.prior_mean = float(prior_mean)
        self.dim = data.dim
        self.fit_info = fit_info or {}
        K = rbf_matrix(data.inputs, data.inputs, params)
        K[np.diag_indices_from(K)] += self.jitter
        self._condition(K, data.outputs)

    def _check_fid(self, fidelity):
        if fidelity != HIGH:
            raise InvalidArgumentError("single-fidelity GP only models the high fidelity")

    def k_train(self, x, fidelity=HIGH):
        self._check_fid(fidelity)
        return rbf_matrix(self.data.inputs, x, self.params)

    def k_train_grad(self, x, fidelity=HIGH):
        self._check_fid(fidelity)
        return rbf_grad_second(self.data.inputs, x, self.params)

    def k_prior(self, xa, fa, xb, fb):
        self._check_fid(fa)
        self._check_fid(fb)
        return rbf_matrix(xa, xb, self.params)

    def k_prior_grad(self, xa, fa, x, fb):
        self._check_fid(fa)
        self._check_fid(fb)
        return rbf_grad_second(xa, x, self.params)

    def k_diag(self, x, fidelity=HIGH):
        self._check_fid(fidelity)
        return np.full(_as_points(x, self.dim).shape[0], self.params.variance)

    def with_data(self, data: Dataset) -> "GPPosterior":
        """Condition on new data keeping hyperparameters, jitter and prior mean frozen."""
        return GPPosterior(data, self.params, self.jitter, self.prior_mean)


def posterior_mean(gp: ConditionedGaussian, x) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    return float(gp.mean(x[None, :])[0])


def posterior_cov(gp: ConditionedGaussian, x, x2) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    x2 = np.asarray(x2, dtype=float).reshape(-1)
    c = float(gp.cov(x[None, :], x2[None, :])[0, 0])
    if np.array_equal(x, x2):
        c = max(c, 0.0)
    return c


def _check_duplicates(X, Y):
    _, idx, inv = np.unique(X, axis=0, return_index=True, return_inverse=True)
    inv = np.asarray(inv).reshape(-1)
    if len(idx) == X.shape[0]:
        return
    for g in range(len(idx)):
        ys = Y[inv == g]
        if ys.size > 1 and np.ptp(ys) > 0:
            raise InvalidArgumentError(
                f"duplicated input {X[idx[g]].tolist()} has differing outputs {ys.tolist()}"
            )


def output_scaling(Y, normalize: bool):
    if not normalize:
        return 0.0, 1.0
    mu = float(np.mean(Y))
    sd = float(np.std(Y))
    return mu, (sd if sd > 0 else 1.0)


def lengthscale_log_bounds(X, opts: FitOptions):
    rng = np.ptp(X, axis=0)
    rng = np.where(rng > 0, rng, 1.0)
    lo = np.log(opts.lengthscale_bounds[0] * rng)
    hi = np.log(opts.lengthscale_bounds[1] * rng)
    return list(zip(lo, hi))


def amplitude_log_bounds(z, opts: FitOptions):
    sd = float(np.std(z))
    sd = sd if sd > 0 else 1.0
    return (math.log(opts.amplitude_bounds[0] * sd), math.log(opts.amplitude_bounds[1] * sd))


def fit_gp(data: Dataset, opts: FitOptions | None = None) -> GPPosterior:
    """Maximum-likelihood fit of an RBF GP (multi-start L-BFGS-B in log space)."""
    opts = opts or FitOptions()
    X, Y = data.inputs, data.outputs
    if data.n < 2:
        raise InvalidArgumentError("fit_gp needs at least two points")
    if np.all(np.ptp(X, axis=0) == 0):
        raise InvalidArgumentError("all input columns are constant")
    _check_duplicates(X, Y)

    mu, sd = output_scaling(Y, opts.normalize_y)
    z = (Y - mu) / sd
    bounds = [amplitude_log_bounds(z, opts)] + lengthscale_log_bounds(X, opts)
    ladder = jitter_ladder(opts)

    def objective(theta):
        last = None
        for rel in ladder:
            try:
                return _lml_and_grad(theta, X, z, rel)
            except FactorizationError as exc:
                last = exc
        raise last

    warm = None
    if opts.warm_start is not None:
        w = opts.warm_start
        warm = np.concatenate([[math.log(w.amplitude / sd)], np.log(w.lengthscales)])
    theta, val, diag = multistart_minimize(
        objective, bounds, opts.restarts, opts.seed, warm=warm, maxiter=opts.maxiter
    )
    if theta is None:
        raise FittingError("no restart produced a finite likelihood", diag)

    std_params = KernelParams.from_log(theta)
    params = KernelParams(std_params.amplitude * sd, std_params.lengthscales)
    for rel in ladder:
        try:
            gp = GPPosterior(data, params, rel * params.variance, mu,
                             fit_info={"lml_std": -val, "jitter_rel": rel, "restarts": diag})
            return gp
        except FactorizationError:
            continue
    raise FittingError("optimum could not be factorized at any jitter level", diag)
