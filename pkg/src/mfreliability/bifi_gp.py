"""Bi-fidelity autoregressive GP: ``f_h = f_l + d`` with independent GP priors on f_l and d.

Also hosts the known-low-fidelity mode, where f_l is a cheap deterministic
function and only the difference d is regressed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .gp_core import (
    HIGH,
    LOW,
    FIDELITIES,
    LOG_2PI,
    ConditionedGaussian,
    Dataset,
    FactorizationError,
    FitOptions,
    FittingError,
    GPPosterior,
    InvalidArgumentError,
    KernelParams,
    _as_points,
    _check_duplicates,
    amplitude_log_bounds,
    cholesky_lower,
    fit_gp,
    jitter_ladder,
    lengthscale_log_bounds,
    multistart_minimize,
    output_scaling,
    rbf_grad_second,
    rbf_matrix,
)


@dataclass(frozen=True)
class BiDataset:
    high_inputs: np.ndarray
    high_outputs: np.ndarray
    low_inputs: np.ndarray
    low_outputs: np.ndarray

    def __post_init__(self):
        high = Dataset(self.high_inputs, self.high_outputs)
        d = high.dim
        Xl = np.asarray(self.low_inputs, dtype=float)
        Yl = np.asarray(self.low_outputs, dtype=float).reshape(-1)
        if Xl.size == 0:
            Xl = np.zeros((0, d))
        elif Xl.ndim == 1:
            Xl = Xl.reshape(-1, d) if d > 1 else Xl[:, None]
        if Xl.ndim != 2 or Xl.shape[1] != d:
            raise InvalidArgumentError("low-fidelity inputs have the wrong dimension")
        if Xl.shape[0] != Yl.shape[0]:
            raise InvalidArgumentError(f"{Xl.shape[0]} low inputs but {Yl.shape[0]} low outputs")
        if not (np.all(np.isfinite(Xl)) and np.all(np.isfinite(Yl))):
            raise InvalidArgumentError("low-fidelity data contains non-finite values")
        Xl, Yl = Xl.copy(), Yl.copy()
        Xl.setflags(write=False)
        Yl.setflags(write=False)
        object.__setattr__(self, "high_inputs", high.inputs)
        object.__setattr__(self, "high_outputs", high.outputs)
        object.__setattr__(self, "low_inputs", Xl)
        object.__setattr__(self, "low_outputs", Yl)

    @property
    def dim(self) -> int:
        return self.high_inputs.shape[1]

    @property
    def n_high(self) -> int:
        return self.high_inputs.shape[0]

    @property
    def n_low(self) -> int:
        return self.low_inputs.shape[0]

    @property
    def stacked_inputs(self) -> np.ndarray:
        return np.vstack([self.high_inputs, self.low_inputs])

    @property
    def stacked_outputs(self) -> np.ndarray:
        return np.concatenate([self.high_outputs, self.low_outputs])

    def append(self, x, y, fidelity) -> "BiDataset":
        x = np.asarray(x, dtype=float).reshape(1, -1)
        if fidelity == HIGH:
            return BiDataset(np.vstack([self.high_inputs, x]), np.append(self.high_outputs, y),
                             self.low_inputs, self.low_outputs)
        if fidelity == LOW:
            return BiDataset(self.high_inputs, self.high_outputs,
                             np.vstack([self.low_inputs, x]), np.append(self.low_outputs, y))
        raise InvalidArgumentError(f"unknown fidelity {fidelity!r}")


def build_joint_cov(data: BiDataset, low_params: KernelParams, diff_params: KernelParams) -> np.ndarray:
    """Prior covariance of ``[Y_h; Y_l]``.

    Blocks: (h,h) = k_l + k_d on X_h, (h,l) = k_l(X_h, X_l), (l,l) = k_l(X_l, X_l).
    """
    if low_params.dim != data.dim or diff_params.dim != data.dim:
        raise InvalidArgumentError("kernel dimension does not match data dimension")
    Xs = data.stacked_inputs
    K = rbf_matrix(Xs, Xs, low_params)
    nh = data.n_high
    K[:nh, :nh] += rbf_matrix(data.high_inputs, data.high_inputs, diff_params)
    return K


class BiGPPosterior(ConditionedGaussian):
    """Joint posterior over f_h and f_l given bi-fidelity observations."""

    def __init__(self, data: BiDataset, low_params: KernelParams, diff_params: KernelParams,
                 jitter: float = 0.0, prior_mean: float = 0.0, fit_info=None):
        if jitter < 0:
            raise InvalidArgumentError("jitter must be nonnegative")
        self.data = data
        self.low_params = low_params
        self.diff_params = diff_params
        self.jitter = float(jitter)
        self.prior_mean = float(prior_mean)
        self.dim = data.dim
        self.fit_info = fit_info or {}
        K = build_joint_cov(data, low_params, diff_params)
        K[np.diag_indices_from(K)] += self.jitter
        self._condition(K, data.stacked_outputs)

    @property
    def joint_factor(self) -> np.ndarray:
        return self.factor

    def _check_fid(self, fidelity):
        if fidelity not in FIDELITIES:
            raise InvalidArgumentError(f"unknown fidelity {fidelity!r}")

    def k_train(self, x, fidelity=HIGH):
        self._check_fid(fidelity)
        x = _as_points(x, self.dim)
        K = rbf_matrix(self.data.stacked_inputs, x, self.low_params)
        if fidelity == HIGH:
            K[: self.data.n_high] += rbf_matrix(self.data.high_inputs, x, self.diff_params)
        return K

    def k_train_grad(self, x, fidelity=HIGH):
        self._check_fid(fidelity)
        G = rbf_grad_second(self.data.stacked_inputs, x, self.low_params)
        if fidelity == HIGH:
            G[: self.data.n_high] += rbf_grad_second(self.data.high_inputs, x, self.diff_params)
        return G

    def k_prior(self, xa, fa, xb, fb):
        self._check_fid(fa)
        self._check_fid(fb)
        K = rbf_matrix(xa, xb, self.low_params)
        if fa == HIGH and fb == HIGH:
            K = K + rbf_matrix(xa, xb, self.diff_params)
        return K

    def k_prior_grad(self, xa, fa, x, fb):
        self._check_fid(fa)
        self._check_fid(fb)
        G = rbf_grad_second(xa, x, self.low_params)
        if fa == HIGH and fb == HIGH:
            G = G + rbf_grad_second(xa, x, self.diff_params)
        return G

    def k_diag(self, x, fidelity=HIGH):
        self._check_fid(fidelity)
        v = self.low_params.variance + (self.diff_params.variance if fidelity == HIGH else 0.0)
        return np.full(_as_points(x, self.dim).shape[0], v)

    def with_data(self, data: BiDataset) -> "BiGPPosterior":
        return BiGPPosterior(data, self.low_params, self.diff_params, self.jitter, self.prior_mean)


def bifi_posterior_moments(gp: BiGPPosterior, x, fidelity=HIGH):
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return float(gp.mean(x, fidelity)[0]), float(gp.var(x, fidelity)[0])


def bifi_cross_cov(gp: BiGPPosterior, x, fidelity_a, x2, fidelity_b) -> float:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    x2 = np.asarray(x2, dtype=float).reshape(1, -1)
    c = float(gp.cov(x, x2, fidelity_a, fidelity_b)[0, 0])
    if fidelity_a == fidelity_b and np.array_equal(x, x2):
        c = max(c, 0.0)
    return c


def _bifi_lml_and_grad(theta, data: BiDataset, z, jitter_rel):
    d = data.dim
    lp = KernelParams.from_log(theta[: d + 1])
    dp = KernelParams.from_log(theta[d + 1:])
    Xs = data.stacked_inputs
    Xh = data.high_inputs
    n, nh = Xs.shape[0], data.n_high
    Kl = rbf_matrix(Xs, Xs, lp)
    Kd = np.zeros_like(Kl)
    Kd[:nh, :nh] = rbf_matrix(Xh, Xh, dp)
    K = Kl + Kd
    K[np.diag_indices(n)] += jitter_rel * (lp.variance + dp.variance)
    L = cholesky_lower(K)
    alpha = linalg.cho_solve((L, True), z, check_finite=False)
    Kinv = linalg.cho_solve((L, True), np.eye(n), check_finite=False)
    lml = -0.5 * z @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI
    inner = np.outer(alpha, alpha) - Kinv
    eye = np.eye(n)
    grad = np.empty_like(theta)
    grad[0] = 0.5 * np.sum(inner * (2.0 * Kl + 2.0 * jitter_rel * lp.variance * eye))
    grad[d + 1] = 0.5 * np.sum(inner * (2.0 * Kd + 2.0 * jitter_rel * dp.variance * eye))
    for j in range(d):
        Dj = (Xs[:, j, None] - Xs[None, :, j]) ** 2
        grad[j + 1] = 0.5 * np.sum(inner * (Kl * Dj / lp.lengthscales[j] ** 2))
        grad[d + 2 + j] = 0.5 * np.sum(inner * (Kd * Dj / dp.lengthscales[j] ** 2))
    return -lml, -grad


def fit_bifi_gp(data: BiDataset, opts: FitOptions | None = None) -> BiGPPosterior:
    """Joint maximum-likelihood fit of the low-fidelity and difference kernels."""
    opts = opts or FitOptions()
    if data.n_high < 2:
        raise InvalidArgumentError("fit_bifi_gp needs at least two high-fidelity points")
    Xs = data.stacked_inputs
    if np.all(np.ptp(Xs, axis=0) == 0):
        raise InvalidArgumentError("all input columns are constant")
    _check_duplicates(data.high_inputs, data.high_outputs)
    if data.n_low:
        _check_duplicates(data.low_inputs, data.low_outputs)

    Y = data.stacked_outputs
    mu, sd = output_scaling(Y, opts.normalize_y)
    z = (Y - mu) / sd
    amp = amplitude_log_bounds(z, opts)
    ls = lengthscale_log_bounds(Xs, opts)
    bounds = [amp] + ls + [amp] + ls
    ladder = jitter_ladder(opts)

    def objective(theta):
        last = None
        for rel in ladder:
            try:
                return _bifi_lml_and_grad(theta, data, z, rel)
            except FactorizationError as exc:
                last = exc
        raise last

    warm = None
    if opts.warm_start is not None:
        lw, dw = opts.warm_start
        warm = np.concatenate([
            [math.log(lw.amplitude / sd)], np.log(lw.lengthscales),
            [math.log(dw.amplitude / sd)], np.log(dw.lengthscales),
        ])
    theta, val, diag = multistart_minimize(
        objective, bounds, opts.restarts, opts.seed, warm=warm, maxiter=opts.maxiter
    )
    if theta is None:
        raise FittingError("no restart produced a finite likelihood", diag)
    d = data.dim
    lp_s = KernelParams.from_log(theta[: d + 1])
    dp_s = KernelParams.from_log(theta[d + 1:])
    lp = KernelParams(lp_s.amplitude * sd, lp_s.lengthscales)
    dp = KernelParams(dp_s.amplitude * sd, dp_s.lengthscales)
    for rel in ladder:
        try:
            return BiGPPosterior(data, lp, dp, rel * (lp.variance + dp.variance), mu,
                                 fit_info={"lml_std": -val, "jitter_rel": rel, "restarts": diag})
        except FactorizationError:
            continue
    raise FittingError("optimum could not be factorized at any jitter level", diag)


class DifferenceGP(GPPosterior):
    """GP on ``d = f_h - f_l`` for a known, costless ``f_l``.

    Predicts ``f_h(x) = f_l(x) + E[d(x)]`` with the variance of d.  ``data``
    holds the residuals.
    """

    def __init__(self, residual_data: Dataset, params, jitter, prior_mean, known_low, fit_info=None):
        super().__init__(residual_data, params, jitter, prior_mean, fit_info)
        self.known_low = known_low

    def low_values(self, x) -> np.ndarray:
        x = _as_points(x, self.dim)
        return np.asarray(self.known_low(x), dtype=float).reshape(-1)

    def mean(self, x, fidelity=HIGH):
        return self.low_values(x) + super().mean(x, fidelity)

    def with_data(self, data: Dataset) -> "DifferenceGP":
        return DifferenceGP(data, self.params, self.jitter, self.prior_mean, self.known_low)


def fit_difference_gp(high_data: Dataset, known_low, opts: FitOptions | None = None) -> DifferenceGP:
    low = np.asarray(known_low(high_data.inputs), dtype=float).reshape(-1)
    residuals = Dataset(high_data.inputs, high_data.outputs - low)
    gp = fit_gp(residuals, opts)
    return DifferenceGP(residuals, gp.params, gp.jitter, gp.prior_mean, known_low, gp.fit_info)
