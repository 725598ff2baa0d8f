import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfreliability.bifi_gp import (
    BiDataset,
    BiGPPosterior,
    bifi_cross_cov,
    bifi_posterior_moments,
    build_joint_cov,
    fit_bifi_gp,
    fit_difference_gp,
)
from mfreliability.gp_core import (
    HIGH,
    LOW,
    Dataset,
    FitOptions,
    GPPosterior,
    InvalidArgumentError,
    KernelParams,
    fit_gp,
    rbf_matrix,
)

UNIT = KernelParams(1.0, [1.0])


def k_rbf(a, b, tau, s):
    """Independent dense kernel, written out for the oracle."""
    d = (a[:, None, :] - b[None, :, :]) / s
    return tau**2 * np.exp(-0.5 * np.sum(d * d, axis=-1))


def joint_oracle(Xh, Yh, Xl, Yl, lp, dp, queries, jitter=0.0):
    """Condition the dense joint Gaussian of [f_h(Xh), f_l(Xl), queries...] by brute force.

    ``queries`` is a list of (x, fidelity); returns (means, covariance).
    """
    pts = [(x, HIGH) for x in Xh] + [(x, LOW) for x in Xl] + list(queries)
    m = len(pts)
    C = np.empty((m, m))
    for i, (xa, fa) in enumerate(pts):
        for j, (xb, fb) in enumerate(pts):
            c = k_rbf(xa[None], xb[None], lp.amplitude, lp.lengthscales)[0, 0]
            if fa == HIGH and fb == HIGH:
                c += k_rbf(xa[None], xb[None], dp.amplitude, dp.lengthscales)[0, 0]
            C[i, j] = c
    n = len(Xh) + len(Xl)
    y = np.concatenate([Yh, Yl])
    A = C[:n, :n] + jitter * np.eye(n)
    B = C[n:, :n]
    mean = B @ np.linalg.solve(A, y)
    cov = C[n:, n:] - B @ np.linalg.solve(A, B.T)
    return mean, cov


def random_instance(rng, nh=2, nl=3, d=2):
    Xh = rng.uniform(-2, 2, size=(nh, d))
    Xl = rng.uniform(-2, 2, size=(nl, d))
    Yh = np.sin(Xh).sum(1)
    Yl = np.sin(Xl).sum(1) - 0.3
    lp = KernelParams(rng.uniform(0.5, 2), rng.uniform(0.5, 2, size=d))
    dp = KernelParams(rng.uniform(0.1, 1), rng.uniform(0.5, 3, size=d))
    return Xh, Yh, Xl, Yl, lp, dp


def test_joint_cov_coincident_points():
    data = BiDataset([[0.0]], [1.0], [[0.0]], [1.0])
    assert np.allclose(build_joint_cov(data, UNIT, UNIT), [[2.0, 1.0], [1.0, 1.0]], atol=1e-15)


def test_joint_cov_without_low_data():
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(4, 2))
    lp, dp = KernelParams(1.0, [0.5, 1.0]), KernelParams(0.3, [2.0, 2.0])
    data = BiDataset(X, np.zeros(4), np.empty((0, 2)), np.empty(0))
    assert np.allclose(build_joint_cov(data, lp, dp), rbf_matrix(X, X, lp) + rbf_matrix(X, X, dp))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_joint_cov_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    Xh, Yh, Xl, Yl, lp, dp = random_instance(rng, 3, 4)
    K = build_joint_cov(BiDataset(Xh, Yh, Xl, Yl), lp, dp)
    assert np.allclose(K, K.T, atol=1e-12)
    assert np.linalg.eigvalsh(K + 1e-8 * np.eye(7)).min() > 0


def test_dataset_validation():
    with pytest.raises(InvalidArgumentError):
        BiDataset(np.zeros((2, 2)), np.zeros(3), np.empty((0, 2)), np.empty(0))
    with pytest.raises(InvalidArgumentError):
        BiDataset(np.zeros((2, 2)), np.zeros(2), np.zeros((1, 3)), np.zeros(1))


def test_dimension_mismatch():
    data = BiDataset([[0.0, 1.0]], [1.0], [[0.5, 0.5]], [1.0])
    with pytest.raises(InvalidArgumentError):
        build_joint_cov(data, UNIT, UNIT)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(0, 4))
def test_moments_match_joint_oracle(seed, nh, nl):
    rng = np.random.default_rng(seed)
    Xh, Yh, Xl, Yl, lp, dp = random_instance(rng, nh, nl)
    gp = BiGPPosterior(BiDataset(Xh, Yh, Xl, Yl), lp, dp, jitter=1e-10)
    q = rng.uniform(-2, 2, size=(2, 2))
    queries = [(q[0], HIGH), (q[1], LOW), (q[1], HIGH)]
    mean, cov = joint_oracle(Xh, Yh, Xl, Yl, lp, dp, queries, jitter=1e-10)
    for i, (x, f) in enumerate(queries):
        m, v = bifi_posterior_moments(gp, x, f)
        assert m == pytest.approx(mean[i], rel=1e-8, abs=1e-8)
        assert v == pytest.approx(max(cov[i, i], 0.0), rel=1e-8, abs=1e-8)
    for i, (xa, fa) in enumerate(queries):
        for j, (xb, fb) in enumerate(queries):
            assert bifi_cross_cov(gp, xa, fa, xb, fb) == pytest.approx(cov[i, j], rel=1e-8, abs=1e-8)


def test_interpolates_each_fidelity():
    rng = np.random.default_rng(3)
    Xh, Yh, Xl, Yl, lp, dp = random_instance(rng, 3, 4)
    gp = BiGPPosterior(BiDataset(Xh, Yh, Xl, Yl), lp, dp)
    for x, y in zip(Xh, Yh):
        m, v = bifi_posterior_moments(gp, x, HIGH)
        assert m == pytest.approx(y, abs=1e-6 * np.ptp(Yh))
        assert v == pytest.approx(0.0, abs=1e-8)
        assert bifi_cross_cov(gp, x, HIGH, rng.uniform(-2, 2, 2), LOW) == pytest.approx(0.0, abs=1e-8)
    for x, y in zip(Xl, Yl):
        m, v = bifi_posterior_moments(gp, x, LOW)
        assert m == pytest.approx(y, abs=1e-6 * np.ptp(Yl))
        assert v == pytest.approx(0.0, abs=1e-8)


def test_reduces_to_single_fidelity_without_low_data():
    rng = np.random.default_rng(4)
    X = rng.uniform(-2, 2, size=(5, 2))
    Y = np.cos(X[:, 0]) * X[:, 1]
    lp, dp = KernelParams(1.0, [0.8, 1.1]), KernelParams(1.0, [0.8, 1.1])
    bi = BiGPPosterior(BiDataset(X, Y, np.empty((0, 2)), np.empty(0)), lp, dp)
    # k_l + k_d with equal lengthscales is one RBF with amplitude sqrt(2)
    single = GPPosterior(Dataset(X, Y), KernelParams(np.sqrt(2.0), [0.8, 1.1]))
    Q = rng.uniform(-3, 3, size=(10, 2))
    assert np.allclose(bi.mean(Q, HIGH), single.mean(Q), rtol=1e-8, atol=1e-10)
    assert np.allclose(bi.cov(Q, Q, HIGH, HIGH), single.cov(Q, Q), rtol=1e-8, atol=1e-10)


def test_appending_either_fidelity_never_increases_high_variance():
    rng = np.random.default_rng(5)
    Xh, Yh, Xl, Yl, lp, dp = random_instance(rng, 3, 3)
    gp = BiGPPosterior(BiDataset(Xh, Yh, Xl, Yl), lp, dp, jitter=1e-10)
    Q = rng.uniform(-2, 2, size=(30, 2))
    for fid in (HIGH, LOW):
        bigger = gp.with_data(gp.data.append(rng.uniform(-2, 2, 2), 0.1, fid))
        assert np.all(bigger.var(Q, HIGH) <= gp.var(Q, HIGH) + 1e-10)


def test_fit_constant_shift():
    X = np.linspace(-2, 2, 25)[:, None]
    Xh = X[::3]
    g = np.sin
    data = BiDataset(Xh, g(Xh[:, 0]) + 0.5, X, g(X[:, 0]))
    gp = fit_bifi_gp(data, FitOptions(seed=0))
    Q = np.linspace(-1.8, 1.8, 40)[:, None]
    assert np.allclose(gp.mean(Q, HIGH), g(Q[:, 0]) + 0.5, atol=2e-2)


def test_fit_deterministic():
    rng = np.random.default_rng(6)
    Xh, Yh, Xl, Yl, _, _ = random_instance(rng, 4, 6)
    data = BiDataset(Xh, Yh, Xl, Yl)
    a = fit_bifi_gp(data, FitOptions(seed=3))
    b = fit_bifi_gp(data, FitOptions(seed=3))
    assert np.array_equal(a.low_params.lengthscales, b.low_params.lengthscales)
    assert a.diff_params.amplitude == b.diff_params.amplitude


def test_difference_gp_zero_difference():
    rng = np.random.default_rng(7)
    X = rng.uniform(-2, 2, size=(8, 2))

    def f(X):
        return np.sin(X[:, 0]) + X[:, 1] ** 2

    gp = fit_difference_gp(Dataset(X, f(X)), f)
    Q = rng.uniform(-2, 2, size=(20, 2))
    assert np.allclose(gp.mean(Q), f(Q), atol=1e-8)


def test_difference_gp_zero_low_reduces_to_plain_fit():
    rng = np.random.default_rng(8)
    X = rng.uniform(-2, 2, size=(8, 2))
    data = Dataset(X, np.sin(X[:, 0]) * X[:, 1])
    diff = fit_difference_gp(data, lambda X: np.zeros(len(X)), FitOptions(seed=1))
    plain = fit_gp(data, FitOptions(seed=1))
    Q = rng.uniform(-2, 2, size=(20, 2))
    assert np.allclose(diff.mean(Q), plain.mean(Q), atol=1e-10)
    assert np.allclose(diff.var(Q), plain.var(Q), atol=1e-10)


def test_difference_gp_beats_plain_gp_on_linear_trend():
    rng = np.random.default_rng(9)
    X = rng.uniform(-2, 2, size=(10, 2))

    def f_low(X):
        return np.sin(2 * X[:, 0]) * np.cos(X[:, 1])

    def f_high(X):
        return f_low(X) + 0.4 * X[:, 0] - 0.2 * X[:, 1]

    data = Dataset(X, f_high(X))
    g = np.linspace(-2, 2, 30)
    Q = np.column_stack([a.ravel() for a in np.meshgrid(g, g)])
    err_diff = np.mean(np.abs(fit_difference_gp(data, f_low).mean(Q) - f_high(Q)))
    err_plain = np.mean(np.abs(fit_gp(data).mean(Q) - f_high(Q)))
    assert err_diff < err_plain
