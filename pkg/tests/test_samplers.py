import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from mesb import linop
from mesb.denoise import (Conditioning, GaussianAnalyticDenoiser, ZeroDenoiser,
                          make_gaussian_analytic_denoiser, make_oracle_denoiser, x0_hat)
from mesb.errors import CapabilityError, InvalidArgument, OperatorContractError
from mesb.harness import TaskKind, TaskSpec, make_task
from mesb.samplers import (SamplerConfig, SamplerKind, TaskInputs, cddb_deep_step_length,
                           cddb_deep_update, cddb_update, ddpm_posterior_sample,
                           extrapolation_target, extrapolation_weight, forward_sample,
                           i2sb_reverse, mesb_solve, mesb_update, project_update, reverse_run)
from mesb.schedule import TimeGrid, quadratic_time_grid
from mesb.tensor import derive_seed, seeded_rng


def mask_op(shape=(6, 6), keep=20, seed=0):
    idx = np.random.default_rng(seed).choice(math.prod(shape), keep, replace=False)
    return linop.mask(shape, idx), idx


def oracle_task(A, rng, shape):
    x0 = rng.random(shape)
    y = A.apply(x0)
    return x0, TaskInputs(x0 + 0.3 * rng.standard_normal(shape), y, A)


# ---------------------------------------------------------------- forward / posterior


class TestForward:
    def test_range(self, schedule):
        for t in (0.0, 1.0, -0.1):
            with pytest.raises(InvalidArgument):
                forward_sample(np.zeros(1), np.zeros(1), t, schedule, seeded_rng(0))

    def test_small_t_mean_is_x0(self, schedule):
        t = quadratic_time_grid(1000)[1]
        x0, x1 = np.array([0.2, 0.8]), np.array([5.0, -5.0])
        draws = np.array([forward_sample(x0, x1, t, schedule, seeded_rng(i)) for i in range(200)])
        np.testing.assert_allclose(draws.mean(axis=0), x0, atol=1e-6)

    def test_constant_endpoints(self, schedule):
        c, n = np.array([0.7]), 10_000
        rng = seeded_rng(1)
        draws = np.array([forward_sample(c, c, 0.3, schedule, rng)[0] for _ in range(n)])
        assert abs(draws.mean() - c[0]) <= 3 * draws.std(ddof=1) / math.sqrt(n)

    def test_midpoint_statistics(self, schedule):
        t, n = 0.5, 10_000
        assert schedule.sigma2(t) == pytest.approx(schedule.sigma_bar2(t), rel=1e-12)
        x0, x1 = np.array([0.2]), np.array([1.0])
        rng = seeded_rng(2)
        draws = np.array([forward_sample(x0, x1, t, schedule, rng)[0] for _ in range(n)])
        var = schedule.sigma2(t) / 2
        assert abs(draws.mean() - 0.6) <= 3 * math.sqrt(var / n)
        # standard error of the sample variance of a Gaussian is var * sqrt(2 / (n - 1))
        assert abs(draws.var(ddof=1) - var) <= 3 * var * math.sqrt(2 / (n - 1))


class TestPosterior:
    def test_last_step_returns_input(self, schedule):
        grid = quadratic_time_grid(10)
        x0_in = np.array([0.1, 0.2])
        out = ddpm_posterior_sample(x0_in, np.array([9.0, 9.0]), 1, grid, schedule, seeded_rng(0))
        assert np.array_equal(out, x0_in)

    def test_range(self, schedule):
        grid = quadratic_time_grid(4)
        for n in (0, 5):
            with pytest.raises(InvalidArgument):
                ddpm_posterior_sample(np.zeros(1), np.zeros(1), n, grid, schedule, seeded_rng(0))

    def test_equal_weights_midpoint(self, schedule):
        s = 0.2
        u = brentq(lambda v: schedule.sigma2(v) - 2 * schedule.sigma2(s), s, 0.5, xtol=1e-15)
        grid = TimeGrid([0.0, s, u, 1.0])
        assert schedule.alpha2(s, u) == pytest.approx(schedule.sigma2(s), rel=1e-10)
        a, b = np.array([0.0, 1.0]), np.array([2.0, 3.0])
        out = ddpm_posterior_sample(a, b, 2, grid, schedule, None, stochastic=False)
        np.testing.assert_allclose(out, (a + b) / 2, rtol=1e-9)

    def test_variance(self, schedule):
        grid, n, m = quadratic_time_grid(10), 6, 10_000
        a2 = schedule.alpha2(grid[n - 1], grid[n])
        s2 = schedule.sigma2(grid[n - 1])
        expected = s2 * a2 / (a2 + s2)
        draws = ddpm_posterior_sample(np.zeros(m), np.ones(m), n, grid, schedule, seeded_rng(3))
        assert abs(draws.var(ddof=1) / expected - 1) <= 0.05


# ---------------------------------------------------------------- update rules


class TestUpdates:
    def test_mesb_identity_system(self, rng):
        x = rng.standard_normal((4, 4))
        A = linop.gaussian_blur((4, 4), 1.0)
        assert np.array_equal(mesb_solve(x, A.apply(x) + 1, A, 0.0), x)

    @pytest.mark.parametrize("k_y", [0.5, 3.0, 100.0])
    def test_mesb_mask_componentwise(self, rng, k_y):
        A, idx = mask_op()
        x = rng.standard_normal((6, 6))
        y = rng.standard_normal(idx.size)
        out = mesb_solve(x, y, A, k_y, p=10)
        expect = x.copy().ravel()
        expect[idx] = (expect[idx] + k_y * y) / (1 + k_y)
        np.testing.assert_allclose(out.ravel(), expect, atol=1e-12)

    def test_mesb_matches_dense_normal_equations(self, rng, schedule):
        shape = (4, 4)
        A = linop.block_downsample(shape, 2)
        T = linop.laplacian_T(shape)
        x0h, xn, xc = (rng.standard_normal(shape) for _ in range(3))
        y = rng.standard_normal(A.shape_out)
        grid = quadratic_time_grid(10)
        n, cfg = 6, SamplerConfig(SamplerKind.MESB, k_y=2.0, k_E=5.0, T_gram=T, p=200, cg_tol=1e-14)
        got = mesb_update(xn, x0h, xc, y, A, cfg, schedule, grid, n)
        t = grid[n]
        S, s2, sb2 = schedule.sigma2_total, schedule.sigma2(t), schedule.sigma_bar2(t)
        k_e = 5.0 * s2 * sb2 / S**2
        x0e = (S * xn - s2 * xc) / sb2
        d = x0h.size
        basis = np.eye(d)
        Am = np.stack([A.apply(e.reshape(shape)).ravel() for e in basis], axis=1)
        Tg = np.stack([T.apply(e.reshape(shape)).ravel() for e in basis], axis=1)
        M = (1 + k_e) * np.eye(d) + Tg + 2.0 * Am.T @ Am
        rhs = (np.eye(d) + Tg) @ x0h.ravel() + k_e * x0e.ravel() + 2.0 * Am.T @ y.ravel()
        np.testing.assert_allclose(got.ravel(), np.linalg.solve(M, rhs), atol=1e-10)

    def test_extrapolation_endpoint(self, schedule):
        xc = np.array([1.0, 2.0])
        assert np.array_equal(extrapolation_target(np.zeros(2), xc, schedule, 1.0), xc)
        assert extrapolation_weight(20.0, schedule, 1.0) == 0.0
        S = schedule.sigma2_total
        assert extrapolation_weight(4.0, schedule, 0.5) == pytest.approx(4.0 * (S / 2) ** 2 / S**2, rel=1e-12)

    def test_extrapolation_inverts_bridge_mean(self, schedule, rng):
        # X_n at the bridge mean of (X0, X_corrupt) maps back to X0
        x0, xc, t = rng.random(5), rng.random(5), 0.35
        S, s2, sb2 = schedule.sigma2_total, schedule.sigma2(t), schedule.sigma_bar2(t)
        xn = (sb2 * x0 + s2 * xc) / S
        np.testing.assert_allclose(extrapolation_target(xn, xc, schedule, t), x0, atol=1e-12)

    def test_project_fixed_point(self, rng):
        A = linop.block_downsample((8, 8), 2)
        x = rng.random((8, 8))
        np.testing.assert_allclose(project_update(x, A.apply(x), A, 3), x, atol=1e-15)

    def test_project_mask_substitution(self, rng):
        A, idx = mask_op()
        x, y = rng.standard_normal((6, 6)), rng.standard_normal(idx.size)
        out = project_update(x, y, A, 1).ravel()
        np.testing.assert_allclose(out[idx], y, atol=1e-14)
        rest = np.setdiff1d(np.arange(36), idx)
        assert np.array_equal(out[rest], x.ravel()[rest])

    @pytest.mark.parametrize("p", [1, 2, 5])
    @pytest.mark.parametrize("op", ["mask", "down"])
    def test_project_residual(self, rng, p, op):
        A = mask_op((8, 8), 30)[0] if op == "mask" else linop.block_downsample((8, 8), 4)
        x = rng.standard_normal((8, 8))
        y = rng.standard_normal(A.shape_out)
        out = project_update(x, y, A, p)
        assert np.linalg.norm(A.apply(out) - y) <= 1e-8 * np.linalg.norm(y)

    def test_cddb_trivial(self, rng):
        x, y = rng.standard_normal(5), rng.standard_normal(5)
        I = linop.identity((5,))
        assert np.array_equal(cddb_update(x, y, I, 0.0), x)
        np.testing.assert_allclose(cddb_update(x, y, I, 1.0), y, atol=1e-15)
        with pytest.raises(InvalidArgument):
            cddb_update(x, y, I, -1.0)

    def test_cddb_matches_weighted_least_squares_on_mask(self, rng):
        A, idx = mask_op()
        x, y = rng.standard_normal((6, 6)), rng.standard_normal(idx.size)
        alpha0, k = 1.0, 3.0
        out = cddb_update(x, y, A, alpha0 * k / (alpha0 + k))
        expect = x.copy().ravel()
        expect[idx] = (expect[idx] + 3 * y) / 4
        np.testing.assert_allclose(out.ravel(), expect, atol=1e-12)
        # the same point solves the k = 3 weighted least squares
        np.testing.assert_allclose(out, mesb_solve(x, y, A, k, p=5), atol=1e-12)

    def test_cddb_deep_trivial(self, schedule, rng):
        A = linop.block_downsample((4, 4), 2)
        xn = rng.standard_normal((4, 4))
        cond = Conditioning(rng.standard_normal((4, 4)))
        den = GaussianAnalyticDenoiser(np.zeros((4, 4)), 0.3, schedule)
        x0h = x0_hat(den, xn, 0.4, cond, schedule)
        out = cddb_deep_update(xn, 0.4, cond, den, A.apply(x0h), A, 0.7, schedule)
        np.testing.assert_allclose(out, x0h, atol=1e-14)
        truth = rng.random((4, 4))
        oracle = make_oracle_denoiser(truth, schedule)
        assert np.array_equal(cddb_deep_update(xn, 0.4, cond, oracle, np.zeros((2, 2)), A, 5.0, schedule), truth)

    def test_cddb_deep_finite_differences(self, schedule, rng):
        d, t, alpha, h = 8, 0.3, 0.6, 1e-4
        A = linop.dense(rng.standard_normal((5, d)))
        den = GaussianAnalyticDenoiser(rng.standard_normal(d), 0.5, schedule)
        cond = Conditioning(rng.standard_normal(d))
        xn, y = rng.standard_normal(d), rng.standard_normal(5)
        f = lambda z: float(np.sum((A.apply(x0_hat(den, z, t, cond, schedule)) - y) ** 2))
        grad = np.array([(f(xn + h * e) - f(xn - h * e)) / (2 * h) for e in np.eye(d)])
        expect = x0_hat(den, xn, t, cond, schedule) - alpha * grad
        got = cddb_deep_update(xn, t, cond, den, y, A, alpha, schedule)
        assert np.linalg.norm(got - expect) <= 1e-5 * np.linalg.norm(expect)

    def test_cddb_deep_needs_vjp(self, schedule):
        class NoVjp(ZeroDenoiser):
            has_vjp = False

        A = linop.identity((3,))
        with pytest.raises(CapabilityError):
            cddb_deep_update(np.zeros(3), 0.5, Conditioning(np.zeros(3)), NoVjp(), np.zeros(3), A, 1.0, schedule)

    def test_step_length(self):
        assert cddb_deep_step_length(0.04, 0.01) == pytest.approx(2.0)


# ---------------------------------------------------------------- config


def test_config_validation():
    for bad in (dict(N=0), dict(p=0), dict(k_y=-1.0), dict(k_E=math.inf), dict(k_y=math.nan), dict(alpha=-1)):
        with pytest.raises(InvalidArgument):
            SamplerConfig(SamplerKind.MESB, **bad)
    with pytest.raises(InvalidArgument):
        SamplerConfig(SamplerKind.MESB, k_y=math.inf, T_gram=linop.laplacian_T((4, 4)))
    with pytest.raises(ValueError):
        SamplerConfig("not_a_sampler")
    assert SamplerConfig("mesb").kind is SamplerKind.MESB


# ---------------------------------------------------------------- reverse chain

ALL_KINDS = [
    SamplerConfig(SamplerKind.I2SB),
    SamplerConfig(SamplerKind.PROJECT),
    SamplerConfig(SamplerKind.CDDB, alpha=0.5),
    SamplerConfig(SamplerKind.CDDB_DEEP, alpha=0.5),
    SamplerConfig(SamplerKind.MESB, k_y=4.0),
    SamplerConfig(SamplerKind.MESB, k_y=4.0, T_gram=linop.laplacian_T((8, 8))),
    SamplerConfig(SamplerKind.MESB, k_y=math.inf),
]


@pytest.mark.parametrize("config", ALL_KINDS, ids=lambda c: f"{c.kind.value}-{c.k_y}-{c.t_name}")
def test_oracle_collapse(schedule, config):
    rng = np.random.default_rng(7)
    A = linop.block_downsample((8, 8), 2)
    x0, task = oracle_task(A, rng, (8, 8))
    out, traj = reverse_run(make_oracle_denoiser(x0, schedule), task, config.replace(stochastic=False), schedule)
    np.testing.assert_allclose(out, x0, atol=1e-10)
    assert len(traj.steps) == config.N
    assert all(math.isfinite(s.cg_residual) for s in traj.steps)


def test_i2sb_single_step_zero_denoiser(schedule):
    xc = np.random.default_rng(0).random((3, 3))
    out, _ = i2sb_reverse(ZeroDenoiser(), xc, SamplerConfig(SamplerKind.I2SB, N=1), schedule)
    assert np.array_equal(out, xc)


def test_i2sb_gaussian_fixed_point(schedule):
    # X1 is treated as known and independent of X0, so the posterior mean is mu0 at every step
    mu0 = np.full((4, 4), 0.4)
    den = make_gaussian_analytic_denoiser(mu0, 0.1, schedule)
    xc = np.random.default_rng(3).random((4, 4))
    out, _ = i2sb_reverse(den, xc, SamplerConfig(SamplerKind.I2SB, stochastic=False), schedule)
    np.testing.assert_allclose(out, mu0, atol=1e-12)


@pytest.mark.parametrize("config", ALL_KINDS[:5], ids=lambda c: c.kind.value)
def test_seeded_determinism(schedule, config):
    rng = np.random.default_rng(8)
    A = linop.block_downsample((8, 8), 2)
    _, task = oracle_task(A, rng, (8, 8))
    den = make_gaussian_analytic_denoiser(np.full((8, 8), 0.5), 0.1, schedule)
    cfg = config.replace(seed=11)
    a, ta = reverse_run(den, task, cfg, schedule)
    b, tb = reverse_run(den, task, cfg, schedule)
    assert np.array_equal(a, b)
    for sa, sb in zip(ta.steps, tb.steps):
        assert np.array_equal(sa.x0_new, sb.x0_new)
    c, _ = reverse_run(den, task, cfg.replace(seed=12), schedule)
    assert not np.array_equal(a, c)


def _run_pair(schedule, cfg_a, cfg_b, seed):
    rng = np.random.default_rng(seed)
    A = linop.gaussian_blur((8, 8), 1.2)
    _, task = oracle_task(A, rng, (8, 8))
    den = make_gaussian_analytic_denoiser(np.full((8, 8), 0.5), 0.1, schedule)
    return reverse_run(den, task, cfg_a, schedule), reverse_run(den, task, cfg_b, schedule)


@pytest.mark.parametrize("stochastic", [True, False])
def test_mesb_zero_weights_is_i2sb(schedule, stochastic):
    (a, ta), (b, tb) = _run_pair(schedule, SamplerConfig(SamplerKind.I2SB, stochastic=stochastic, seed=4),
                                 SamplerConfig(SamplerKind.MESB, k_y=0.0, k_E=0.0, stochastic=stochastic, seed=4),
                                 1)
    assert np.array_equal(a, b)
    assert all(np.array_equal(sa.x0_new, sb.x0_new) for sa, sb in zip(ta.steps, tb.steps))


@pytest.mark.parametrize("stochastic", [True, False])
def test_mesb_infinite_weight_is_project(schedule, stochastic):
    (a, ta), (b, tb) = _run_pair(schedule, SamplerConfig(SamplerKind.PROJECT, stochastic=stochastic, seed=5),
                                 SamplerConfig(SamplerKind.MESB, k_y=math.inf, stochastic=stochastic, seed=5),
                                 2)
    assert np.array_equal(a, b)
    assert all(np.array_equal(sa.x0_new, sb.x0_new) for sa, sb in zip(ta.steps, tb.steps))


def test_capability_and_measurement_errors(schedule):
    class NoVjp(ZeroDenoiser):
        has_vjp = False

    A = linop.identity((3,))
    task = TaskInputs(np.zeros(3), np.zeros(3), A)
    with pytest.raises(CapabilityError):
        reverse_run(NoVjp(), task, SamplerConfig(SamplerKind.CDDB_DEEP), schedule)
    with pytest.raises(InvalidArgument):
        reverse_run(ZeroDenoiser(), TaskInputs(np.zeros(3)), SamplerConfig(SamplerKind.PROJECT), schedule)
    with pytest.raises(InvalidArgument):
        reverse_run(ZeroDenoiser(), task, SamplerConfig(SamplerKind.I2SB, N=4), schedule, quadratic_time_grid(5))


def test_failed_step_is_recorded(schedule):
    # an indefinite "Gram" breaks the CG contract on the first step
    A = linop.identity((4,))
    bad_T = linop.LinearOperator((4,), (4,), lambda x: -5.0 * x, lambda x: -5.0 * x, "indefinite")
    task = TaskInputs(np.ones(4), np.zeros(4), A)
    cfg = SamplerConfig(SamplerKind.MESB, N=5, k_y=1.0, T_gram=bad_T)
    with pytest.raises(OperatorContractError) as info:
        reverse_run(ZeroDenoiser(), task, cfg, schedule)
    assert info.value.failed_step == 5


def test_mesb_lowers_data_residual_on_deblur(schedule):
    spec = TaskSpec(TaskKind.DEBLUR_GAUSS, size=16)
    den = make_gaussian_analytic_denoiser(np.full((16, 16), 0.5), 0.1, schedule)
    base = dict(N=10, p=5, stochastic=False)
    for i in range(20):
        task = make_task(spec, seeded_rng(derive_seed(0, i)))
        inputs = TaskInputs(task.x_corrupt, task.y, task.A)
        res = {}
        for name, cfg in {"i2sb": SamplerConfig(SamplerKind.I2SB, **base),
                          "proj": SamplerConfig(SamplerKind.MESB, k_y=math.inf, **base),
                          "big": SamplerConfig(SamplerKind.MESB, k_y=1e6, **base)}.items():
            x, _ = reverse_run(den, inputs, cfg, schedule, keep_states=False)
            res[name] = np.linalg.norm(task.A.apply(x) - task.y) / np.linalg.norm(task.y)
        assert res["proj"] < res["i2sb"]
        assert res["big"] < res["i2sb"]


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 50.0), st.floats(0.0, 10.0), st.integers(0, 2**31))
def test_mesb_step_lowers_objective(k_y, k_E, seed):
    # the CG iterate started at x0_hat never increases the quadratic it minimises
    rng = np.random.default_rng(seed)
    A = linop.block_downsample((4, 4), 2)
    x0h, xe = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    y = rng.standard_normal((2, 2))
    out = mesb_solve(x0h, y, A, k_y, k_E, xe, p=3)

    def J(x):
        return (np.sum((x - x0h) ** 2) + k_y * np.sum((A.apply(x) - y) ** 2)
                + k_E * np.sum((x - xe) ** 2))

    assert J(out) <= J(x0h) + 1e-9 * (1 + J(x0h))
