import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from cbapm import diagnostics as dg
from cbapm import portfolio as pf
from oracles import dk_sandwich, ols_normal_equations, white_cov


def panel_case(seed, n_firms=15, T=40, k=3):
    rng = np.random.default_rng(seed)
    time = np.repeat(np.arange(T), n_firms)
    X = rng.normal(size=(n_firms * T, k))
    common = rng.normal(size=T)[time]
    y = 0.3 + X @ rng.normal(size=k) + common + rng.normal(size=len(time))
    return y, X, time


class TestPooledOls:
    def test_exact_affine(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(30, 3))
        res = dg.pooled_ols(1.5 + X @ np.array([1.0, -2.0, 0.5]), X)
        assert np.max(np.abs(res.residuals)) < 1e-12
        assert_allclose(res.adj_r2, 1.0)

    def test_orthonormal(self):
        Q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(20, 3)))
        Q = Q - Q.mean(axis=0)
        res = dg.pooled_ols(2.0 * Q[:, 0], Q)
        assert_allclose(res.coef[1:], [2.0, 0.0, 0.0], atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_normal_equation_oracle(self, seed):
        y, X, _ = panel_case(seed, n_firms=4, T=10)
        res = dg.pooled_ols(y, X)
        Z = np.hstack([np.ones((len(X), 1)), X])
        assert_allclose(res.coef, ols_normal_equations(Z, y), rtol=0, atol=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_residual_orthogonality(self, seed):
        y, X, _ = panel_case(seed)
        res = dg.pooled_ols(y, X)
        Z = np.hstack([np.ones((len(X), 1)), X])
        assert np.max(np.abs(Z.T @ res.residuals)) <= 1e-8 * np.abs(Z).max() * np.abs(y).max() * len(y)

    def test_rank_deficient(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(30, 2))
        X = np.column_stack([X, X[:, 0] + X[:, 1]])
        with pytest.raises(ValueError, match=r"\['b'\]"):
            dg.pooled_ols(rng.normal(size=30), X, names=["a", "c", "b"])

    def test_constant_column_collinear_with_intercept(self):
        X = np.column_stack([np.ones(10), np.arange(10.0)])
        with pytest.raises(ValueError, match="ones"):
            dg.pooled_ols(np.arange(10.0), X, names=["ones", "trend"])


class TestDriscollKraay:
    @pytest.mark.parametrize("seed", range(5))
    def test_white_single_firm(self, seed):
        rng = np.random.default_rng(seed)
        X = np.hstack([np.ones((20, 1)), rng.normal(size=(20, 2))])
        e = rng.normal(size=20)
        cov = dg.driscoll_kraay_cov(X, e, np.arange(20), bandwidth=0, small_sample=False)
        assert np.array_equal(cov, cov)  # finite
        assert_allclose(cov, white_cov(X, e), rtol=1e-13, atol=0)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("L", [0, 3, 11])
    def test_sandwich_oracle(self, seed, L):
        y, X, time = panel_case(seed)
        res = dg.pooled_ols(y, X)
        Z = np.hstack([np.ones((len(X), 1)), X])
        cov = dg.driscoll_kraay_cov(Z, res.residuals, time, L, small_sample=False)
        ref = dk_sandwich(Z, res.residuals, time, L)
        assert np.max(np.abs(cov - ref)) <= 1e-8 * np.abs(ref).max()
        T, k = 40, Z.shape[1]
        adj = dg.driscoll_kraay_cov(Z, res.residuals, time, L)
        assert_allclose(adj, ref * T / (T - k), rtol=1e-10)

    def test_shuffled_rows(self):
        y, X, time = panel_case(9)
        res = dg.pooled_ols(y, X)
        Z = np.hstack([np.ones((len(X), 1)), X])
        perm = np.random.default_rng(0).permutation(len(y))
        a = dg.driscoll_kraay_se(Z, res.residuals, time)
        b = dg.driscoll_kraay_se(Z[perm], res.residuals[perm], time[perm])
        assert_allclose(a, b, rtol=1e-12)

    def test_iid_close_to_classical(self):
        rng = np.random.default_rng(11)
        T, n = 400, 25
        time = np.repeat(np.arange(T), n)
        X = rng.normal(size=(T * n, 2))
        y = X @ [0.5, -0.2] + rng.normal(size=T * n)
        ols = dg.pooled_ols(y, X)
        dk = dg.pooled_ols_dk(y, X, time)
        assert np.all(np.abs(dk.se / ols.se - 1.0) < 0.15)

    def test_zero_residuals_flagged(self):
        X = np.arange(24.0).reshape(12, 2) ** 1.5
        res = dg.pooled_ols_dk(1.0 + X @ [1.0, 2.0], X, np.arange(12), bandwidth=2)
        assert res.t_undefined
        assert np.all(res.se < 1e-10)

    def test_too_few_periods(self):
        with pytest.raises(ValueError, match="distinct periods"):
            dg.driscoll_kraay_cov(np.ones((10, 1)), np.ones(10), np.arange(10) % 5, bandwidth=11)


class TestStars:
    @pytest.mark.parametrize("t,mark", [(3.0, "***"), (-2.0, "**"), (1.7, "*"), (1.0, ""), (np.nan, "")])
    def test_thresholds(self, t, mark):
        assert dg.stars(t) == mark


def spread_frame(seed, months=6, n=40):
    rng = np.random.default_rng(seed)
    frames = []
    for m in range(months):
        ret = rng.normal(0, 0.05, n)
        frames.append(pd.DataFrame({
            "firm_id": [f"F{i:02d}" for i in range(n)], "month": m,
            "size": rng.lognormal(size=n), "ret_1": ret, "perfect": ret, "noise": rng.normal(size=n),
            "flat": 1.0,
        }))
    return pd.concat(frames, ignore_index=True)


class TestFactorMimicking:
    def test_matches_long_short(self):
        df = spread_frame(0)
        fs = dg.factor_mimicking(df, ["noise"])
        bt = pf.backtest(df, score="noise")
        assert_allclose(fs.returns["noise"].to_numpy(), bt.long_short.returns)
        assert list(fs.returns.index) == list(range(1, 7))

    def test_perfect_foresight_positive(self):
        df = spread_frame(1)
        fs = dg.factor_mimicking(df, ["perfect"])
        assert np.all(fs.returns["perfect"] > 0)

    def test_constant_flagged(self):
        fs = dg.factor_mimicking(spread_frame(2), ["flat", "noise"])
        assert fs.degenerate == {"flat": True, "noise": False}


def pricing_case(seed, T=240, N=10, K=3, alpha=None):
    rng = np.random.default_rng(seed)
    F = rng.normal(0.005, 0.04, (T, K))
    B = rng.normal(1.0, 0.3, (N, K))
    E = rng.normal(0, 0.02, (T, N))
    a = np.zeros(N) if alpha is None else alpha
    return a + F @ B.T + E, F


class TestTimeSeries:
    def test_exact_combination(self):
        rng = np.random.default_rng(0)
        F = rng.normal(size=(50, 2))
        reg = dg.ts_alpha_regression(F @ [[1.0, 0.5], [-0.3, 2.0]], F)
        assert_allclose(reg.alphas, 0.0, atol=1e-14)
        assert_allclose(reg.r2, 1.0)

    def test_constant_offset(self):
        rng = np.random.default_rng(1)
        F = rng.normal(size=(50, 1))
        reg = dg.ts_alpha_regression(F[:, 0] + 0.01, F)
        assert_allclose(reg.alphas, 0.01, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_oracle(self, seed):
        Y, F = pricing_case(seed, T=40, N=4, K=2)
        reg = dg.ts_alpha_regression(Y, F)
        Z = np.hstack([np.ones((40, 1)), F])
        B = ols_normal_equations(Z, Y)
        assert_allclose(reg.alphas, B[0], atol=1e-8)
        assert_allclose(reg.betas, B[1:].T, atol=1e-8)

    def test_too_short(self):
        with pytest.raises(ValueError, match="T > N \\+ K"):
            dg.ts_alpha_regression(np.zeros((13, 10)), np.zeros((13, 3)))


class TestGrs:
    def test_zero_alpha(self):
        Y, F = pricing_case(0)
        reg = dg.ts_alpha_regression(Y, F)
        res = dg.grs_test(np.zeros(10), reg.residuals, F)
        assert res.F_stat == 0.0 and res.p_value == 1.0

    def test_single_asset_is_squared_t(self):
        rng = np.random.default_rng(3)
        F = rng.normal(0.01, 0.05, (60, 1))
        y = 0.004 + 0.8 * F[:, 0] + rng.normal(0, 0.03, 60)
        reg = dg.ts_alpha_regression(y, F)
        res = dg.grs_test(reg.alphas, reg.residuals, F)
        assert_allclose(res.F_stat, reg.alpha_t[0] ** 2, rtol=1e-10)

    @pytest.mark.parametrize("scale", [0.01, 3.0, 250.0])
    def test_factor_rescaling(self, scale):
        Y, F = pricing_case(4, alpha=np.full(10, 0.002))
        base = dg.ts_alpha_regression(Y, F)
        r0 = dg.grs_test(base.alphas, base.residuals, F)
        G = F.copy()
        G[:, 1] *= scale
        reg = dg.ts_alpha_regression(Y, G)
        r1 = dg.grs_test(reg.alphas, reg.residuals, G)
        assert abs(r1.F_stat - r0.F_stat) <= 1e-10 * max(1.0, r0.F_stat)

    def test_alpha_norms(self):
        Y, F = pricing_case(5, alpha=np.linspace(-0.003, 0.004, 10))
        reg = dg.ts_alpha_regression(Y, F)
        res = dg.grs_test(reg.alphas, reg.residuals, F)
        assert res.mean_abs_alpha <= res.rms_alpha <= np.max(np.abs(reg.alphas))
        assert res.mean_abs_alpha_annual == 12 * res.mean_abs_alpha
        assert 0 <= res.p_value <= 1 and res.F_stat >= 0

    def test_power(self):
        Y, F = pricing_case(6, alpha=np.full(10, 0.01))
        reg = dg.ts_alpha_regression(Y, F)
        assert dg.grs_test(reg.alphas, reg.residuals, F).p_value < 1e-6

    def test_singular(self):
        Y, F = pricing_case(7)
        Y[:, 1] = Y[:, 0]
        reg = dg.ts_alpha_regression(Y, F)
        with pytest.raises(ValueError, match="fewer test assets"):
            dg.grs_test(reg.alphas, reg.residuals, F)

    def test_table(self):
        Y, F = pricing_case(8)
        idx = np.arange(240)
        assets = pd.DataFrame(Y, index=idx)
        factors = pd.DataFrame(F, index=idx, columns=["a", "b", "c"])
        t = dg.grs_table(assets, {"one": factors[["a"]], "three": factors.iloc[10:]})
        assert list(t["model"]) == ["one", "three"]
        assert list(t["n_months"]) == [240, 230]
