import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from cbapm import diagnostics as dg
from cbapm import model as cm
from cbapm import synth
from cbapm import tensor_core as tc
from cbapm.panel_data import describe_variables, lag_characteristics, load_macro, load_panel, load_schema

SMALL = synth.SynthConfig(n_firms=30, n_months=60, n_characteristics=8, macro_dim=6, seed=3)


@pytest.fixture(scope="module")
def small():
    return synth.generate(SMALL)


class TestGenerate:
    def test_same_seed_identical(self, small):
        again = synth.generate(SMALL)
        pd.testing.assert_frame_equal(small[0].data, again[0].data)
        assert_array_equal(small[1].values, again[1].values)

    def test_other_seed_differs(self, small):
        other = synth.generate(synth.SynthConfig(**{**SMALL.__dict__, "seed": 4}))
        assert not np.allclose(small[1].values, other[1].values)

    def test_shapes(self, small):
        panel, macro, truth = small
        assert macro.values.shape == (60, 6)
        assert len(truth.frame) == 30 * 60
        assert len(panel.characteristics) == 8 and len(panel.consensus) == 9
        assert panel.data[panel.size].dropna().gt(0).all()

    def test_lag_restores_alignment(self, small):
        panel, _, truth = small
        meta = describe_variables(panel, truth.meta)
        lagged = lag_characteristics(panel, meta).slice_months(0, None)
        merged = lagged.data.merge(truth.frame, on=["firm_id", "month"], suffixes=("", "_true"))
        assert len(merged) == 30 * 60
        for name in truth.characteristics:
            assert_array_equal(merged[name], merged[f"{name}_true"])

    def test_mixed_frequencies(self, small):
        freqs = {m.frequency for m in small[2].meta if m.role == "characteristic"}
        assert freqs == {"monthly", "quarterly", "annual"}

    def test_return_availability(self, small):
        panel = small[0]
        df = panel.data[panel.data["month"] >= 0]
        for h, col in panel.returns.items():
            assert df.loc[df["month"] + h <= 59, col].notna().all()
            assert df.loc[df["month"] + h > 59, col].isna().all()

    def test_noiseless_identification(self):
        cfg = synth.SynthConfig(**{**SMALL.__dict__, "sigma_c": 0.0, "sigma_r": 0.0})
        panel, _, truth = synth.generate(cfg)
        frame = truth.frame.merge(panel.data[["firm_id", "month", "ret_12"]], on=["firm_id", "month"]).dropna()
        C = frame[[f"c_{j + 1}" for j in range(9)]].to_numpy()
        res = dg.pooled_ols(frame["ret_12"], C)
        assert np.max(np.abs(res.coef[1:] - truth.b_star)) < 1e-6
        assert abs(res.coef[0]) < 1e-6

    def test_exchangeable(self, small):
        panel, _, truth = small
        perm = np.random.default_rng(0).permutation(30)
        rename = {f"F{i:04d}": f"F{j:04d}" for i, j in enumerate(perm)}
        shuffled = panel.data.assign(firm_id=panel.data["firm_id"].map(rename))
        cols = panel.characteristics + panel.consensus + [panel.size, *panel.returns.values()]
        a = panel.data.groupby("month")[cols].agg(["mean", "std"])
        b = shuffled.groupby("month")[cols].agg(["mean", "std"])
        pd.testing.assert_frame_equal(a, b, rtol=1e-12)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            synth.SynthConfig(n_firms=0)
        with pytest.raises(ValueError):
            synth.SynthConfig(sigma_r=-1.0)

    def test_linear_head_recovers_pricing_vector(self):
        cfg = synth.SynthConfig(**{**SMALL.__dict__, "sigma_r": 0.0})
        panel, _, truth = synth.generate(cfg)
        frame = truth.frame.merge(panel.data[["firm_id", "month", "ret_12"]], on=["firm_id", "month"]).dropna()
        C = frame[[f"c_{j + 1}" for j in range(9)]].to_numpy()
        R = frame["ret_12"].to_numpy()
        # with the true consensus at the bottleneck the head is a linear regression
        W, b = np.zeros((1, 9)), np.zeros(1)
        params = {cm.HEAD_W: W, cm.HEAD_B: b}
        state = tc.AdamState(lr=1e-2)
        for _ in range(3000):
            err = C @ params[cm.HEAD_W][0] + params[cm.HEAD_B][0] - R
            grads = {cm.HEAD_W: (2 * err @ C / len(R))[None, :], cm.HEAD_B: np.array([2 * err.mean()])}
            tc.adam_step(params, grads, state)
        assert np.max(np.abs(params[cm.HEAD_W][0] - truth.b_star)) < 1e-3


class TestMissingness:
    def test_rate_zero(self, small):
        out = synth.inject_missingness(small[0], 0.0)
        pd.testing.assert_frame_equal(out.data, small[0].data)

    def test_mcar_rate(self):
        panel, _, _ = synth.generate(synth.SynthConfig(n_firms=100, n_months=100, n_characteristics=2, macro_dim=3))
        var = panel.characteristics[0]
        base = panel.data[var].isna()
        out = synth.inject_missingness(panel, {var: 0.2}, rng=np.random.default_rng(0))
        hit = out.data[var].isna() & ~base
        frac = hit.sum() / (~base).sum()
        assert abs(frac - 0.2) <= 0.02
        assert out.data[panel.characteristics[1]].isna().sum() == panel.data[panel.characteristics[1]].isna().sum()

    def test_input_untouched(self, small):
        before = small[0].data.copy()
        synth.inject_missingness(small[0], 0.3)
        pd.testing.assert_frame_equal(small[0].data, before)

    def test_block_contiguous(self, small):
        panel = small[0]
        var = panel.consensus[0]
        out = synth.inject_missingness(panel, {var: 0.25}, pattern="block", rng=np.random.default_rng(1))
        added = (out.data[var].isna() & panel.data[var].notna()).to_numpy()
        for idx in out.data.groupby("firm_id").indices.values():
            run = np.flatnonzero(added[idx])
            assert len(run) > 0
            assert run[-1] - run[0] + 1 == len(run)


    def test_bad_rate(self, small):
        with pytest.raises(ValueError):
            synth.inject_missingness(small[0], 1.0)
        with pytest.raises(ValueError):
            synth.inject_missingness(small[0], {"nope": 0.1})


class TestFiles:
    def test_csv_roundtrip(self, tmp_path):
        paths = synth.write_synthetic(tmp_path, SMALL)
        schema = load_schema(paths["schema"])
        panel = load_panel(paths["panel"], schema)
        macro = load_macro(paths["macro"])
        ref, ref_macro, _ = synth.generate(SMALL)
        assert_allclose(panel.data[ref.characteristics].to_numpy(), ref.data[ref.characteristics].to_numpy(), rtol=0, atol=0)
        assert_array_equal(macro.values, ref_macro.values)
        factors = pd.read_csv(paths["factors"])
        assets = pd.read_csv(paths["test_assets"])
        assert list(factors.columns) == ["date", "MKT", "SMB", "XS"]
        assert assets.shape[1] == 11
