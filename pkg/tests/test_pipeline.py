import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from cbapm import macro_encoder as me
from cbapm import model as cm
from cbapm import pipeline as pl
from cbapm import synth
from cbapm.panel_data import MacroMatrix, fit_minmax

TINY = synth.SynthConfig(n_firms=30, n_months=84, n_characteristics=6, macro_dim=5, seed=2)
MODEL = cm.ModelConfig(hidden=(8, 8), batch_size=128, lr=3e-3, dropout=0.1, max_epochs=4, ensemble_size=2)
AE = me.AutoencoderConfig(hidden=(8, 6), batch_size=8, lr=1e-3, early_stop_patience=5, max_epochs=10, dropout=0.0)


def config(**kw):
    base = dict(
        lambdas=(0.0, 0.5), horizons=(1, 12), first_train_end=23, compressor=me.CompressorChoice("autoencoder", 3),
        autoencoder=AE, model=MODEL,
    )
    return pl.PipelineConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def data():
    return synth.generate(TINY)


@pytest.fixture(scope="module")
def result(data):
    panel, macro, truth = data
    return pl.run(panel, truth.meta, macro, config())


class TestWindows:
    def test_sample_start_after_longest_lag(self, data):
        panel, _, truth = data
        lagged = pl.prepare(panel, truth.meta)
        assert lagged.start == 0
        assert lagged.panel.months.min() == 0

    def test_window_count(self, result):
        assert [w.window.index for w in result.windows] == [0, 1]
        assert result.windows[-1].window.test_end == 71

    def test_features(self, result):
        wd = result.windows[0]
        assert wd.features[: len(wd.characteristics)] == wd.characteristics
        assert wd.features[-3:] == ["z1", "z2", "z3"]
        assert wd.test["month"].between(*wd.window.test).all()
        assert wd.fit["month"].max() == wd.window.val_end

    def test_rank_range(self, result):
        wd = result.windows[0]
        vals = wd.fit[wd.characteristics + [f"c_{j}" for j in range(1, 10)]].to_numpy()
        assert np.all((vals >= -1) & (vals <= 1))


class TestPredictions:
    def test_columns(self, result):
        p = result.predictions
        for col in ["firm_id", "month", "window", "lambda", "h", "r_hat", "c_hat_1", "c_hat_9", "r", "c_9", "size", "ret_1"]:
            assert col in p.columns
        assert set(p["lambda"]) == {0.0, 0.5} and set(p["h"]) == {1, 12}

    def test_every_test_firm_month(self, result):
        p = result.predictions
        for wd in result.windows:
            sub = p[(p["window"] == wd.window.index) & (p["lambda"] == 0.5) & (p["h"] == 12)]
            assert len(sub) == len(wd.test)

    def test_train_rows_need_target(self, result):
        wd = result.windows[0]
        td = pl.train_data(wd, 12)
        assert np.all(np.isfinite(td.R)) and np.all(np.isfinite(td.R_val))

    def test_consensus_only(self, data):
        panel, macro, truth = data
        res = pl.run(panel, truth.meta, macro, config(lambdas=(math.inf,), horizons=(12,), max_windows=1))
        assert res.outcomes[0].ensemble.lam == math.inf


def mutate_from(panel, macro, start):
    rng = np.random.default_rng(99)
    df = panel.data.copy()
    rows = df["month"] >= start
    cols = [*panel.characteristics, *panel.consensus, panel.size, *panel.returns.values()]
    df.loc[rows, cols] = rng.uniform(0.5, 2.0, (rows.sum(), len(cols)))
    values = macro.values.copy()
    values[macro.months >= start] = rng.normal(size=((macro.months >= start).sum(), macro.dim)) * 100
    return panel.with_data(df), MacroMatrix(macro.months.copy(), values, list(macro.names))


class TestLeakage:
    @pytest.mark.parametrize("kind", ["autoencoder", "pca"])
    def test_test_rows_do_not_move_fits(self, data, kind):
        panel, macro, truth = data
        cfg = config(horizons=(12,), max_windows=1, compressor=me.CompressorChoice(kind, 3))
        base = pl.run(panel, truth.meta, macro, cfg)
        test_start = base.windows[0].window.test[0]
        p2, m2 = mutate_from(panel, macro, test_start)
        moved = pl.run(p2, truth.meta, m2, cfg)
        for a, b in zip(base.outcomes, moved.outcomes):
            for ma, mb in zip(a.ensemble.members, b.ensemble.members):
                for k in ma.params:
                    assert_array_equal(ma.params[k], mb.params[k])
        ca, cb = base.windows[0].compressor.model, moved.windows[0].compressor.model
        if kind == "pca":
            assert_array_equal(ca.components, cb.components)
        else:
            for k in ca.params:
                assert_array_equal(ca.params[k], cb.params[k])

    def test_minmax_bounds_from_training_range(self, data):
        panel, macro, truth = data
        cfg = config(horizons=(12,), max_windows=1, compressor=me.CompressorChoice("none"))
        res = pl.run(panel, truth.meta, macro, cfg)
        wd = res.windows[0]
        train_end = wd.window.train_end
        scaler = fit_minmax(macro, (0, train_end))
        scaled = scaler.transform(macro.values)
        first = wd.fit[wd.fit["month"] == 5].iloc[0]
        assert_array_equal(first[[f"z{j + 1}" for j in range(macro.dim)]].to_numpy(dtype=float), scaled[5])
        train_rows = scaled[: train_end + 1]
        assert np.all(train_rows.min(axis=0) == -1.0) and np.all(train_rows.max(axis=0) == 1.0)


class TestDeterminism:
    def test_rerun_identical(self, data, result):
        panel, macro, truth = data
        again = pl.run(panel, truth.meta, macro, config())
        a, b = result.predictions, again.predictions
        assert a.equals(b)
