import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from cbapm import model as cm
from cbapm import tensor_core as tc
from oracles import central_diff, scaled_err


def random_case(seed, n=None, lam=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 9))
    d_in = int(rng.integers(2, 9))
    hidden = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
    cfg = cm.ModelConfig(hidden=hidden, dropout=0.0)
    lam = float(rng.uniform(0, 2)) if lam is None else lam
    model = cm.init_model(d_in, lam, 12, cfg, tc.make_rng(seed))
    for k in model.params:
        model.params[k] = model.params[k] + 0.2 * rng.normal(size=model.params[k].shape)
    X = rng.normal(size=(n, d_in))
    C = rng.normal(size=(n, 9))
    R = rng.normal(size=n)
    return model, X, C, R


def gradient_errors(model, X, C, R):
    _, _, _, grads = cm.loss_and_grads(model, X, C, R)
    errs = {}
    for k, p in model.params.items():
        fd = central_diff(lambda: cm.joint_loss(model, X, C, R)[0], p, h=1e-5)
        errs[k] = scaled_err(grads.get(k, np.zeros_like(p)), fd)
    return errs


class TestForward:
    def test_zero_head_returns_bias(self):
        model, X, *_ = random_case(0)
        model.params[cm.HEAD_W][:] = 0.0
        model.params[cm.HEAD_B][:] = 0.7
        assert_array_equal(cm.forward(model, X)[1], np.full(len(X), 0.7))

    def test_head_is_affine(self):
        model, X, *_ = random_case(1)
        c, r = cm.forward(model, X)
        delta = np.random.default_rng(0).normal(size=c.shape)
        assert_allclose(cm.head(model, c + delta) - r, delta @ model.params[cm.HEAD_W][0], atol=1e-12)

    def test_composition(self):
        model, X, *_ = random_case(2)
        c, r = cm.forward(model, X)
        c2, _ = model.consensus_net.forward(model.params, X)
        assert_allclose(r, c2 @ model.params[cm.HEAD_W][0] + model.params[cm.HEAD_B][0], atol=1e-12)

    def test_single_vector(self):
        model, X, *_ = random_case(3)
        c, r = cm.forward(model, X[0])
        assert c.shape == (9,) and np.ndim(r) == 0

    def test_length_mismatch(self):
        model, X, *_ = random_case(4)
        with pytest.raises(ValueError):
            cm.forward(model, np.zeros((2, model.input_dim + 1)))

    def test_bottleneck_sufficiency(self):
        model, X, *_ = random_case(5)
        c, _ = cm.forward(model, X)
        other = np.random.default_rng(1).normal(size=X.shape)
        c_other, r_other = cm.forward(model, other)
        # injecting the same consensus values gives the same forecast regardless of inputs
        assert_array_equal(cm.head(model, c), cm.head(model, c.copy()))
        assert_allclose(cm.head(model, c_other), r_other, atol=1e-15)

    def test_default_architecture(self):
        model = cm.init_model(146, 0.3, 12, cm.ModelConfig(), tc.make_rng(0))
        assert model.consensus_net.sizes == (146, 64, 32, 9)
        assert model.params[cm.HEAD_W].shape == (1, 9)


class TestLoss:
    def test_perfect(self):
        model, X, *_ = random_case(6)
        c, r = cm.forward(model, X)
        L, L_R, L_C = cm.joint_loss(model, X, c, r, 0.5)
        assert L == 0.0 and L_R == 0.0 and np.all(L_C == 0.0)

    def test_lambda_zero_is_return_loss(self):
        model, X, C, R = random_case(7)
        L, L_R, _ = cm.joint_loss(model, X, C, R, 0.0)
        assert L == L_R

    def test_hand_arithmetic(self):
        model, X, *_ = random_case(8, n=1)
        c, r = cm.forward(model, X)
        L, L_R, L_C = cm.joint_loss(model, X, c - 0.2, r - 0.1, 0.5)
        assert abs(L_R - 0.01) < 1e-15
        assert_allclose(L_C, 0.04, atol=1e-15)
        assert abs(L - 0.19) < 1e-14

    def test_affine_in_lambda(self):
        model, X, C, R = random_case(9)
        _, L_R, L_C = cm.joint_loss(model, X, C, R, 0.0)
        for lam in (0.1, 0.7, 3.0):
            L, _, _ = cm.joint_loss(model, X, C, R, lam)
            assert abs(L - (L_R + lam * L_C.sum())) <= 1e-12

    def test_consensus_only(self):
        model, X, C, R = random_case(10, lam=math.inf)
        L, _, L_C = cm.joint_loss(model, X, C, R)
        assert L == L_C.sum()

    def test_non_finite_target(self):
        model, X, C, R = random_case(11)
        R[0] = np.nan
        with pytest.raises(ValueError):
            cm.joint_loss(model, X, C, R)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            cm.check_lambda(-0.1)


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        model, X, C, R = random_case(seed)
        errs = gradient_errors(model, X, C, R)
        assert max(errs.values()) < 1e-4, errs

    def test_consensus_only_finite_differences(self):
        model, X, C, R = random_case(3, lam=math.inf)
        errs = gradient_errors(model, X, C, R)
        assert max(v for k, v in errs.items() if not k.startswith("head")) < 1e-4
        _, _, _, grads = cm.loss_and_grads(model, X, C, R)
        assert cm.HEAD_W not in grads

    @pytest.mark.parametrize("seed", range(5))
    def test_head_gradient_independent_of_lambda(self, seed):
        model, X, C, R = random_case(seed)
        g = [cm.loss_and_grads(model, X, C, R, lam)[3] for lam in (0.0, 0.4, 2.5)]
        for k in (cm.HEAD_W, cm.HEAD_B):
            assert_array_equal(g[0][k], g[1][k])
            assert_array_equal(g[0][k], g[2][k])

    @pytest.mark.parametrize("seed", range(5))
    def test_lambda_zero_equals_return_model(self, seed):
        model, X, C, R = random_case(seed)
        _, _, _, joint = cm.loss_and_grads(model, X, C, R, 0.0)
        _, pure = cm.return_loss_grads(model, X, R)
        assert set(joint) == set(pure)
        for k in joint:
            assert_allclose(joint[k], pure[k], rtol=0, atol=1e-12)


def toy_data(seed=0, n=600, d=6):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, d))
    W = rng.normal(size=(d, 9))
    C = np.tanh(X @ W / 2)
    R = C @ rng.normal(size=9) * 0.1 + 0.02 * rng.normal(size=n)
    cut = int(0.8 * n)
    return cm.TrainData(X[:cut], C[:cut], R[:cut], X[cut:], C[cut:], R[cut:])


FAST = cm.ModelConfig(hidden=(16, 8), batch_size=64, lr=3e-3, dropout=0.1, max_epochs=40, ensemble_size=2)


class TestTrain:
    def test_deterministic(self):
        data = toy_data()
        a = cm.train(data, 0.5, 12, FAST, seed=3).model
        b = cm.train(data, 0.5, 12, FAST, seed=3).model
        for k in a.params:
            assert_array_equal(a.params[k], b.params[k])

    def test_best_checkpoint_sequence(self):
        res = cm.train(toy_data(), 0.5, 12, FAST, seed=1)
        assert np.all(np.diff(res.best_val_sequence) < 0)
        best = min(r.val_loss for r in res.history)
        data = toy_data()
        assert cm.joint_loss(res.model, data.X_val, data.C_val, data.R_val)[0] == best

    def test_consensus_loss_halved(self):
        data = toy_data()
        untrained = cm.init_model(data.X.shape[1], 0.5, 12, FAST, tc.make_rng(5))
        base = cm.joint_loss(untrained, data.X_val, data.C_val, data.R_val)[2].sum()
        trained = cm.train(data, 0.5, 12, FAST, seed=5).model
        assert cm.joint_loss(trained, data.X_val, data.C_val, data.R_val)[2].sum() <= 0.5 * base

    def test_insample_trace(self):
        res = cm.train(toy_data(), 0.0, 12, FAST, seed=2, record_insample=True)
        assert len(res.history) == res.history[-1].epoch
        assert all(np.isfinite(r.train_mean_L_C) for r in res.history)

    def test_consensus_only_leaves_head(self):
        data = toy_data()
        res = cm.train(data, math.inf, 12, FAST, seed=4)
        init = cm.init_model(data.X.shape[1], math.inf, 12, FAST, tc.make_rng(4))
        assert_array_equal(res.model.params[cm.HEAD_W], init.params[cm.HEAD_W])

    def test_empty(self):
        with pytest.raises(ValueError, match="empty training"):
            cm.TrainData(np.zeros((0, 3)), np.zeros((0, 9)), np.zeros(0), np.zeros((2, 3)), np.zeros((2, 9)), np.zeros(2))

    def test_checkpoint_roundtrip(self, tmp_path):
        model = cm.train(toy_data(), math.inf, 12, FAST, seed=0).model
        model.save(tmp_path / "m.json", seed=0)
        back = cm.CbapmModel.load(tmp_path / "m.json")
        assert math.isinf(back.lam)
        X = toy_data().X_val
        assert_array_equal(cm.forward(back, X)[1], cm.forward(model, X)[1])


@pytest.fixture(scope="module")
def members():
    return cm.train_ensemble(toy_data(), 0.3, 12, FAST, base_seed=10)[0].members


class TestEnsemble:
    def test_single_member(self, members):
        X = toy_data().X_val
        c, r = cm.ensemble_predict(cm.Ensemble(members[:1]), X)
        c1, r1 = cm.forward(members[0], X)
        assert_array_equal(c, c1)
        assert_array_equal(r, r1)

    def test_mean(self):
        a, X, *_ = random_case(0)
        b = cm.CbapmModel(a.input_dim, {k: v.copy() for k, v in a.params.items()}, a.lam, a.horizon, a.hidden)
        a.params[cm.HEAD_W][:] = 0
        b.params[cm.HEAD_W][:] = 0
        a.params[cm.HEAD_B][:] = 0.1
        b.params[cm.HEAD_B][:] = 0.3
        assert_allclose(cm.ensemble_predict(cm.Ensemble([a, b]), X)[1], 0.2)

    def test_permutation(self, members):
        X = toy_data().X_val
        three = members + [cm.train(toy_data(), 0.3, 12, FAST, seed=99).model]
        c1, r1 = cm.ensemble_predict(cm.Ensemble(three), X)
        c2, r2 = cm.ensemble_predict(cm.Ensemble(three[::-1]), X)
        assert_array_equal(c1, c2)
        assert_array_equal(r1, r2)

    def test_coefficients(self, members):
        w, b = cm.extract_prediction_coefficients(cm.Ensemble(members))
        ws = [cm.extract_prediction_coefficients(m)[0] for m in members]
        assert_allclose(w, np.mean(ws, axis=0), atol=1e-15)
        m = members[0]
        X = toy_data().X_val
        w0, b0 = cm.extract_prediction_coefficients(m)
        c, r = cm.forward(m, X)
        assert_allclose(c @ w0 + b0, r, atol=1e-12)

    def test_member_seeds(self):
        assert cm.member_seeds(7, 3) == [7, 8, 9]

    def test_mixed_lambda_rejected(self, members):
        other = cm.train(toy_data(), 0.9, 12, FAST, seed=0).model
        with pytest.raises(ValueError):
            cm.Ensemble([members[0], other])
