import json

import numpy as np
import pytest

import wellcast.model as model_mod
from wellcast.errors import ConfigError, ShapeError, TrainingDivergedError
from wellcast.model import (ModelConfig, ModelWeights, TrainReport, build_model, forward, gradient_check,
                            loss_and_gradients, pre_activation, predict_mc, run_baseline, train)
from wellcast.timeseries import Window, make_windows


def random_windows(n, seed=0, width=36, scale=1.0):
    rng = np.random.default_rng(seed)
    return Window(rng.uniform(-scale, 1 + scale, (n, width)), rng.uniform(-scale, 1 + scale, (n, width, 4)),
                  rng.uniform(0, 1, (n, width)))


def logit(y):
    return np.log(y) - np.log1p(-y)


class TestConfig:
    def test_defaults(self):
        c = ModelConfig()
        assert (c.lstm_layers, c.lstm_units, c.dense_units, c.window) == (2, 64, 32, 36)
        assert c.input_noise_sigma == 0.1 and c.learning_rate == 1e-3 and c.clip_norm == 1.0

    @pytest.mark.parametrize("field,value", [("lstm_layers", 0), ("lstm_units", 0), ("window", 0),
                                             ("input_noise_sigma", -0.1), ("epochs", -1)])
    def test_invalid(self, field, value):
        with pytest.raises(ConfigError, match=field):
            ModelConfig(**{field: value})

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="bogus"):
            ModelConfig.from_dict({"bogus": 1})


class TestBuild:
    def test_deterministic(self, small_config):
        a = build_model(small_config, np.random.default_rng(1))
        b = build_model(small_config, np.random.default_rng(1))
        assert a.equals(b)

    def test_init_scheme(self):
        w = build_model(ModelConfig(), np.random.default_rng(0))
        H = 64
        Wh = w.params["lstm0.Wh"]
        assert Wh.shape == (H, 4 * H)
        np.testing.assert_allclose(Wh @ Wh.T, np.eye(H), atol=1e-12)
        b = w.params["lstm1.b"]
        assert np.all(b[H:2 * H] == 1.0) and np.all(b[:H] == 0) and np.all(b[2 * H:] == 0)
        assert np.all(w.params["prelu.alpha"] == 0.25)
        assert w.w_bias == 0.0

    def test_default_output_in_unit_interval(self):
        w = build_model(ModelConfig(), np.random.default_rng(0))
        y = forward(random_windows(200, scale=5.0), w)
        assert np.all((y > 0) & (y < 1))


class TestForward:
    def test_scalar_window(self, small_model):
        win = random_windows(1)
        single = Window(win.q_hist[0], win.theta_hist[0], win.u_hist[0])
        y = forward(single, small_model)
        assert isinstance(y, float)
        assert y == forward(win, small_model)[0]

    def test_pure(self, small_model):
        before = small_model.copy()
        win = random_windows(10)
        a = forward(win, small_model, w_bias=np.linspace(-1, 1, 10))
        b = forward(win, small_model, w_bias=np.linspace(-1, 1, 10))
        np.testing.assert_array_equal(a, b)
        assert small_model.equals(before)

    def test_fast_path_matches_reference(self, small_model):
        win = random_windows(7, seed=4)
        pre, _ = model_mod._forward_core(small_model.params, win.q_hist, win.theta_hist, win.u_hist,
                                         small_model.config.lstm_layers, None)
        ref = pre + small_model.w_bias
        np.testing.assert_allclose(pre_activation(win, small_model), ref, rtol=0, atol=1e-13)

    def test_float32_close(self):
        w = build_model(ModelConfig(), np.random.default_rng(2))
        win = random_windows(50, seed=5)
        np.testing.assert_allclose(forward(win, w, dtype=np.float32), forward(win, w), atol=1e-5)

    def test_shared_inputs_broadcast(self, small_model):
        win = random_windows(5)
        shared = Window(win.q_hist, win.theta_hist[0], win.u_hist[0])
        full = Window(win.q_hist, np.broadcast_to(win.theta_hist[0], win.theta_hist.shape),
                      np.broadcast_to(win.u_hist[0], win.u_hist.shape))
        np.testing.assert_allclose(forward(shared, small_model), forward(full, small_model), atol=1e-15)

    def test_shape_mismatch(self, small_model):
        win = random_windows(2, width=35)
        with pytest.raises(ShapeError):
            forward(win, small_model)

    def test_bias_monotone(self, small_model):
        win = random_windows(100, seed=8)
        lo = forward(win, small_model, w_bias=-0.2)
        hi = forward(win, small_model, w_bias=-0.2 + 1e-3)
        assert np.all(hi > lo)

    def test_bias_enters_linearly(self, small_model):
        win = random_windows(100, seed=9)
        a = pre_activation(win, small_model, w_bias=0.3)
        b = pre_activation(win, small_model, w_bias=0.3 + 0.25)
        np.testing.assert_allclose(b - a, 0.25, atol=1e-14)
        ya = forward(win, small_model, w_bias=0.3)
        yb = forward(win, small_model, w_bias=0.55)
        np.testing.assert_allclose(logit(yb) - logit(ya), 0.25, atol=1e-9)

    def test_w_bias_roundtrip(self, small_model):
        w = small_model.copy()
        for v in (0.1, -3.7e-5, 0.2**0.5):
            w.w_bias = v
            assert w.w_bias == v

    def test_w_bias_write_refreshes_cache(self, small_model):
        w = small_model.copy()
        win = random_windows(3)
        forward(win, w)
        w.w_bias = 2.0
        np.testing.assert_array_equal(forward(win, w), forward(win, small_model, w_bias=2.0))


class TestSerialization:
    def test_roundtrip(self, tmp_path, small_model, norm):
        small_model.normalizer = norm
        small_model.save(tmp_path / "w.json")
        back = ModelWeights.load(tmp_path / "w.json")
        assert back.equals(small_model) and back.config == small_model.config
        np.testing.assert_array_equal(back.normalizer.offset, norm.offset)
        d = json.loads((tmp_path / "w.json").read_text())
        assert d["schema_version"] == 1
        assert d["tensors"]["lstm0.Wx"]["shape"] == [6, 24]

    def test_bad_version(self, small_model):
        d = small_model.to_dict()
        d["schema_version"] = 99
        with pytest.raises(ConfigError, match="schema_version"):
            ModelWeights.from_dict(d)

    def test_bad_shape(self, small_model):
        d = small_model.to_dict()
        d["tensors"]["dense1.b"] = {"shape": [3], "data": [0, 0, 0]}
        with pytest.raises(ShapeError, match="dense1.b"):
            ModelWeights.from_dict(d)


class TestGradients:
    def test_finite_differences(self, small_model):
        rng = np.random.default_rng(0)
        for k in range(3):
            win = random_windows(4, seed=k)
            batch = Window(win.q_hist, win.theta_hist, win.u_hist, rng.uniform(0, 1, 4))
            rep = gradient_check(small_model, batch, n_params=100, rng=rng)
            assert rep.n_checked == 100
            assert rep.passed, rep

    def test_corrupted_gradient_flagged(self, small_model):
        win = random_windows(1)
        batch = Window(win.q_hist[0], win.theta_hist[0], win.u_hist[0], 0.7)

        def corrupted(weights, window):
            loss, g = loss_and_gradients(weights, window)
            g = dict(g)
            g["lstm0.Wh"] = g["lstm0.Wh"] * 1.1
            g["dense1.W"] = -g["dense1.W"]
            return loss, g

        rep = gradient_check(small_model, batch, n_params=small_model.n_params(), grad_fn=corrupted)
        assert rep.max_rel_error > 1e-2 and not rep.passed

    def test_zero_inputs_and_weights(self, small_model):
        w = small_model.copy()
        for k in w.params:
            w.params[k] = np.zeros_like(w.params[k])
        w.invalidate()
        win = Window(np.zeros((2, 36)), np.zeros((2, 36, 4)), np.zeros((2, 36)), np.zeros(2))
        loss, g = loss_and_gradients(w, win)
        assert np.isfinite(loss) and all(np.all(np.isfinite(v)) for v in g.values())
        assert gradient_check(w, win).passed


def _constant_batch(n=64, value=0.6, seed=0):
    rng = np.random.default_rng(seed)
    return Window(rng.uniform(0, 1, (n, 36)), rng.uniform(0, 1, (n, 36, 4)), rng.uniform(0, 1, (n, 36)),
                  np.full(n, value))


class _Batch:
    """Minimal WindowBatch stand-in over in-memory arrays."""

    def __init__(self, win):
        self.win = win

    def __len__(self):
        return len(self.win.target)

    def __getitem__(self, idx):
        w = self.win
        return _Batch(Window(w.q_hist[idx], w.theta_hist[idx], w.u_hist[idx], w.target[idx]))

    q_hist = property(lambda self: self.win.q_hist)
    theta_hist = property(lambda self: self.win.theta_hist)
    u_hist = property(lambda self: self.win.u_hist)
    target = property(lambda self: self.win.target)


class TestTrain:
    def test_zero_epochs(self, small_model, small_config, nseries):
        data = make_windows(nseries)
        cfg = ModelConfig(**{**small_config.__dict__, "epochs": 0})
        out, rep = train(small_model, data, data, cfg)
        assert out.equals(small_model) and len(rep) == 0

    def test_constant_target(self):
        cfg = ModelConfig(lstm_units=8, dense_units=4, epochs=200, batch_size=64, input_noise_sigma=0.0)
        w0 = build_model(cfg, np.random.default_rng(0))
        batch = _Batch(_constant_batch())
        w, rep = train(w0, batch, batch, cfg)
        assert len(rep) == 200
        assert rep.val_loss[-1] < 1e-3

    def test_descent_and_reproducible(self, small_model, small_config, nseries):
        data = make_windows(nseries.slice(0, 300))
        val = make_windows(nseries.slice(300, None))
        cfg = ModelConfig(**{**small_config.__dict__, "epochs": 3})
        a, ra = train(small_model, data, val, cfg)
        b, rb = train(small_model, data, val, cfg)
        assert a.equals(b) and ra.train_loss == rb.train_loss
        assert ra.train_loss[-1] <= ra.train_loss[0]
        assert not a.equals(small_model)
        assert all(np.isfinite(ra.train_loss + ra.val_loss))

    def test_divergence_reports_epoch(self, small_model, small_config, nseries, monkeypatch):
        data = make_windows(nseries)

        def nan_loss(*args):
            return float("nan"), {}

        monkeypatch.setattr(model_mod, "_loss_and_grads", nan_loss)
        with pytest.raises(TrainingDivergedError) as info:
            train(small_model, data, data, small_config)
        assert info.value.epoch == 1

    def test_report_csv(self, tmp_path):
        rep = TrainReport([0.5, 0.25], [0.4, 0.2])
        rep.to_csv(tmp_path / "loss.csv")
        assert (tmp_path / "loss.csv").read_text().splitlines() == [
            "epoch,train_loss,val_loss", "1,0.5,0.4", "2,0.25,0.2"]


class TestMonteCarlo:
    def test_zero_sigma_identical(self, small_model, nseries, norm):
        win = make_windows(nseries)[0]
        y = predict_mc(win, small_model, norm.with_sigma(np.zeros(6)), 50, np.random.default_rng(0))
        assert np.all(y == y[0])

    def test_n_too_small(self, small_model, nseries, norm):
        with pytest.raises(ConfigError):
            predict_mc(make_windows(nseries)[0], small_model, norm, 1, np.random.default_rng(0))

    def test_spread_grows_with_noise(self, nseries, norm):
        w = build_model(ModelConfig(), np.random.default_rng(1))
        win = make_windows(nseries)[10]
        sd1 = predict_mc(win, w, norm, 1000, np.random.default_rng(0)).std(ddof=1)
        sd10 = predict_mc(win, w, norm.with_sigma(norm.sigma_scaled * 10), 1000, np.random.default_rng(0)).std(ddof=1)
        assert sd10 > sd1 > 0

    def test_reproducible(self, small_model, nseries, norm):
        win = make_windows(nseries)[0]
        a = predict_mc(win, small_model, norm, 20, np.random.default_rng(4))
        b = predict_mc(win, small_model, norm, 20, np.random.default_rng(4))
        np.testing.assert_array_equal(a, b)

    def test_baseline_trace(self, small_model, nseries, norm):
        part = nseries.slice(0, 60)
        tr = run_baseline(part, small_model, norm, 30, np.random.default_rng(0), keep_samples=True)
        assert len(tr) == 24 and tr.samples.shape == (24, 30)
        np.testing.assert_array_equal(tr.measurement, part.flow[36:])
        assert np.all(tr.prior_sigma > 0)
        zero = run_baseline(part, small_model, norm.with_sigma(np.zeros(6)), 30, np.random.default_rng(0))
        assert np.all(zero.prior_sigma == 0.0)


def test_output_nonnegative_after_denormalization(small_model, norm):
    from wellcast.timeseries import denormalize_flow

    y = forward(random_windows(500, seed=3, scale=10.0), small_model, w_bias=np.linspace(-30, 30, 500))
    assert np.all(denormalize_flow(y, norm) >= 0)
