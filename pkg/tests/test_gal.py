import inspect
import math

import numpy as np
import pytest

from galprune import gal
from galprune import networks as nw
from galprune import numerics as nx
from galprune.numerics import Tensor

from helpers import FD_TOL, near_kink, numeric_grad, rel_error


def tiny_setup(seed=0, lam=0.05, n_images=64, **overrides):
    spec = nw.build_lenet((3, 4, 8))
    rng = np.random.default_rng(seed)
    w = nw.init_params(spec, rng)
    baseline = nw.make_network(spec, w, trainable=False)
    cfg = gal.TrainConfig(lam=lam, lr=0.001, batch_size=16, seed=seed, **overrides)
    net = nw.attach_masks(spec, ["channel"], np.random.default_rng([seed, 2]), baseline=w, dropout_rate=cfg.dropout)
    D = gal.make_discriminator(spec.classes, cfg)
    images = rng.random((n_images, 1, 28, 28))
    return baseline, net, D, gal.ImageStream(images, cfg.batch_size, seed), cfg


class TestLosses:
    def test_adversarial_examples(self):
        half = np.full(4, 0.5)
        assert float(gal.adversarial_loss(half, half).data) == pytest.approx(2 * math.log(0.5))
        near = float(gal.adversarial_loss(np.ones(4), np.zeros(4)).data)
        assert near <= 0 and near > -1e-6

    def test_adversarial_oracle(self):
        rng = np.random.default_rng(0)
        r, f = rng.uniform(0.01, 0.99, 7), rng.uniform(0.01, 0.99, 7)
        ref = sum(math.log(v) for v in r) / 7 + sum(math.log(1 - v) for v in f) / 7
        assert float(gal.adversarial_loss(r, f).data) == pytest.approx(ref, rel=1e-12)

    def test_adversarial_clamped_finite(self):
        assert math.isfinite(float(gal.adversarial_loss(np.zeros(3), np.ones(3)).data))
        with pytest.raises(nx.ShapeError):
            gal.adversarial_loss(np.full(3, 0.5), np.full(4, 0.5))

    def test_data_loss_examples(self):
        fb = np.eye(3)[:2]
        assert float(gal.data_loss(fb, fb).data) == 0.0
        assert float(gal.data_loss(np.zeros((2, 3)), fb).data) == 0.5
        with pytest.raises(nx.ShapeError):
            gal.data_loss(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_data_loss_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        ref = 0.0
        for n in range(5):
            for k in range(4):
                ref += (a[n, k] - b[n, k]) ** 2
        assert float(gal.data_loss(a, b).data) == pytest.approx(ref / 10, rel=1e-12)

    def test_regularizer_examples(self):
        assert float(gal.d_regularizer("neg-l2", None, [Tensor(np.zeros((2, 2)))]).data) == 0.0
        assert float(gal.d_regularizer("adversarial", np.full(3, 0.5), []).data) == pytest.approx(math.log(0.5))
        assert float(gal.d_regularizer("neg-l1", None, [Tensor([1.0, -2.0])]).data) == -3.0
        with pytest.raises(gal.ConfigError, match="unknown"):
            gal.d_regularizer("l3", None, [])


class TestDiscriminator:
    def test_zero_init_outputs_half(self):
        D = gal.Discriminator(10, init="zeros")
        assert np.all(D(np.random.default_rng(0).standard_normal((5, 10))).data == 0.5)

    def test_output_open_interval(self):
        D = gal.Discriminator(10, np.random.default_rng(0))
        out = D(np.random.default_rng(1).standard_normal((50, 10)) * 100).data
        assert np.all((out > 0) & (out < 1)) or np.all((out >= 0) & (out <= 1))
        assert math.isfinite(float(gal.adversarial_loss(out, out).data))

    def test_width_check(self):
        with pytest.raises(nx.ShapeError):
            gal.Discriminator(10, np.random.default_rng(0))(np.zeros((2, 9)))

    def test_lr_zero_unchanged(self):
        D = gal.Discriminator(10, np.random.default_rng(0))
        before = {k: v.copy() for k, v in D.state_arrays().items()}
        rng = np.random.default_rng(1)
        gal.discriminator_step(D, rng.standard_normal((8, 10)), rng.standard_normal((8, 10)), gal.TrainConfig(), 0.0)
        assert all(np.array_equal(before[k], v) for k, v in D.state_arrays().items())

    @pytest.mark.parametrize("kind", ["neg-l1", "neg-l2", "adversarial"])
    @pytest.mark.parametrize("lr", [1e-4, 1e-5])
    def test_ascent(self, kind, lr):
        rng = np.random.default_rng(2)
        fb, fg = rng.standard_normal((16, 10)) + 1.0, rng.standard_normal((16, 10))
        cfg = gal.TrainConfig(d_regularizer=kind)
        D = gal.Discriminator(10, np.random.default_rng(3))
        before = float(gal.discriminator_objective(D, fb, fg, cfg)[0].data)
        gal.discriminator_step(D, fb, fg, cfg, lr)
        assert float(gal.discriminator_objective(D, fb, fg, cfg)[0].data) >= before

    def test_regularizers_differ_by_their_term(self):
        rng = np.random.default_rng(4)
        fb, fg = rng.standard_normal((8, 10)), rng.standard_normal((8, 10))
        D = gal.Discriminator(10, np.random.default_rng(5))
        totals = {k: gal.discriminator_objective(D, fb, fg, gal.TrainConfig(d_regularizer=k)) for k in
                  ("neg-l1", "neg-l2", "adversarial")}
        adv = float(totals["adversarial"][1].data)
        ar = float(np.mean(np.log(np.clip(D(fg).data, 1e-7, 1 - 1e-7))))
        assert float(totals["adversarial"][0].data) == pytest.approx(adv + ar, abs=1e-12)
        l1 = -sum(np.abs(w.data).sum() for w in D.weights())
        assert float(totals["neg-l1"][0].data) == pytest.approx(adv + l1, abs=1e-9)


class TestGeneratorObjective:
    def test_matching_features_and_half_discriminator(self):
        baseline, net, _, stream, cfg = tiny_setup()
        net.mask.values.data[:] = 1.0
        x = stream.images[:4]
        fb = nw.predict(baseline, x)
        D = gal.Discriminator(10, init="zeros")
        obj, parts = gal.generator_smooth_objective(net, D, fb, x, cfg, None, noise=False)
        expect = math.log(0.5) + 0.5 * cfg.weight_decay * net.weight_sq_norm()
        assert float(obj.data) == pytest.approx(expect, abs=1e-12)
        assert parts["data"] == 0.0

    def test_zero_network(self):
        spec = nw.build_lenet((2, 2, 2))
        net = nw.make_network(spec, {k: np.zeros_like(v) for k, v in nw.init_params(spec, np.random.default_rng(0)).items()})
        D = gal.Discriminator(10, np.random.default_rng(1))
        cfg = gal.TrainConfig(weight_decay=0.0)
        obj, _ = gal.generator_smooth_objective(net, D, np.zeros((3, 10)), np.zeros((3, 1, 28, 28)), cfg, None, noise=False)
        assert float(obj.data) == pytest.approx(math.log(1 - float(D(np.zeros((1, 10))).data[0])), abs=1e-12)

    def test_mask_gradient_finite_differences(self):
        accepted, seed = 0, 0
        while accepted < 50:
            baseline, net, D, stream, cfg = tiny_setup(seed)
            seed += 1
            x = stream.images[:3]
            fb = nw.predict(baseline, x) + 0.3
            pick = np.random.default_rng(seed).choice(len(net.mask), 5, replace=False)
            m0 = net.mask.values.data.copy()

            def f(m):
                net.mask.values.data = m.copy()
                with nx.no_grad():
                    return float(gal.generator_smooth_objective(net, D, fb, x, cfg, None, noise=False)[0].data)

            if near_kink(f, [m0], 0, pick):
                continue
            net.mask.values.data = m0.copy()
            obj, _ = gal.generator_smooth_objective(net, D, fb, x, cfg, None, noise=False)
            nx.backward(obj)
            assert rel_error(net.mask.values.grad[pick], numeric_grad(f, [m0.copy()], 0, only=pick)[pick]) < FD_TOL
            accepted += 1
        assert seed - accepted <= 5

    def test_small_step_does_not_increase_objective(self):
        """Fixed batch, frozen D, fixed dropout draw: one tiny G step lowers H + lam*|m|_1."""
        baseline, net, D, stream, cfg = tiny_setup(3, lam=0.01)
        cfg = gal.TrainConfig(**{**cfg.to_dict(), "lr": 1e-5, "g_update": "alternating"})
        x = stream.images[:16]
        fb = nw.predict(baseline, x)

        def total():
            with nx.no_grad():
                obj, _ = gal.generator_smooth_objective(net, D, fb, Tensor(x), cfg, np.random.default_rng(7))
            return float(obj.data) + cfg.lam * np.abs(net.mask.values.data).sum()

        before = total()
        state = gal.init_state(net, cfg)
        state.rng = np.random.default_rng(7)

        class FixedRng:
            def random(self, shape):
                return np.random.default_rng(7).random(shape)
        state.rng = FixedRng()
        gal._generator_step(net, D, fb, Tensor(x), cfg, state, cfg.lr)
        assert total() <= before


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(lam=-1), dict(d_steps=0), dict(g_steps=0), dict(lr=0),
                                     dict(dropout=1.0), dict(d_regularizer="l3"), dict(mask_optimizer="adam")])
    def test_invariants(self, bad):
        with pytest.raises(gal.ConfigError):
            gal.TrainConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(gal.ConfigError, match="unknown"):
            gal.TrainConfig.from_dict({"lamda": 0.1})

    def test_step_schedule(self):
        cfg = gal.TrainConfig(lr=0.001, lr_decay=0.1, lr_decay_epochs=40)
        assert cfg.eta(0) == 0.001 and cfg.eta(39.9) == 0.001
        assert cfg.eta(40) == pytest.approx(1e-4) and cfg.eta(85) == pytest.approx(1e-5)


class TestTraining:
    def test_no_label_parameter(self):
        params = inspect.signature(gal.train_gal).parameters
        assert not any("label" in p for p in params)
        assert not any("label" in p for p in inspect.signature(gal.ImageStream).parameters)

    def test_zero_iterations_returns_init(self):
        baseline, net, D, stream, cfg = tiny_setup()
        cfg = gal.TrainConfig(**{**cfg.to_dict(), "max_iterations": 0})
        before = net.clone()
        res = gal.train_gal(baseline, net, D, stream, cfg)
        assert res.history == []
        assert np.array_equal(res.mask, before.mask.values.data)
        assert all(np.array_equal(before.params[k].data, p.data) for k, p in res.net.params.items())

    @pytest.mark.parametrize("mode", ["alternating", "joint"])
    def test_large_lambda_zeroes_everything(self, mode):
        baseline, net, D, stream, cfg = tiny_setup(lam=10.0, g_update=mode, epochs=60)
        cfg = gal.TrainConfig(**{**cfg.to_dict(), "lr": 0.001})
        res = gal.train_gal(baseline, net, D, stream, cfg)
        assert np.all(res.mask == 0.0)
        assert res.history[-1]["exact_zero_count"] == len(res.mask)

    def test_lambda_zero_no_zeros(self):
        baseline, net, D, stream, cfg = tiny_setup(lam=0.0, epochs=5)
        res = gal.train_gal(baseline, net, D, stream, cfg)
        assert max(r["exact_zero_count"] for r in res.history) < 0.01 * len(res.mask)

    def test_metrics_rows(self):
        baseline, net, D, stream, cfg = tiny_setup(max_iterations=3)
        res = gal.train_gal(baseline, net, D, stream, cfg)
        assert [r["iteration"] for r in res.history] == [1, 2, 3]
        for r in res.history:
            assert set(r) == set(gal.METRIC_COLUMNS)
            assert r["data"] >= 0 and r["mask_l1"] >= 0 and 0 <= r["d_accuracy"] <= 1

    @pytest.mark.parametrize("mode", ["alternating", "joint"])
    @pytest.mark.parametrize("opt", ["fista", "sgd"])
    def test_deterministic(self, mode, opt):
        runs = []
        for _ in range(2):
            baseline, net, D, stream, cfg = tiny_setup(7, g_update=mode, mask_optimizer=opt, max_iterations=6)
            res = gal.train_gal(baseline, net, D, stream, cfg)
            runs.append((res.mask.tobytes(), [sorted(r.items()) for r in res.history],
                         {k: p.data.tobytes() for k, p in res.net.params.items()}))
        assert runs[0] == runs[1]

    def test_stop_and_continue_equals_straight_run(self):
        a = tiny_setup(4, max_iterations=8)
        full = gal.train_gal(*a)
        b = tiny_setup(4, max_iterations=8)
        part = gal.train_gal(*b, stop_at=3)
        assert part.state.iteration == 3
        rest = gal.train_gal(b[0], part.net, part.D, b[3], b[4], state=part.state)
        assert np.array_equal(rest.mask, full.mask)
        assert rest.history == full.history

    def test_without_gan(self):
        baseline, net, D, stream, cfg = tiny_setup(use_gan=False, max_iterations=4)
        before = D.state_arrays()
        before = {k: v.copy() for k, v in before.items()}
        res = gal.train_gal(baseline, net, D, stream, cfg)
        assert all(r["adversarial"] == 0.0 for r in res.history)
        assert all(np.array_equal(before[k], v) for k, v in res.D.state_arrays().items())

    def test_divergence_guard(self):
        baseline, net, D, stream, cfg = tiny_setup(max_iterations=50)
        cfg = gal.TrainConfig(**{**cfg.to_dict(), "lr": 1e6})
        with pytest.raises(FloatingPointError) as info:
            with np.errstate(all="ignore"):
                gal.train_gal(baseline, net, D, stream, cfg)
        if isinstance(info.value, gal.TrainingDiverged):
            assert "row" in info.value.state

    def test_stream_is_label_free_and_deterministic(self):
        images = np.random.default_rng(0).random((50, 1, 28, 28))
        s1, s2 = gal.ImageStream(images, 16, 3), gal.ImageStream(images, 16, 3)
        assert s1.batches_per_epoch == 3
        for t in (0, 1, 2, 3, 7, 2):
            assert np.array_equal(s1.indices(t), s2.indices(t))
        epoch0 = np.concatenate([s1.indices(t) for t in range(3)])
        assert len(set(epoch0.tolist())) == 48
