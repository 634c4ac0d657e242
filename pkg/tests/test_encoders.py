from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sncpd import diffcore as dc
from sncpd.encoders import (BYOLTrainer, EncoderConfig, EncoderModel, TrainConfig, TS2VecTrainer,
                            byol_loss, ema_update, from_bytes, hierarchical_levels, hierarchical_loss,
                            history_csv, instance_loss, load, random_crop_pair, save,
                            sliding_windows, temporal_loss, to_bytes, train)
from sncpd.errors import ContractError, DimensionError, ParseError, TrainingError
from sncpd.specnorm import SNConfig, layer_norms
from sncpd.statistics import cosine_distance

from oracles import (byol_loss_loop, hierarchical_levels_loop, instance_loss_loop, numeric_grad,
                     rel_error, temporal_loss_loop)


def config(**kw):
    base = dict(input_dims=2, hidden_dims=8, output_dims=4, depth=3, dropout=0.0, seed=0)
    base.update(kw)
    return EncoderConfig(**base)


class TestEncoderModel:
    def test_identity_model_passes_input_through(self):
        X = np.random.default_rng(0).standard_normal((2, 7, 3))
        np.testing.assert_array_equal(EncoderModel.identity(3, depth=3).encode_sequence(X), X)

    def test_shapes(self):
        m = EncoderModel(config())
        X = np.zeros((5, 11, 2))
        assert m.encode_sequence(X).shape == (5, 11, 4)
        assert m.encode_vector(X).shape == (5, 4)
        assert m.encode_sequence(X[0]).shape == (11, 4)

    def test_identical_windows_have_zero_distance(self):
        m = EncoderModel(config())
        x = np.random.default_rng(1).standard_normal((1, 9, 2))
        a, b = m.encode_vector(x)[0], m.encode_vector(x.copy())[0]
        np.testing.assert_array_equal(a, b)
        assert cosine_distance(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            EncoderModel(config()).encode_sequence(np.zeros((1, 5, 3)))

    def test_dilations_double(self):
        m = EncoderModel(config(depth=4))
        assert [m.dilation(l) for l in range(4)] == [1, 2, 4, 8]

    def test_sn_cap_holds_at_init(self):
        m = EncoderModel(config(sn=SNConfig(c=0.9), hidden_dims=16, depth=4))
        assert max(layer_norms(m).values()) <= 0.9 * (1 + 1e-4)

    def test_dropout_only_in_training(self):
        m = EncoderModel(config(dropout=0.5))
        X = np.random.default_rng(2).standard_normal((2, 6, 2))
        np.testing.assert_array_equal(m.encode_sequence(X), m.encode_sequence(X))
        a = m.forward_sequence(X, training=True, rng=np.random.default_rng(0)).data
        assert not np.allclose(a, m.encode_sequence(X))

    def test_byol_is_vector_mode(self):
        assert EncoderModel(config(family="byol")).modes == ("vector",)

    def test_copy_is_independent(self):
        m = EncoderModel(config())
        c = m.copy()
        c.params["proj.weight"].data += 1.0
        assert not np.allclose(c.params["proj.weight"].data, m.params["proj.weight"].data)


def as_t(x):
    return dc.Tensor(x)


class TestLosses:
    def test_log3_hand_value(self):
        h = np.full((2, 1, 3), 0.4)
        assert instance_loss(h, h).item() == pytest.approx(math.log(3), abs=1e-14)

    def test_perfect_positive_pair_goes_to_zero(self):
        e = np.eye(2)
        h = 50.0 * np.stack([e[0], e[1]])[:, None, :]
        assert instance_loss(h, h).item() < 1e-10

    @pytest.mark.parametrize("seed", range(4))
    def test_against_scalar_loops(self, seed):
        rng = np.random.default_rng(seed)
        B, T, d = 3, 4, 5
        h, h2 = rng.standard_normal((B, T, d)), rng.standard_normal((B, T, d))
        np.testing.assert_allclose(instance_loss(h, h2).item(), instance_loss_loop(h, h2), rtol=0, atol=1e-10)
        np.testing.assert_allclose(temporal_loss(h, h2).item(), temporal_loss_loop(h, h2), rtol=0, atol=1e-10)
        ours = [t.item() for t in hierarchical_levels(h, h2)]
        np.testing.assert_allclose(ours, hierarchical_levels_loop(h, h2), rtol=0, atol=1e-10)
        np.testing.assert_allclose(hierarchical_loss(h, h2).item(), np.mean(hierarchical_levels_loop(h, h2)),
                                   rtol=0, atol=1e-10)

    def test_level_counts(self):
        h = np.random.default_rng(0).standard_normal((2, 4, 3))
        assert len(hierarchical_levels(h, h)) == 3
        one = h[:, :1]
        levels = hierarchical_levels(one, one)
        assert len(levels) == 1
        assert levels[0].item() == pytest.approx(0.5 * instance_loss(one, one).item())

    def test_larger_window_matches_loop(self):
        rng = np.random.default_rng(11)
        h, h2 = rng.standard_normal((4, 16, 3)), rng.standard_normal((4, 16, 3))
        np.testing.assert_allclose([t.item() for t in hierarchical_levels(h, h2)],
                                   hierarchical_levels_loop(h, h2), rtol=0, atol=1e-10)

    def test_byol_hand_values(self):
        a = np.array([[1.0, 2.0, -1.0]])
        assert byol_loss(a, a).item() == pytest.approx(0.0, abs=1e-15)
        assert byol_loss(a, -a).item() == pytest.approx(4.0)
        assert byol_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 3.0]])).item() == pytest.approx(2.0)

    def test_byol_against_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
        np.testing.assert_allclose(byol_loss(a, b).item(), byol_loss_loop(a, b), rtol=0, atol=1e-10)

    @pytest.mark.parametrize("loss", [instance_loss, temporal_loss, hierarchical_loss, byol_loss])
    def test_gradients_match_finite_differences(self, loss):
        rng = np.random.default_rng(5)
        shape = (3, 4, 3) if loss is not byol_loss else (4, 3)
        h, h2 = rng.standard_normal(shape), rng.standard_normal(shape)
        for which in (0, 1):
            t = dc.Tensor((h, h2)[which].copy(), requires_grad=True)
            args = (t, h2) if which == 0 else (h, t)
            dc.backward(loss(*args), [t])
            num = numeric_grad(lambda a: loss(*((a, h2) if which == 0 else (h, a))).item(), (h, h2)[which])
            assert rel_error(t.grad, num) < 1e-4

    def test_model_gradient_matches_finite_differences(self):
        m = EncoderModel(config(depth=2, hidden_dims=4, output_dims=3))
        rng = np.random.default_rng(0)
        x1, x2 = rng.standard_normal((2, 4, 2)), rng.standard_normal((2, 4, 2))
        w = m.params["block1.weight"]

        def value(arr):
            old = w.data
            w.data = arr
            out = hierarchical_loss(m.forward_sequence(x1), m.forward_sequence(x2)).item()
            w.data = old
            return out

        m.parameters()  # ensure grads are fresh
        for p in m.parameters():
            p.zero_grad()
        dc.backward(hierarchical_loss(m.forward_sequence(x1), m.forward_sequence(x2)), m.parameters())
        assert rel_error(w.grad, numeric_grad(value, w.data.copy())) < 1e-4

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
    def test_byol_range_and_contrastive_nonnegative(self, a, b):
        val = byol_loss(a, b).item()
        assert -1e-12 <= val <= 4.0 + 1e-12
        assert instance_loss(a[:, None, :], b[:, None, :]).item() >= -1e-12


class TestCropsAndEMA:
    def test_forced_disjoint_halves(self):
        X = np.arange(20.0).reshape(1, 10, 2)
        crop = random_crop_pair(X, 0, length=5, starts=(0, 5))
        assert crop.overlap is None
        np.testing.assert_array_equal(crop.view1, X[:, :5])
        np.testing.assert_array_equal(crop.view2, X[:, 5:])

    def test_seeded_and_overlapping(self):
        X = np.random.default_rng(0).standard_normal((2, 20, 3))
        a = random_crop_pair(X, 7, require_overlap=True)
        b = random_crop_pair(X, 7, require_overlap=True)
        assert (a.start1, a.start2) == (b.start1, b.start2)
        lo, hi = a.overlap
        assert hi > lo
        np.testing.assert_array_equal(a.view1, X[:, a.start1:a.start1 + a.length])

    def test_bad_start(self):
        with pytest.raises(ContractError):
            random_crop_pair(np.zeros((10, 1)), 0, length=5, starts=(0, 6))

    def test_ema_values(self):
        assert ema_update(1.0, 0.0, 0.996) == pytest.approx(0.996)
        np.testing.assert_array_equal(ema_update(np.array([2.0, 3.0]), np.zeros(2), 1.0), [2.0, 3.0])

    def test_ema_geometric_convergence(self):
        xi, theta, beta = np.array([1.0, -1.0]), np.array([0.5, 0.25]), 0.9
        for _ in range(25):
            xi = ema_update(xi, theta, beta)
        np.testing.assert_allclose(xi - theta, beta ** 25 * (np.array([1.0, -1.0]) - theta), rtol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, 4, elements=st.floats(-10, 10)), arrays(np.float64, 4, elements=st.floats(-10, 10)),
           st.floats(0.01, 0.99))
    def test_ema_contraction(self, xi, theta, beta):
        new = ema_update(xi, theta, beta)
        np.testing.assert_allclose(np.linalg.norm(new - theta), beta * np.linalg.norm(xi - theta),
                                   rtol=1e-9, atol=1e-12)


def toy_windows(n=64, length=16, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n + length)
    X = np.sin(t / 3.0)[:, None] + 0.1 * rng.standard_normal((n + length, 1))
    return sliding_windows(X, length, 1)[:n]


class TestTraining:
    def test_sliding_windows(self):
        X = np.arange(10.0)[:, None]
        W = sliding_windows(X, 4, 3)
        assert W.shape == (3, 4, 1)
        np.testing.assert_array_equal(W[1, :, 0], [3, 4, 5, 6])

    def test_zero_epochs_returns_initial_weights(self):
        m = EncoderModel(config(input_dims=1))
        before = m.state_arrays()
        result = train(TS2VecTrainer(m), toy_windows(), 0)
        assert result.history == []
        for k, v in result.model.state_arrays().items():
            np.testing.assert_array_equal(v, before[k])

    def test_loss_decreases_on_toy_data(self):
        m = EncoderModel(config(input_dims=1, hidden_dims=16, depth=2))
        result = train(TS2VecTrainer(m), toy_windows(), 7, TrainConfig(batch_size=8, lr=3e-3, seed=0, max_steps=50))
        loss = np.array([r.loss for r in result.history])
        assert len(loss) == 50
        smooth = np.convolve(loss, np.ones(10) / 10, mode="valid")
        assert smooth[-1] < smooth[0]

    def test_sn_vs_vanilla_norms(self):
        runs = {}
        for sn in (True, False):
            m = EncoderModel(config(input_dims=1, hidden_dims=8, depth=2,
                                    sn=SNConfig(c=0.9) if sn else None))
            res = train(TS2VecTrainer(m), toy_windows(), 20, TrainConfig(lr=0.05, seed=1, max_steps=60))
            runs[sn] = (max(layer_norms(m).values()), max(r.max_layer_norm for r in res.history))
        assert runs[True][0] <= 0.9 * (1 + 1e-4)
        assert runs[True][1] <= 0.9 * (1 + 1e-4)
        assert runs[False][0] > 0.9

    def test_byol_target_not_trained_by_gradient(self):
        m = EncoderModel(config(input_dims=1, family="byol", activation="relu", sn=None))
        trainer = BYOLTrainer(m, proj_dims=8, head_hidden=8, seed=0)
        target_before = trainer.target.state_arrays()
        online_before = m.state_arrays()
        train(trainer, toy_windows(n=16), 1, TrainConfig(batch_size=8, seed=0, max_steps=1))
        # one EMA step: target = beta * old + (1 - beta) * online after the update
        for k in ("proj.weight", "block0.weight"):
            expected = 0.996 * target_before[k] + 0.004 * m.state_arrays()[k]
            np.testing.assert_allclose(trainer.target.state_arrays()[k], expected, rtol=1e-12)
            assert not np.array_equal(m.state_arrays()[k], online_before[k])
        assert all(p not in trainer.parameters() for p in trainer.target.parameters())

    def test_non_finite_loss_is_reported(self):
        m = EncoderModel(config(input_dims=1))
        windows = toy_windows(n=8)
        windows[3] = np.nan
        with pytest.raises(TrainingError, match="step"):
            train(TS2VecTrainer(m), windows, 1, TrainConfig(batch_size=8))

    def test_seeded_training_is_deterministic(self):
        def run():
            m = EncoderModel(config(input_dims=1, dropout=0.1))
            res = train(TS2VecTrainer(m), toy_windows(n=16), 1, TrainConfig(seed=3))
            return history_csv(res.history), m.state_arrays()
        (h1, s1), (h2, s2) = run(), run()
        assert h1 == h2
        for k in s1:
            np.testing.assert_array_equal(s1[k], s2[k])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = EncoderModel(config(sn=SNConfig(c=0.8)))
        save(m, tmp_path / "m.ckpt", extra={"note": "x"})
        back, extra = load(tmp_path / "m.ckpt")
        assert extra == {"note": "x"}
        assert back.config.to_dict() == m.config.to_dict()
        X = np.random.default_rng(0).standard_normal((2, 6, 2))
        np.testing.assert_array_equal(back.encode_vector(X), m.encode_vector(X))
        for k, v in m.state_arrays().items():
            np.testing.assert_array_equal(back.state_arrays()[k], v)

    def test_bytes_are_deterministic(self):
        assert to_bytes(EncoderModel(config())) == to_bytes(EncoderModel(config()))

    @pytest.mark.parametrize("mutate", [lambda b: b"XXXXXXXX" + b[8:], lambda b: b[:-3], lambda b: b + b"\0"])
    def test_corrupt_input(self, mutate):
        with pytest.raises(ParseError):
            from_bytes(mutate(to_bytes(EncoderModel(config()))))
