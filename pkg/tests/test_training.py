"""Initialization, loss, analytic gradients, Adam and the training loop."""

import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FREQ, random_model
from propsplat.errors import InvalidArgumentError, NonFiniteGradientError
from propsplat.measurements import MeasurementSet
from propsplat.model import ModelState, baseline_path_loss, influence_matrix, predict_batch
from propsplat.training import (AdamState, GradientSet, TrainConfig, adam_step, apply_ablation,
                                distance_weights, finite_difference_check, initialize_model,
                                least_squares_gamma, loss_gradients, random_gradcheck_case,
                                train, weighted_loss)


def log_distance_set(rng, n, gamma, freq=FREQ, extent=500.0):
    tx = np.tile([0.0, 0.0, 20.0], (n, 1))
    rx = np.column_stack([rng.uniform(-extent, extent, (n, 2)), np.full(n, 1.5)])
    return MeasurementSet(tx, rx, freq, baseline_path_loss(tx, rx, freq, gamma))


def links_set(tx, rx, target, kind="path_loss"):
    return MeasurementSet(np.atleast_2d(tx), np.atleast_2d(rx), FREQ, np.atleast_1d(target), kind)


class TestInitializeModel:

    def test_no_gaussians(self, rng):
        data = log_distance_set(rng, 10, 2.5)
        m = initialize_model(data, TrainConfig(n_gaussians=0), rng)
        assert m.n_gaussians == 0 and m.gamma == 2.0

    def test_centers_on_single_link(self, rng):
        data = links_set([0, 0, 0], [100, 0, 0], 80.0)
        m = initialize_model(data, TrainConfig(n_gaussians=500), rng)
        assert np.all(m.mu[:, 1:] == 0.0)
        assert m.mu[:, 0].min() >= 10.0 and m.mu[:, 0].max() <= 90.0
        np.testing.assert_array_equal(m.quat, np.tile([1.0, 0, 0, 0], (500, 1)))

    def test_scale_from_median_link(self, rng):
        data = links_set(np.zeros((3, 3)), [[100, 0, 0], [0, 200, 0], [0, 0, 300]], [1, 2, 3])
        m = initialize_model(data, TrainConfig(n_gaussians=4, init_sigma0=0.3), rng)
        np.testing.assert_allclose(np.exp(m.log_scale), 60.0, rtol=1e-12)

    def test_empty_dataset_rejected(self, rng):
        with pytest.raises(InvalidArgumentError):
            initialize_model(MeasurementSet.empty(), TrainConfig(n_gaussians=3), rng)

    def test_deterministic(self):
        data = log_distance_set(np.random.default_rng(0), 50, 2.5)
        a = initialize_model(data, TrainConfig(n_gaussians=20), np.random.default_rng(7))
        b = initialize_model(data, TrainConfig(n_gaussians=20), np.random.default_rng(7))
        np.testing.assert_array_equal(a.mu, b.mu)
        np.testing.assert_array_equal(a.offset, b.offset)

    def test_rssi_reference_power(self, rng):
        data = log_distance_set(rng, 100, 2.0)
        rssi = MeasurementSet(data.tx, data.rx, FREQ, -30.0 - data.target, "rssi")
        m = initialize_model(rssi, TrainConfig(n_gaussians=0), rng)
        assert m.p0_dbm == pytest.approx(-30.0, abs=1e-9)


class TestWeightedLoss:

    def test_perfect_predictions(self, rng):
        model = random_model(rng, 20)
        data = log_distance_set(rng, 30, 2.0)
        exact = MeasurementSet(data.tx, data.rx, FREQ,
                               predict_batch(model, (data.tx, data.rx, FREQ)))
        assert weighted_loss(model, exact, TrainConfig()) == 0.0

    def test_unit_weights_give_mse(self, rng):
        data = log_distance_set(rng, 30, 2.4)
        m = ModelState.empty(FREQ, 2.0)
        r = baseline_path_loss(data.tx, data.rx, FREQ, 2.0) - data.target
        got = weighted_loss(m, data, TrainConfig(weight_exponent=0.0))
        assert got == pytest.approx(np.mean(r * r), rel=1e-14)

    def test_hand_computed_two_samples(self):
        tx = np.zeros((2, 3))
        rx = np.array([[9.0, 0, 0], [19.0, 0, 0]])
        base = baseline_path_loss(tx, rx, FREQ, 2.0)
        data = links_set(tx, rx, base - [1.0, 2.0])
        np.testing.assert_allclose(distance_weights(data.link_distance, TrainConfig()),
                                   [2 / 3, 4 / 3], rtol=1e-15)
        assert weighted_loss(ModelState.empty(FREQ, 2.0), data, TrainConfig()) == pytest.approx(3.0)

    def test_empty_batch(self):
        with pytest.raises(InvalidArgumentError):
            weighted_loss(ModelState.empty(FREQ), MeasurementSet.empty(), TrainConfig())

    @given(st.lists(st.floats(0.0, 1e5), min_size=1, max_size=50), st.floats(0.0, 3.0))
    def test_weights_average_to_one(self, d, p):
        w = distance_weights(np.array(d), TrainConfig(weight_exponent=p))
        assert abs(np.mean(w) - 1.0) < 1e-12


class TestLossGradients:

    def test_offset_gradient_closed_form(self, rng):
        model, data = random_gradcheck_case(rng, 6, 12)
        model.offset[:] = 0.0
        cfg = TrainConfig()
        _, g = loss_gradients(model, data, cfg)
        w = distance_weights(data.link_distance, cfg)
        base = baseline_path_loss(data.tx, data.rx, FREQ, model.gamma)
        alpha = influence_matrix(model, data.tx, data.rx)
        expected = (2.0 / len(data)) * alpha @ (w * (base - data.target))
        np.testing.assert_allclose(g.offset, expected, rtol=1e-10, atol=1e-13)

    def test_irrelevant_gaussian_gets_zero_gradient(self, rng):
        model, data = random_gradcheck_case(rng, 4, 10)
        far = model.copy(mu=np.vstack([model.mu, [1e4, 1e4, 1e4]]),
                         log_scale=np.vstack([model.log_scale, [1.0, 2.0, 0.5]]),
                         quat=np.vstack([model.quat, [0.5, 0.5, 0.5, 0.5]]),
                         offset=np.append(model.offset, 7.0))
        _, g = loss_gradients(far, data, TrainConfig())
        for arr in (g.mu, g.log_scale, g.quat, g.offset[:, None]):
            assert np.all(arr[-1] == 0.0)

    def test_gate_zero_per_sample(self, rng):
        model, data = random_gradcheck_case(rng, 5, 16)
        alpha = influence_matrix(model, data.tx, data.rx)
        i = int(np.argmax((alpha == 0).sum(axis=1)))
        out = np.flatnonzero(alpha[i] == 0)
        if out.size == 0:
            pytest.skip("every link sees every Gaussian in this draw")
        _, g = loss_gradients(model, data.subset(out), TrainConfig())
        assert np.all(g.mu[i] == 0) and np.all(g.log_scale[i] == 0)
        assert np.all(g.quat[i] == 0) and g.offset[i] == 0

    def test_chunked_matches_sequential(self, rng):
        model, data = random_gradcheck_case(rng, 8, 16)
        _, a = loss_gradients(model, data, TrainConfig())
        _, b = loss_gradients(model, data, TrainConfig(), n_chunks=4)
        np.testing.assert_allclose(a.flat(), b.flat(), rtol=1e-12, atol=1e-15)

    def test_sequential_is_deterministic(self, rng):
        model, data = random_gradcheck_case(rng, 8, 16)
        _, a = loss_gradients(model, data, TrainConfig())
        _, b = loss_gradients(model, data, TrainConfig())
        np.testing.assert_array_equal(a.flat(), b.flat())


class TestFiniteDifferenceCheck:

    def test_offsets_only_is_exact(self, rng):
        # the loss is quadratic in the offsets, so the central quotient is exact
        for _ in range(5):
            model, data = random_gradcheck_case(rng, 5, 8)
            err = finite_difference_check(model, data, TrainConfig(), order=2, groups=("offset",))
            assert err < 1e-10

    @pytest.mark.parametrize("rssi", [False, True])
    def test_random_cases(self, rssi):
        rng = np.random.default_rng(99)
        for _ in range(10):
            model, data = random_gradcheck_case(rng, 5, 8, rssi=rssi)
            assert finite_difference_check(model, data, TrainConfig(), h=1e-4) < 1e-4

    def test_corrupted_gradient_detected(self, rng):
        model, data = random_gradcheck_case(rng, 5, 8)
        _, g = loss_gradients(model, data, TrainConfig())
        k = int(np.argmax(np.abs(g.offset)))
        g.offset[k] = -g.offset[k]
        assert finite_difference_check(model, data, TrainConfig(), grads=g) > 0.5

    def test_step_must_be_positive(self, rng):
        model, data = random_gradcheck_case(rng, 2, 4)
        with pytest.raises(InvalidArgumentError):
            finite_difference_check(model, data, TrainConfig(), h=0.0)


class TestAdamStep:

    def _grads(self, model, fill=0.0):
        return GradientSet(np.full_like(model.mu, fill), np.full_like(model.log_scale, fill),
                           np.full_like(model.quat, fill), np.full_like(model.offset, fill),
                           fill, fill if model.rssi_mode else None)

    def test_zero_gradient_leaves_parameters(self, rng):
        model = random_model(rng, 6, p0=-40.0)
        model.log_scale[:] = np.log(5.0)
        new, state = adam_step(model, self._grads(model), AdamState.zeros_like(model), TrainConfig())
        np.testing.assert_array_equal(new.mu, model.mu)
        np.testing.assert_array_equal(new.offset, model.offset)
        assert new.gamma == model.gamma and new.p0_dbm == model.p0_dbm and state.step == 1

    def test_first_gamma_step(self):
        model = ModelState.empty(FREQ, 2.5)
        grads = self._grads(model)
        grads.gamma = 3.7
        cfg = TrainConfig()
        new, _ = adam_step(model, grads, AdamState.zeros_like(model), cfg)
        assert new.gamma == pytest.approx(2.5 - cfg.learning_rates["gamma"], rel=1e-9)

    def test_quaternions_stay_unit(self, rng):
        model = random_model(rng, 20)
        grads = self._grads(model)
        grads.quat = rng.normal(size=model.quat.shape)
        new, _ = adam_step(model, grads, AdamState.zeros_like(model), TrainConfig())
        np.testing.assert_allclose(np.linalg.norm(new.quat, axis=1), 1.0, atol=1e-12)

    def test_gamma_clamped(self):
        model = ModelState.empty(FREQ, 0.501)
        grads = self._grads(model)
        grads.gamma = 1.0
        new, _ = adam_step(model, grads, AdamState.zeros_like(model),
                           TrainConfig(learning_rates={"gamma": 1.0}))
        assert new.gamma == 0.5

    def test_non_finite_names_group(self, rng):
        model = random_model(rng, 3)
        grads = self._grads(model)
        grads.log_scale[1, 2] = np.nan
        with pytest.raises(NonFiniteGradientError, match="log_scale"):
            adam_step(model, grads, AdamState.zeros_like(model), TrainConfig())

    def test_frozen_group_unchanged(self, rng):
        model = random_model(rng, 3)
        grads = self._grads(model, 1.0)
        new, _ = adam_step(model, grads, AdamState.zeros_like(model), TrainConfig(),
                           frozen={"gamma"})
        assert new.gamma == model.gamma
        assert np.all(new.offset != model.offset)


class TestApplyAblation:

    def test_empty_flags(self):
        cfg = TrainConfig(n_gaussians=10)
        assert apply_ablation(cfg, []) == cfg

    def test_no_gaussians(self):
        assert apply_ablation(TrainConfig(), {"no_gaussians"}).n_gaussians == 0

    def test_composable(self):
        cfg = apply_ablation(TrainConfig(), {"isotropic", "fixed_ple"})
        assert cfg.isotropic and cfg.fixed_ple and cfg.n_gaussians == 9000

    def test_unknown_flag(self):
        with pytest.raises(InvalidArgumentError):
            apply_ablation(TrainConfig(), {"nope"})


class TestTrain:

    def _small(self, **kw):
        base = dict(n_gaussians=20, iterations=60, batch_size=64, log_every=10)
        base.update(kw)
        return TrainConfig(**base)

    def _data(self):
        rng = np.random.default_rng(5)
        data = log_distance_set(rng, 200, 2.7)
        bump = np.where(data.rx[:, 0] > 0, 6.0, 0.0)
        return MeasurementSet(data.tx, data.rx, FREQ, data.target + bump)

    def test_exponent_recovered_without_gaussians(self):
        data = log_distance_set(np.random.default_rng(1), 500, 3.2)
        cfg = apply_ablation(TrainConfig(iterations=3000, batch_size=0), {"no_gaussians"})
        model, _ = train(data, cfg)
        oracle = least_squares_gamma(data)
        assert oracle == pytest.approx(3.2, abs=1e-12)
        assert abs(model.gamma - oracle) < 0.02

    def test_loss_decreases(self):
        data = self._data()
        model, history = train(data, self._small(iterations=200))
        start = weighted_loss(initialize_model(data, self._small(), np.random.default_rng(0)
                                               .spawn(2)[0]), data, self._small())
        assert history[-1].loss <= start

    def test_fixed_exponent_stays_two(self):
        _, history = train(self._data(), self._small(fixed_ple=True))
        assert all(h.gamma == 2.0 for h in history)

    def test_isotropic_scales_stay_tied(self):
        seen = []
        train(self._data(), self._small(isotropic=True),
              callback=lambda it, m: seen.append(m.log_scale.copy()))
        for ls in seen:
            np.testing.assert_array_equal(ls, np.repeat(ls[:, :1], 3, axis=1))

    def test_bit_identical_reruns(self):
        a, ha = train(self._data(), self._small())
        b, hb = train(self._data(), self._small())
        assert [h.loss for h in ha] == [h.loss for h in hb]
        np.testing.assert_array_equal(a.mu, b.mu)
        np.testing.assert_array_equal(a.quat, b.quat)

    def test_no_gaussian_run_ignores_init_draws(self):
        cfg = apply_ablation(self._small(), {"no_gaussians"})
        a, _ = train(self._data(), cfg)
        b, _ = train(self._data(), apply_ablation(self._small(n_gaussians=500), {"no_gaussians"}))
        assert a.gamma == b.gamma

    def test_progress_log(self):
        buf = io.StringIO()
        train(self._data(), self._small(), log=buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "iteration\tloss\tgamma\twall_s"
        assert [int(l.split("\t")[0]) for l in lines[1:]] == [0, 10, 20, 30, 40, 50, 60]

    def test_rssi_training_learns_reference_power(self):
        rng = np.random.default_rng(2)
        pl = log_distance_set(rng, 300, 2.0)
        data = MeasurementSet(pl.tx, pl.rx, FREQ, -25.0 - pl.target, "rssi")
        model, _ = train(data, TrainConfig(n_gaussians=0, iterations=300, batch_size=0))
        assert model.p0_dbm == pytest.approx(-25.0, abs=1e-3)
        assert model.gamma == pytest.approx(2.0, abs=1e-3)

    def test_empty_dataset(self):
        with pytest.raises(InvalidArgumentError):
            train(MeasurementSet.empty(), self._small())

    def test_config_round_trip(self):
        cfg = self._small(isotropic=True, learning_rates={"mu": 0.1})
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(InvalidArgumentError):
            TrainConfig.from_dict({"bogus": 1})
        with pytest.raises(InvalidArgumentError):
            TrainConfig(init_sigma0=0.9)
