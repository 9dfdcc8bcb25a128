import numpy as np
import pytest

from utils import autodiff as ad
from utils.denoiser import ArchConfig, init_denoiser
from utils.diffusion import (NoisedBatch, NoiseSchedule, ancestral_sample, build_schedule, ddpm_cond_loss,
                             drop_labels, forward_diffuse, noise_batch, noise_prediction_loss, posterior_coefficients,
                             reverse_mean, score_from_eps)
from utils.errors import DiffusionError, ScheduleError
from utils.optim import Adam


class ConstantNoise:
    """Model stand-in predicting the same noise value everywhere."""

    null_label = 0

    def __init__(self, value=0.0, input_dim=1):
        self.value = value
        self.input_dim = input_dim

    def predict_noise(self, x_t, t, labels, params=None):
        shape = np.shape(x_t.data if isinstance(x_t, ad.Tensor) else x_t)
        return ad.Tensor(np.full(shape, self.value))


class ExactNoise:
    """Recovers the true noise from x_t for a fixed clean batch."""

    null_label = 0

    def __init__(self, x0, schedule):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.schedule = schedule
        self.input_dim = self.x0.shape[1]

    def predict_noise(self, x_t, t, labels, params=None):
        t = np.asarray(t)[:, None]
        return ad.Tensor((np.asarray(x_t) - self.schedule.alpha_bar[t] * self.x0) / self.schedule.beta_bar[t])


class TestSchedule:
    def test_two_step_hand_values(self):
        schedule = NoiseSchedule.from_betas([0.1, 0.2])
        assert schedule.alpha_bar[2] == pytest.approx(np.sqrt(0.72), abs=1e-12)
        assert schedule.beta_bar[2] ** 2 == pytest.approx(0.28, abs=1e-12)
        assert schedule.alpha_bar[0] == 1.0 and schedule.beta_bar[0] == 0.0

    def test_no_noise_degenerate(self):
        schedule = NoiseSchedule.from_betas([0.0, 0.0, 0.0])
        np.testing.assert_array_equal(schedule.alpha_bar, np.ones(4))
        np.testing.assert_array_equal(schedule.beta_bar, np.zeros(4))

    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    def test_identities(self, kind):
        schedule = build_schedule(200, 1e-4, 0.02 if kind == "linear" else 0.999, kind)
        np.testing.assert_allclose(schedule.alpha_bar ** 2 + schedule.beta_bar ** 2, 1.0, atol=1e-12)
        assert np.all(np.diff(schedule.alpha_bar) < 0)
        inner = schedule.alpha_bar[1:]
        assert np.all((inner > 0) & (inner < 1))

    def test_long_linear_schedule_ends_near_pure_noise(self):
        schedule = build_schedule(1000, 1e-4, 2e-2)
        assert schedule.alpha_bar[-1] < 0.01

    @pytest.mark.parametrize("args", [(1, 1e-3, 0.1), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 1e-3, 1.0),
                                      (10.5, 1e-3, 0.1)])
    def test_invalid_bounds(self, args):
        with pytest.raises(ScheduleError):
            build_schedule(*args)

    def test_unknown_kind(self):
        with pytest.raises(ScheduleError):
            build_schedule(10, 1e-3, 0.1, kind="sigmoid")

    def test_json_round_trip(self, schedule):
        restored = NoiseSchedule.from_json(schedule.to_json())
        np.testing.assert_array_equal(restored.alpha_bar, schedule.alpha_bar)
        np.testing.assert_array_equal(restored.sigma, schedule.sigma)
        assert restored.T == schedule.T

    def test_audit_dump_carries_sde_scale(self, schedule):
        data = schedule.to_dict()
        assert len(data["sde_sigma"]) == schedule.T
        np.testing.assert_allclose(data["sde_sigma"], schedule.beta_bar[1:] / schedule.alpha_bar[1:], rtol=1e-12)
        assert all(a < b for a, b in zip(data["sde_sigma"], data["sde_sigma"][1:]))

    def test_posterior_sigma_is_zero_at_first_step(self, schedule):
        assert schedule.sigma[1] == pytest.approx(0.0, abs=1e-15)
        assert np.all(schedule.sigma[2:] > 0)


class TestForwardDiffuse:
    def test_hand_arithmetic(self):
        # alpha_bar = 0.6 at t=1, beta_bar = 0.8
        schedule = NoiseSchedule.from_betas([0.64, 0.1])
        assert forward_diffuse(np.array([[1.0]]), 1, np.array([[-1.0]]), schedule)[0, 0] == pytest.approx(-0.2)

    def test_zero_noise(self, schedule):
        x0 = np.array([[1.0, -2.0]])
        np.testing.assert_allclose(forward_diffuse(x0, 4, np.zeros_like(x0), schedule), schedule.alpha_bar[4] * x0)

    def test_per_row_timesteps(self, schedule):
        x0 = np.ones((2, 2))
        eps = np.zeros((2, 2))
        out = forward_diffuse(x0, np.array([1, 10]), eps, schedule)
        np.testing.assert_allclose(out[:, 0], schedule.alpha_bar[[1, 10]])

    @pytest.mark.parametrize("t", [0, 11])
    def test_timestep_out_of_range(self, schedule, t):
        with pytest.raises(ScheduleError):
            forward_diffuse(np.ones((1, 2)), t, np.zeros((1, 2)), schedule)

    def test_eps_shape_mismatch(self, schedule):
        with pytest.raises(DiffusionError):
            forward_diffuse(np.ones((2, 2)), 1, np.zeros((2, 3)), schedule)

    def test_moments_over_many_draws(self, schedule):
        rng = np.random.default_rng(7)
        n, t = 100_000, 5
        x0 = np.full((n, 1), 2.0)
        x_t = forward_diffuse(x0, t, rng.standard_normal((n, 1)), schedule)
        assert x_t.mean() == pytest.approx(schedule.alpha_bar[t] * 2.0, rel=0.02)
        assert x_t.var() == pytest.approx(schedule.beta_bar[t] ** 2, rel=0.02)


class TestNoisePredictionLoss:
    def test_exact_model_gives_zero(self, schedule, rng):
        x0 = rng.standard_normal((64, 2))
        loss = ddpm_cond_loss(ExactNoise(x0, schedule), (x0, np.zeros(64, dtype=int)), schedule, rng)
        assert loss.item() == pytest.approx(0.0, abs=1e-18)

    def test_zero_model_gives_dimension(self, schedule, rng):
        x0 = rng.standard_normal((20_000, 3))
        loss = ddpm_cond_loss(ConstantNoise(0.0, 3), (x0, np.zeros(20_000, dtype=int)), schedule, rng)
        assert loss.item() == pytest.approx(3.0, rel=0.05)

    def test_non_negative(self, small_model, schedule, rng):
        for _ in range(5):
            x0 = rng.standard_normal((8, 2))
            assert ddpm_cond_loss(small_model, (x0, rng.integers(0, 4, 8)), schedule, rng).item() >= 0.0

    def test_parameter_gradient_matches_finite_differences(self, small_model, schedule):
        data_rng = np.random.default_rng(3)
        x0, y = data_rng.standard_normal((6, 2)), data_rng.integers(0, 4, 6)
        for name in ("in.W", "block0.W1", "label.E", "out.b"):
            def f(p, name=name):
                params = small_model.tensors(requires_grad=False)
                params[name] = p
                return ddpm_cond_loss(small_model, (x0, y), schedule, np.random.default_rng(0), params=params)

            assert ad.grad_check(f, small_model.params[name]) < 1e-4, name

    def test_empty_batch(self, small_model, schedule, rng):
        with pytest.raises(DiffusionError):
            noise_batch(np.zeros((0, 2)), np.zeros(0, dtype=int), schedule, rng)

    def test_noise_batch_respects_given_timesteps(self, schedule, rng):
        t = np.array([3, 3, 7])
        batch = noise_batch(np.zeros((3, 2)), np.zeros(3, dtype=int), schedule, rng, t=t)
        np.testing.assert_array_equal(batch.t, t)
        np.testing.assert_allclose(batch.x_t, schedule.beta_bar[t][:, None] * batch.eps)

    def test_noise_prediction_loss_returns_prediction(self, schedule):
        batch = NoisedBatch(x0=np.zeros((2, 1)), labels=np.zeros(2, dtype=int), t=np.array([1, 2]),
                            eps=np.array([[1.0], [-1.0]]), x_t=np.zeros((2, 1)))
        loss, eps_hat = noise_prediction_loss(ConstantNoise(0.5), batch)
        assert loss.item() == pytest.approx((0.25 + 2.25) / 2)
        np.testing.assert_array_equal(eps_hat.data, [[0.5], [0.5]])


class TestDropLabels:
    def test_rate_zero_keeps_labels(self, rng):
        labels = np.arange(10)
        np.testing.assert_array_equal(drop_labels(labels, 99, 0.0, rng), labels)

    def test_rate_one_drops_all(self, rng):
        np.testing.assert_array_equal(drop_labels(np.arange(5), 7, 1.0, rng), np.full(5, 7))

    def test_input_untouched(self, rng):
        labels = np.arange(5)
        drop_labels(labels, 7, 1.0, rng)
        np.testing.assert_array_equal(labels, np.arange(5))


class TestReverseMean:
    def test_hand_arithmetic(self):
        # alpha_2 = 0.99, cumulative signal at t=2 is 0.5
        schedule = NoiseSchedule.from_betas([1.0 - 0.5 / 0.99, 0.01])
        mu = reverse_mean(ConstantNoise(0.2), np.array([[1.0]]), 2, schedule)
        expected = 1.0 / np.sqrt(0.99) - (0.01 / np.sqrt(0.99 * 0.5)) * 0.2
        assert mu.item() == pytest.approx(expected, abs=1e-12)

    def test_zero_prediction(self, schedule):
        x_t = np.array([[1.0, -3.0]])
        mu = reverse_mean(ConstantNoise(0.0, 2), x_t, 5, schedule)
        np.testing.assert_allclose(mu.data, x_t / np.sqrt(schedule.alpha[5]))

    def test_identity_step(self):
        schedule = NoiseSchedule.from_betas([0.3, 0.0])
        mu = reverse_mean(ConstantNoise(0.7), np.array([[2.0]]), 2, schedule)
        assert mu.item() == pytest.approx(2.0)

    def test_no_step_at_zero(self, schedule):
        with pytest.raises(ScheduleError):
            reverse_mean(ConstantNoise(), np.ones((1, 1)), 0, schedule)
        with pytest.raises(ScheduleError):
            posterior_coefficients(schedule, np.array([1, 0]))


class TestAncestralSample:
    def test_fixed_seed_is_deterministic(self, small_model, schedule):
        a = ancestral_sample(small_model, 1, 16, schedule, np.random.default_rng(5))
        b = ancestral_sample(small_model, 1, 16, schedule, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (16, 2)

    def test_needs_a_sample(self, small_model, schedule, rng):
        with pytest.raises(DiffusionError):
            ancestral_sample(small_model, 0, 0, schedule, rng)

    def test_does_not_record_tape(self, small_model, schedule, rng):
        ancestral_sample(small_model, 0, 4, schedule, rng)
        assert ad.is_grad_enabled()


class TestScore:
    def test_zero_prediction(self, schedule):
        np.testing.assert_array_equal(score_from_eps(np.zeros((2, 2)), 3, schedule), np.zeros((2, 2)))

    def test_direct_formula(self):
        # beta_bar = 0.5 at t=1
        schedule = NoiseSchedule.from_betas([0.25, 0.1])
        assert score_from_eps(np.array([[1.0]]), 1, schedule)[0, 0] == pytest.approx(-2.0)

    def test_zero_noise_level(self):
        schedule = NoiseSchedule.from_betas([0.0, 0.1])
        with pytest.raises(ScheduleError):
            score_from_eps(np.ones((1, 1)), 1, schedule)


@pytest.fixture(scope="module")
def gaussian_model():
    """Unconditional-only model trained on 1-D N(5, 0.1^2)."""
    schedule = build_schedule(50, 1e-4, 0.3)
    model = init_denoiser(ArchConfig(input_dim=1, num_labels=1, hidden=32, depth=2, time_dim=8), seed=0)
    optimizer = Adam(lr=3e-3)
    rng = np.random.default_rng(0)
    for _ in range(2000):
        x0 = 5.0 + 0.1 * rng.standard_normal((128, 1))
        params = model.tensors()
        loss = ddpm_cond_loss(model, (x0, np.zeros(128, dtype=int)), schedule, rng, params=params)
        names = model.trunk_names
        grads = ad.grad(loss, [params[n] for n in names])
        optimizer.step(model.params, dict(zip(names, grads)))
    return model, schedule


@pytest.mark.slow
class TestTrainedGaussian:
    def test_sample_mean(self, gaussian_model):
        model, schedule = gaussian_model
        samples = ancestral_sample(model, 0, 2000, schedule, np.random.default_rng(1))
        assert abs(samples.mean() - 5.0) < 0.2

    def test_score_matches_gaussian_marginal(self, gaussian_model):
        model, schedule = gaussian_model
        m, s, t = 5.0, 0.1, schedule.T // 2
        rng = np.random.default_rng(2)
        x0 = m + s * rng.standard_normal((4000, 1))
        x_t = forward_diffuse(x0, t, rng.standard_normal(x0.shape), schedule)
        eps_hat = model.predict_noise(x_t, np.full(4000, t), np.zeros(4000, dtype=int)).data
        estimated = score_from_eps(eps_hat, t, schedule)
        a, b = schedule.alpha_bar[t], schedule.beta_bar[t]
        analytic = -(x_t - a * m) / (a ** 2 * s ** 2 + b ** 2)
        assert np.mean((estimated - analytic) ** 2) < 0.1 * np.mean(analytic ** 2)
