import math

import numpy as np
import pytest

from motionssm.blocks import MotionDenoiser
from motionssm.diffusion import (
    NoiseSchedule, build_schedule, ddim_step, ddpm_step, guided_noise,
    noise_from_clean, q_sample, sample_sequence, sampling_steps, training_loss,
)
from motionssm.tensor import Tensor


# frozen from two independent high-precision oracles (mpmath at 50 digits and
# math.fsum over log1p terms), both giving 0.0063017497722070307671...
ALPHA_BAR_FINAL_T1000 = 0.006301749772207031
ALPHA_BAR_FINAL_T100 = 0.6024803053077052


@pytest.fixture
def schedule():
    return build_schedule(100)


class TestSchedule:
    def test_first_step_values(self):
        s = build_schedule(1000)
        assert s.beta[0] == pytest.approx(1e-4)
        assert s.alpha[0] == pytest.approx(0.9999)
        assert s.alpha_bar[0] == pytest.approx(0.9999, abs=0.0)

    def test_alpha_bar_is_cumulative_product(self):
        s = build_schedule(50)
        direct = np.array([np.prod(s.alpha[: i + 1]) for i in range(50)])
        np.testing.assert_allclose(s.alpha_bar, direct, rtol=1e-12)

    def test_monotonicity_and_range(self):
        s = build_schedule(1000)
        assert (np.diff(s.beta) > 0).all()
        assert (np.diff(s.alpha_bar) < 0).all()
        assert (s.beta > 0).all() and (s.beta < 1).all()
        assert (s.alpha_bar > 0).all() and (s.alpha_bar < 1).all()

    def test_final_alpha_bar_frozen_values(self):
        assert build_schedule(1000).alpha_bar[-1] == pytest.approx(
            ALPHA_BAR_FINAL_T1000, rel=1e-12)
        assert build_schedule(100).alpha_bar[-1] == pytest.approx(
            ALPHA_BAR_FINAL_T100, rel=1e-12)

    def test_invalid_ranges_rejected(self):
        with pytest.raises(ValueError):
            build_schedule(10, beta_start=0.0)
        with pytest.raises(ValueError):
            build_schedule(10, beta_start=0.02, beta_end=0.01)
        with pytest.raises(ValueError):
            build_schedule(0)

    def test_alpha_bar_at_zero_is_one(self, schedule):
        assert schedule.alpha_bar_at(0) == 1.0


class TestForwardProcess:
    def test_zero_noise(self, schedule):
        m0 = np.ones((4, 3), dtype=np.float32)
        out = q_sample(schedule, m0, 10, np.zeros_like(m0))
        np.testing.assert_allclose(out, math.sqrt(schedule.alpha_bar_at(10)), rtol=1e-6)

    def test_degenerate_schedule_identity(self):
        frozen = NoiseSchedule(1, np.array([0.0]), np.array([1.0]), np.array([1.0]))
        m0 = np.random.default_rng(0).normal(size=(5, 2)).astype(np.float32)
        eps = np.random.default_rng(1).normal(size=(5, 2)).astype(np.float32)
        np.testing.assert_array_equal(q_sample(frozen, m0, 1, eps), m0)

    def test_shape_mismatch(self, schedule):
        with pytest.raises(ValueError, match="q_sample"):
            q_sample(schedule, np.zeros((2, 2)), 1, np.zeros((3, 2)))

    def test_step_out_of_range(self, schedule):
        with pytest.raises(ValueError, match="range"):
            q_sample(schedule, np.zeros((2, 2)), 101, np.zeros((2, 2)))

    @pytest.mark.parametrize("t", [1, 50, 100])
    def test_monte_carlo_moments(self, schedule, t):
        rng = np.random.default_rng(t)
        n = 10_000
        m0 = np.full((1,), 0.7, dtype=np.float64)
        draws = np.array([
            q_sample(schedule, m0, t, rng.standard_normal(1)) for _ in range(n)
        ]).ravel()
        abar = schedule.alpha_bar_at(t)
        mean_sigma = math.sqrt((1 - abar) / n)
        assert abs(draws.mean() - math.sqrt(abar) * 0.7) < 3 * mean_sigma
        var_sigma = (1 - abar) * math.sqrt(2.0 / (n - 1))
        assert abs(draws.var() - (1 - abar)) < 3 * var_sigma

    def test_per_item_steps(self, schedule):
        m0 = np.ones((3, 4, 2), dtype=np.float32)
        out = q_sample(schedule, m0, np.array([1, 50, 100]), np.zeros_like(m0))
        for i, t in enumerate([1, 50, 100]):
            np.testing.assert_allclose(out[i], math.sqrt(schedule.alpha_bar_at(t)),
                                       rtol=1e-6)


class TestNoiseRecovery:
    def test_round_trip_inverse_at_32_bit(self, schedule):
        rng = np.random.default_rng(2)
        m0 = rng.normal(size=(6, 4)).astype(np.float32)
        eps = rng.normal(size=(6, 4)).astype(np.float32)
        for t in (25, 37, 100):
            m_t = q_sample(schedule, m0, t, eps)
            back = noise_from_clean(schedule, m_t, m0, t)
            np.testing.assert_allclose(back, eps, atol=1e-6)
        # near t=1 the inverse amplifies rounding by 1/sqrt(1-abar_1) = 100x
        m_t = q_sample(schedule, m0, 1, eps)
        back = noise_from_clean(schedule, m_t, m0, 1)
        np.testing.assert_allclose(back, eps, atol=1e-4)

    def test_round_trip_inverse_at_64_bit(self, schedule):
        rng = np.random.default_rng(2)
        m0 = rng.normal(size=(6, 4))
        eps = rng.normal(size=(6, 4))
        for t in (1, 37, 100):
            m_t = q_sample(schedule, m0, t, eps)
            np.testing.assert_allclose(noise_from_clean(schedule, m_t, m0, t), eps,
                                       atol=1e-10)

    def test_consistent_prediction_gives_zero_noise(self, schedule):
        m0 = np.random.default_rng(0).normal(size=(3, 2))
        m_t = math.sqrt(schedule.alpha_bar_at(7)) * m0
        np.testing.assert_allclose(noise_from_clean(schedule, m_t, m0, 7), 0.0,
                                   atol=1e-12)

    def test_matches_scalar_formula_oracle(self, schedule):
        rng = np.random.default_rng(3)
        m_t = rng.normal(size=(4, 2))
        m0 = rng.normal(size=(4, 2))
        t = 42
        got = noise_from_clean(schedule, m_t, m0, t)
        abar = schedule.alpha_bar_at(t)
        expected = np.empty_like(m_t)
        for i in range(4):
            for j in range(2):
                expected[i, j] = (m_t[i, j] - math.sqrt(abar) * m0[i, j]) \
                    / math.sqrt(1.0 - abar)
        np.testing.assert_allclose(got, expected, rtol=1e-7)

    def test_degenerate_alpha_bar_guarded(self):
        frozen = NoiseSchedule(1, np.array([0.0]), np.array([1.0]),
                               np.array([1.0 - 1e-15]))
        with pytest.raises(ValueError, match="1e-12"):
            noise_from_clean(frozen, np.ones(2), np.ones(2), 1)


class TestGuidance:
    def test_zero_scale_identity_bitwise(self):
        rng = np.random.default_rng(4)
        eps_c = rng.normal(size=(5, 3)).astype(np.float32)
        eps_u = rng.normal(size=(5, 3)).astype(np.float32)
        assert np.array_equal(guided_noise(eps_c, eps_u, 0.0), eps_c)

    def test_equal_inputs_fixed_point(self):
        eps = np.random.default_rng(5).normal(size=(4, 2))
        for s in (0.0, 1.0, 4.0, 10.0):
            np.testing.assert_allclose(guided_noise(eps, eps, s), eps, rtol=1e-12)

    def test_scalar_hand_value(self):
        assert guided_noise(np.array(1.0), np.array(0.0), 4.0) == pytest.approx(5.0)

    def test_linearity_in_both_arguments(self):
        rng = np.random.default_rng(6)
        a, b, c, d = (rng.normal(size=(3, 3)) for _ in range(4))
        s = 2.5
        lhs = guided_noise(a + b, c + d, s)
        rhs = guided_noise(a, c, s) + guided_noise(b, d, s)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="guided_noise"):
            guided_noise(np.zeros((2, 2)), np.zeros((3, 2)), 1.0)


class TestDdpmStep:
    def test_final_step_deterministic(self, schedule):
        class Boom:
            def standard_normal(self, *_):
                raise AssertionError("rng must not be consumed at t=1")

        m1 = np.random.default_rng(7).normal(size=(4, 2))
        out = ddpm_step(schedule, m1, np.zeros_like(m1), 1, Boom())
        np.testing.assert_allclose(out, m1 / math.sqrt(schedule.alpha_at(1)),
                                   rtol=1e-12)

    def test_posterior_mean_formula_oracle(self, schedule):
        rng = np.random.default_rng(8)
        m_t = rng.normal(size=(3, 2))
        eps_hat = rng.normal(size=(3, 2))
        t = 60
        out = ddpm_step(schedule, m_t, eps_hat, t, np.random.default_rng(9))
        noisy_again = ddpm_step(schedule, m_t, eps_hat, t, np.random.default_rng(9))
        np.testing.assert_array_equal(out, noisy_again)  # same rng stream, same draw
        beta, alpha, abar = (schedule.beta_at(t), schedule.alpha_at(t),
                             schedule.alpha_bar_at(t))
        mean = (m_t - beta / math.sqrt(1 - abar) * eps_hat) / math.sqrt(alpha)
        var = beta * (1 - schedule.alpha_bar_at(t - 1)) / (1 - abar)
        z = np.random.default_rng(9).standard_normal(m_t.shape)
        np.testing.assert_allclose(out, mean + math.sqrt(var) * z, rtol=1e-10)

    def test_shape_preserved(self, schedule):
        out = ddpm_step(schedule, np.zeros((7, 3)), np.zeros((7, 3)), 50,
                        np.random.default_rng(0))
        assert out.shape == (7, 3)


class TestDdimStep:
    def test_one_hop_exact_recovery(self, schedule):
        rng = np.random.default_rng(10)
        m0 = rng.normal(size=(5, 4)).astype(np.float64)
        eps = rng.normal(size=(5, 4)).astype(np.float64)
        for t in (1, 50, 100):
            m_t = q_sample(schedule, m0, t, eps)
            recovered = ddim_step(schedule, m_t, eps, t, 0)
            np.testing.assert_allclose(recovered, m0, atol=1e-6)

    def test_deterministic(self, schedule):
        rng = np.random.default_rng(11)
        m_t = rng.normal(size=(4, 2))
        eps = rng.normal(size=(4, 2))
        a = ddim_step(schedule, m_t, eps, 80, 60)
        b = ddim_step(schedule, m_t, eps, 80, 60)
        np.testing.assert_array_equal(a, b)

    def test_matches_straight_line_oracle(self, schedule):
        rng = np.random.default_rng(12)
        m_t = rng.normal(size=(3, 2))
        eps = rng.normal(size=(3, 2))
        t, t_prev = 73, 33
        abar, abar_prev = schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev)
        m0_hat = (m_t - math.sqrt(1 - abar) * eps) / math.sqrt(abar)
        expected = math.sqrt(abar_prev) * m0_hat + math.sqrt(1 - abar_prev) * eps
        np.testing.assert_allclose(ddim_step(schedule, m_t, eps, t, t_prev),
                                   expected, atol=1e-6)

    def test_ordering_violation_rejected(self, schedule):
        with pytest.raises(ValueError, match="t_prev"):
            ddim_step(schedule, np.zeros(2), np.zeros(2), 10, 10)
        with pytest.raises(ValueError, match="t_prev"):
            ddim_step(schedule, np.zeros(2), np.zeros(2), 10, 20)


class TestSamplingSteps:
    def test_full_coverage(self):
        assert sampling_steps(10, 10) == [10, 9, 8, 7, 6, 5, 4, 3, 2, 1]

    def test_even_spacing_endpoints(self):
        ts = sampling_steps(100, 10)
        assert ts[0] == 100 and ts[-1] == 1 and len(ts) == 10
        assert all(a > b for a, b in zip(ts, ts[1:]))

    def test_single_step(self):
        assert sampling_steps(100, 1) == [100]

    def test_bounds(self):
        with pytest.raises(ValueError):
            sampling_steps(100, 0)
        with pytest.raises(ValueError):
            sampling_steps(100, 101)


class _OracleModel:
    """Stand-in denoiser returning a fixed clean motion regardless of input."""

    def __init__(self, m0):
        self._m0 = np.asarray(m0, dtype=np.float32)
        self.d_motion = self._m0.shape[-1]

    def __call__(self, m_t, t, caption):
        data = np.asarray(m_t.data if isinstance(m_t, Tensor) else m_t)
        if data.ndim == 3:
            return Tensor(np.broadcast_to(self._m0, data.shape).copy())
        return Tensor(self._m0.copy())


class TestTrainingLoss:
    def test_perfect_model_zero_loss(self, schedule):
        m0 = np.random.default_rng(13).normal(size=(6, 3)).astype(np.float32)
        loss = training_loss(_OracleModel(m0), schedule, m0, 1,
                             np.random.default_rng(0), 0.2)
        assert loss.item() == pytest.approx(0.0, abs=1e-10)

    def test_zero_model_loss_is_signal_power(self, schedule):
        m0 = np.random.default_rng(14).normal(size=(8, 4)).astype(np.float32)
        loss = training_loss(_OracleModel(np.zeros((8, 4))), schedule, m0, 1,
                             np.random.default_rng(0), 0.0)
        assert loss.item() == pytest.approx(float(np.mean(m0 ** 2)), rel=1e-6)

    def test_full_dropout_always_uses_null_condition(self, schedule):
        captions_seen = []

        class Spy(_OracleModel):
            def __call__(self, m_t, t, caption):
                captions_seen.append(caption)
                return super().__call__(m_t, t, caption)

        m0 = np.zeros((4, 2), dtype=np.float32)
        rng = np.random.default_rng(15)
        for _ in range(20):
            training_loss(Spy(m0), schedule, m0, caption=3, rng=rng, cond_dropout=1.0)
        assert captions_seen == [None] * 20

    def test_no_dropout_always_conditions(self, schedule):
        captions_seen = []

        class Spy(_OracleModel):
            def __call__(self, m_t, t, caption):
                captions_seen.append(caption)
                return super().__call__(m_t, t, caption)

        m0 = np.zeros((4, 2), dtype=np.float32)
        rng = np.random.default_rng(16)
        for _ in range(10):
            training_loss(Spy(m0), schedule, m0, caption=5, rng=rng, cond_dropout=0.0)
        assert captions_seen == [5] * 10


class TestSampling:
    @pytest.fixture
    def model(self):
        rng = np.random.default_rng(30)
        return MotionDenoiser(d_motion=4, d_model=16, n_blocks=1, stride=4,
                              timesteps=50, vocab=8, rng=rng)

    def test_fixed_seed_bitwise_reproducible(self, model):
        schedule = build_schedule(50)

        def run():
            rng = np.random.Generator(np.random.Philox(7))
            return sample_sequence(model, schedule, 2, length=12, steps=5,
                                   sampler="ddim", guidance_scale=4.0, rng=rng)

        assert np.array_equal(run(), run())

    def test_zero_guidance_matches_conditional_only_trajectory(self, model):
        schedule = build_schedule(50)
        rng = np.random.Generator(np.random.Philox(8))
        got = sample_sequence(model, schedule, 3, length=10, steps=5,
                              sampler="ddim", guidance_scale=0.0, rng=rng)

        # conditional-only reference: never calls the null path
        rng2 = np.random.Generator(np.random.Philox(8))
        m = rng2.standard_normal((10, 4)).astype(np.float32)
        ts = sampling_steps(50, 5)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            m0_hat = model(m, t, 3).numpy()
            eps = noise_from_clean(schedule, m, m0_hat, t)
            m = ddim_step(schedule, m, eps, t, t_prev)
        assert np.array_equal(got, m)

    def test_ddpm_trajectory_consumes_rng(self, model):
        schedule = build_schedule(50)
        rng = np.random.Generator(np.random.Philox(9))
        out = sample_sequence(model, schedule, 0, length=8, steps=5,
                              sampler="ddpm", guidance_scale=1.0, rng=rng)
        assert out.shape == (8, 4) and np.isfinite(out).all()

    def test_unknown_sampler_rejected(self, model):
        with pytest.raises(ValueError, match="sampler"):
            sample_sequence(model, build_schedule(50), 0, 8, 5, "euler", 1.0,
                            np.random.default_rng(0))

    def test_batched_sampling_shape(self, model):
        schedule = build_schedule(50)
        rng = np.random.Generator(np.random.Philox(10))
        out = sample_sequence(model, schedule, [0, 1, 2], length=8, steps=3,
                              sampler="ddim", guidance_scale=2.0, rng=rng, count=3)
        assert out.shape == (3, 8, 4)
