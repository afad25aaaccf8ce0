import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from divelab.autoencoder import Autoencoder, AutoencoderConfig, fit_autoencoder
from divelab.diffusion import (DenoiserConfig, NoiseSchedule, build_schedule, denoise_step,
                               denoiser_loss, draw_training_batch, forward_diffuse, init_denoiser,
                               predict_x0, reverse_process, sample, sampling_timesteps,
                               train_denoiser)
from divelab.errors import (ArgumentError, ScheduleError, SingularityError, TrainingError)
from divelab.rng import stream

# high-precision values computed with decimal arithmetic at 50 digits
ABAR_1000 = 4.0358297653756833e-05
FWD_EXAMPLE = 4.4641016151377546
DENOISE_EXAMPLE = 3.5435595774162694


def two_step(a1=0.81, a2=0.25):
    return NoiseSchedule.from_alpha_bar([a1, a2])


class TestSchedule:
    def test_linear_endpoint_matches_running_product(self):
        s = build_schedule(1000)
        assert s.alpha_bar[-1] < 1e-4
        assert s.alpha_bar[-1] == pytest.approx(ABAR_1000, rel=1e-10)

    @pytest.mark.parametrize("kind", ["linear-beta", "cosine"])
    def test_strictly_decreasing_and_ready(self, kind):
        s = build_schedule(1000, kind)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert s.diffusion_ready

    def test_two_step_hand_product(self):
        s = build_schedule(2, beta_start=0.1, beta_end=0.1)
        np.testing.assert_allclose(s.alpha_bar, [0.9, 0.81], rtol=0, atol=1e-15)
        assert not s.diffusion_ready
        with pytest.raises(ScheduleError):
            s.require_diffusion_ready()

    def test_sqrt_caches(self):
        s = build_schedule(1000)
        np.testing.assert_allclose(s.sqrt_alpha_bar ** 2, s.alpha_bar, rtol=4e-16)
        np.testing.assert_allclose(s.sqrt_one_minus_alpha_bar, np.sqrt(1 - s.alpha_bar), rtol=0)

    def test_non_monotone_names_index(self):
        with pytest.raises(ScheduleError) as err:
            NoiseSchedule.from_alpha_bar([0.99, 0.5, 0.6, 0.001])
        assert err.value.index == 3

    def test_out_of_range_names_index(self):
        with pytest.raises(ScheduleError) as err:
            NoiseSchedule.from_alpha_bar([0.99, 0.0])
        assert err.value.index == 2

    @pytest.mark.parametrize("bad", [dict(T=1), dict(beta_start=0.0), dict(beta_end=1.0),
                                     dict(kind="quadratic")])
    def test_bad_parameters(self, bad):
        with pytest.raises(ScheduleError):
            build_schedule(**{"T": 10, **bad})


class TestForwardAndInverse:
    def test_forward_hand_value(self):
        x = forward_diffuse(np.array([2.0]), 2, np.array([4.0]), two_step())
        assert x[0] == pytest.approx(FWD_EXAMPLE, abs=1e-12)

    def test_forward_endpoints(self):
        s = NoiseSchedule.from_alpha_bar([0.5, 1e-300])
        x0, eps = np.array([1.5, -2.0]), np.array([0.3, 0.7])
        np.testing.assert_array_equal(forward_diffuse(x0, 0, eps, s), x0)
        np.testing.assert_allclose(forward_diffuse(x0, 2, eps, s), eps, atol=1e-150)

    def test_forward_shape_mismatch(self):
        with pytest.raises(ArgumentError):
            forward_diffuse(np.zeros(3), 1, np.zeros(4), two_step())

    def test_predict_x0_hand_value(self):
        x0 = predict_x0(np.array([4.4641016]), np.array([4.0]), 2, two_step())
        assert x0[0] == pytest.approx(2.0, abs=1e-7)

    def test_predict_x0_identity_at_zero_noise(self):
        x = np.array([0.1, 7.0])
        np.testing.assert_array_equal(predict_x0(x, np.array([5.0, 5.0]), 0, two_step()), x)

    def test_predict_x0_singular(self):
        class Zero:
            def abar(self, t):
                return np.float64(0.0)
        with pytest.raises(SingularityError):
            predict_x0(np.zeros(2), np.zeros(2), 1, Zero())

    @settings(max_examples=60, deadline=None)
    @given(t=st.integers(1, 1000), seed=st.integers(0, 2**32 - 1))
    def test_round_trip(self, t, seed):
        s = build_schedule(1000)
        r = stream(seed, "round-trip")
        x0, eps = r.normal(size=(2, 5)), r.normal(size=(2, 5))
        back = predict_x0(forward_diffuse(x0, t, eps, s), eps, t, s)
        assert np.max(np.abs(back - x0) / np.maximum(np.abs(x0), 1e-3)) <= 1e-6

    def test_marginal_statistics(self):
        s = build_schedule(1000)
        t, x0 = 300, np.array([1.7])
        eps = stream(0, "marginal").standard_normal((200_000, 1))
        xt = forward_diffuse(np.broadcast_to(x0, eps.shape), t, eps, s)
        n = len(xt)
        ab = s.abar(t)
        assert abs(xt.mean() - math.sqrt(ab) * 1.7) < 3 * math.sqrt((1 - ab) / n)
        var_se = (1 - ab) * math.sqrt(2 / (n - 1))
        assert abs(xt.var(ddof=1) - (1 - ab)) < 3 * var_se


class TestDenoiseStep:
    def test_hand_value(self):
        s = two_step()
        # pick x_t so that x0_hat = 2 at abar 0.25 with eps = 4
        x_t = forward_diffuse(np.array([2.0]), 2, np.array([4.0]), s)
        out = denoise_step(x_t, np.array([4.0]), 2, 1, s, eta=0.0)
        assert out[0] == pytest.approx(DENOISE_EXAMPLE, abs=1e-7)

    def test_same_step_is_identity(self):
        x = np.array([0.3, -1.1])
        out = denoise_step(x, np.array([9.0, 9.0]), 2, 2, two_step())
        np.testing.assert_array_equal(out, x)
        assert out is not x

    def test_bad_ordering(self):
        with pytest.raises(ArgumentError):
            denoise_step(np.zeros(1), np.zeros(1), 1, 2, two_step())

    def test_eta_needs_noise_source(self):
        with pytest.raises(ArgumentError):
            denoise_step(np.zeros(1), np.zeros(1), 2, 1, two_step(), eta=1.0)

    def test_eta_one_uses_noise(self):
        s = two_step()
        a = denoise_step(np.ones(1), np.zeros(1), 2, 1, s, eta=1.0, noise=np.zeros(1))
        b = denoise_step(np.ones(1), np.zeros(1), 2, 1, s, eta=1.0, noise=np.ones(1))
        assert b[0] > a[0]

    def test_timesteps(self):
        assert sampling_timesteps(1000, 4) == [1000, 750, 500, 250, 0]
        with pytest.raises(ArgumentError):
            sampling_timesteps(10, 11)


class TestTraining:
    def test_zero_steps_returns_seeded_init(self):
        s = build_schedule(100, beta_end=0.2)
        corpus = np.zeros((4, 2))
        model, hist = train_denoiser(corpus, s, DenoiserConfig(steps=0, hidden=(8,)), seed=5)
        ref = init_denoiser((2,), s, DenoiserConfig(hidden=(8,)), seed=5)
        assert hist == []
        for a, b in zip(model.net.parameters(), ref.net.parameters()):
            assert torch.equal(a, b)

    def test_single_batch_loss_recomputed(self):
        s = build_schedule(100, beta_end=0.2)
        cfg = DenoiserConfig(steps=1, batch_size=8, hidden=(8,), ema=0.0)
        corpus = stream(0, "c").normal(size=(16, 3))
        init = init_denoiser((3,), s, cfg, seed=2)
        _, t, eps, x_t = draw_training_batch(corpus, s, stream(2, "train-denoiser"), 8)
        with torch.no_grad():
            first = denoiser_loss(init, x_t, t, eps)
        _, hist = train_denoiser(corpus, s, cfg, seed=2)
        assert hist[0] == pytest.approx(float(first), rel=1e-6)

    def test_deterministic(self):
        s = build_schedule(100, beta_end=0.2)
        cfg = DenoiserConfig(steps=20, batch_size=8, hidden=(8,))
        corpus = stream(0, "c").normal(size=(16, 3))
        m1, h1 = train_denoiser(corpus, s, cfg, seed=9)
        m2, h2 = train_denoiser(corpus, s, cfg, seed=9)
        assert h1 == h2
        for a, b in zip(m1.net.parameters(), m2.net.parameters()):
            assert torch.equal(a, b)

    def test_non_finite_loss(self):
        s = build_schedule(100, beta_end=0.2)
        corpus = np.full((4, 2), 1e200)
        with pytest.raises(TrainingError) as err:
            train_denoiser(corpus, s, DenoiserConfig(steps=3, hidden=(8,)), seed=0)
        assert err.value.step == 0

    def test_rejects_unready_schedule(self):
        with pytest.raises(ScheduleError):
            train_denoiser(np.zeros((2, 1)), build_schedule(2, beta_start=0.1, beta_end=0.1),
                           DenoiserConfig(steps=1, hidden=(8,)))

    @pytest.mark.slow
    def test_bimodal_histogram(self):
        s = build_schedule(1000)
        corpus = np.array([[-1.0], [1.0]] * 64)
        cfg = DenoiserConfig(steps=5000, batch_size=128, hidden=(64, 64), lr=3e-3, lr_final=3e-4)
        model, _ = train_denoiser(corpus, s, cfg, seed=0)
        x = sample(model, s, 1000, steps=100, seed=1)[:, 0]
        near = np.minimum(np.abs(x - 1), np.abs(x + 1)) <= 0.25
        assert near.mean() >= 0.9


@pytest.fixture(scope="module")
def tiny():
    s = build_schedule(100, beta_end=0.2)
    model = init_denoiser((3, 8, 8), s, DenoiserConfig(width=4, emb_dim=8), seed=0)
    return model, s


class TestSampling:
    def test_reproducible(self, tiny):
        model, s = tiny
        a = sample(model, s, 3, steps=5, seed=4)
        b = sample(model, s, 3, steps=5, seed=4)
        np.testing.assert_array_equal(a, b)

    def test_chain_streams_independent_of_batch(self, tiny):
        model, s = tiny
        both = reverse_process(model, s, 2, 5, seed=4)
        second = reverse_process(model, s, 1, 5, seed=4, chain_offset=1)
        # batch composition only changes float32 reduction order
        np.testing.assert_allclose(both[1:], second, rtol=1e-5, atol=1e-5)

    def test_hook_replaces_eps(self, tiny):
        model, s = tiny
        calls = []

        def hook(k, t, x, eps):
            calls.append(t)
            return eps

        a = reverse_process(model, s, 2, 4, seed=1, hook=hook)
        np.testing.assert_array_equal(a, sample(model, s, 2, steps=4, seed=1))
        assert calls == [100, 75, 50, 25]


class TestAutoencoder:
    def test_identity_round_trip(self, rng):
        ae = fit_autoencoder(None, AutoencoderConfig(mode="identity"), image_shape=(3, 6, 6))
        x = rng.uniform(size=(2, 3, 6, 6))
        np.testing.assert_array_equal(ae.decode(ae.encode(x)), x)
        np.testing.assert_array_equal(ae.encode(x), x)

    def test_affine_round_trip(self, rng):
        ae = Autoencoder.affine((3, 6, 6))
        x = rng.uniform(size=(2, 3, 6, 6))
        np.testing.assert_allclose(ae.decode(ae.encode(x)), x, atol=1e-15)
        assert ae.encode(x).min() >= -1 and ae.encode(x).max() <= 1

    def test_learned_threshold(self, small_world):
        cfg = AutoencoderConfig(mode="learned", width=8, steps=5, threshold=1e-9)
        with pytest.raises(TrainingError):
            fit_autoencoder(small_world.images[:32], cfg, seed=0)

    def test_learned_reports_mse(self, small_world):
        cfg = AutoencoderConfig(mode="learned", width=8, steps=30, threshold=1.0)
        ae = fit_autoencoder(small_world.images[:64], cfg, seed=0)
        assert 0 < ae.reconstruction_mse < 1.0
        assert ae.latent_shape == (4, 6, 6)
