"""The tiny trainable noise predictor: forward pass, analytic gradients
against finite differences, optimization, and serialization."""

import numpy as np
import pytest

from latentedit.denoiser import GMMPrior
from latentedit.grid import LatentGrid, RngStream
from latentedit.sampler import DivergenceError, SamplerConfig, sample_chains
from latentedit.schedule import build_schedule
from latentedit.training import (
    PARAM_NAMES,
    TinyDenoiser,
    TrainConfig,
    chain_denoiser,
    forward,
    heldout_loss,
    load_model,
    loss_and_grad,
    model_denoiser,
    save_model,
    train,
)

GOLDEN_FORWARD = [
    0.7746242913790027,
    0.2549782640156503,
    -0.2928838912565952,
    0.10495041207434891,
]


def zero_model(d=2, T=10, hidden=4, embed=4):
    model = TinyDenoiser.init(d=d, T=T, hidden=hidden, embed_dim=embed, seed=0)
    for name in PARAM_NAMES:
        getattr(model, name)[...] = 0.0
    return model


class TestForward:
    def test_zero_parameters_give_zero_output(self):
        model = zero_model()
        z = LatentGrid.from_flat([1.0, -2.0], 2, 1, 1)
        assert np.array_equal(forward(model, z, 3).data, np.zeros((2, 1, 1)))

    def test_output_bias_passthrough(self):
        model = zero_model()
        model.b2[...] = 1.5
        z = LatentGrid.from_flat([1.0, -2.0], 2, 1, 1)
        np.testing.assert_array_equal(forward(model, z, 3).flat(), [1.5, 1.5])

    def test_seeded_model_golden_values(self):
        # frozen from the first run of this configuration
        model = TinyDenoiser.init(d=4, T=20, hidden=8, embed_dim=8, seed=42)
        z = LatentGrid.from_flat([0.25, -0.5, 1.0, 2.0], 2, 2, 1)
        np.testing.assert_allclose(forward(model, z, 7).flat(), GOLDEN_FORWARD, rtol=1e-15)

    def test_dim_and_timestep_validation(self):
        model = zero_model(d=2, T=10)
        with pytest.raises(ValueError, match="model expects 2"):
            forward(model, LatentGrid.constant(0.0, 3, 1, 1), 1)
        with pytest.raises(ValueError, match="out of range"):
            forward(model, LatentGrid.constant(0.0, 2, 1, 1), 11)

    def test_init_rejects_oversized_latents(self):
        with pytest.raises(ValueError, match=r"\[1, 64\]"):
            TinyDenoiser.init(d=65, T=10)


class TestLossAndGrad:
    def test_perfect_prediction_gives_zero_loss_and_grads(self, sched50):
        model = zero_model(d=2, T=50)
        z0 = np.zeros((4, 2))
        t = np.array([1, 10, 20, 50])
        eps = np.zeros((4, 2))
        loss, grads = loss_and_grad(model, (z0, t, eps), sched50)
        assert loss == 0.0
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grads.values())

    def test_single_unit_network_hand_derivation(self):
        # d=1, H=1, E=1: pred = w2 * tanh(w1z * z_t + w1e * e + b1) + b2
        sched = build_schedule("linear", 1, 0.36, 0.36)  # alpha_bar = 0.64
        model = TinyDenoiser.init(d=1, T=1, hidden=1, embed_dim=1, seed=0)
        w1z, w1e, b1, w2, b2 = 0.5, -0.3, 0.2, 1.25, -0.4
        model.W1[...] = [[w1z, w1e]]
        model.b1[...] = [b1]
        model.W2[...] = [[w2]]
        model.b2[...] = [b2]
        z0, eps = 1.5, -0.7
        z_t = np.sqrt(0.64) * z0 + np.sqrt(0.36) * eps
        embed = model.time_embed[0, 0]
        pre = w1z * z_t + w1e * embed + b1
        h = np.tanh(pre)
        pred = w2 * h + b2
        resid = pred - eps
        loss, grads = loss_and_grad(
            model, (np.array([[z0]]), np.array([1]), np.array([[eps]])), sched,
        )
        np.testing.assert_allclose(loss, resid**2, rtol=1e-12)
        np.testing.assert_allclose(grads["b2"][0], 2 * resid, rtol=1e-12)
        np.testing.assert_allclose(grads["W2"][0, 0], 2 * resid * h, rtol=1e-12)
        d_pre = 2 * resid * w2 * (1 - h**2)
        np.testing.assert_allclose(grads["b1"][0], d_pre, rtol=1e-12)
        np.testing.assert_allclose(grads["W1"][0, 0], d_pre * z_t, rtol=1e-12)
        np.testing.assert_allclose(grads["W1"][0, 1], d_pre * embed, rtol=1e-12)

    @pytest.mark.parametrize("d", [1, 4, 16])
    def test_gradients_match_finite_differences(self, d):
        # acceptance criterion 4 runs the full 10-point sweep; one point here
        sched = build_schedule("linear", 30, 1e-3, 0.06)
        model = TinyDenoiser.init(d=d, T=30, hidden=64, embed_dim=8, seed=d)
        stream = RngStream(100 + d)
        z0 = stream.normal((8, d))
        t = np.minimum((stream.uniform((8,)) * 30).astype(np.int64) + 1, 30)
        eps = stream.normal((8, d))
        _, grads = loss_and_grad(model, (z0, t, eps), sched)
        step = 1e-5
        for name in PARAM_NAMES:
            flat = getattr(model, name).reshape(-1)
            for idx in range(0, flat.size, max(1, flat.size // 7)):
                orig = flat[idx]
                flat[idx] = orig + step
                up, _ = loss_and_grad(model, (z0, t, eps), sched)
                flat[idx] = orig - step
                down, _ = loss_and_grad(model, (z0, t, eps), sched)
                flat[idx] = orig
                numeric = (up - down) / (2 * step)
                analytic = grads[name].reshape(-1)[idx]
                assert abs(analytic - numeric) <= 1e-4 * max(abs(numeric), 1e-8), (
                    f"{name}[{idx}]: analytic {analytic} vs numeric {numeric}"
                )

    def test_empty_batch_rejected(self, sched50):
        model = zero_model(d=1, T=50)
        with pytest.raises(ValueError, match="nonempty"):
            loss_and_grad(model, (np.zeros((0, 1)), np.zeros(0, dtype=int), np.zeros((0, 1))), sched50)


class TestTrain:
    @pytest.fixture
    def prior(self):
        return GMMPrior.scalar([0.5, 0.5], [-2.0, 2.0], [0.25, 0.25])

    def test_zero_learning_rate_keeps_parameters(self, prior, sched50):
        model = TinyDenoiser.init(d=1, T=50, hidden=16, seed=2)
        before = {k: v.copy() for k, v in model.params().items()}
        cfg = TrainConfig(learning_rate=0.0, batch_size=256, steps=100, seed=2)
        trained, trace = train(model, prior, sched50, cfg)
        assert all(np.array_equal(before[k], getattr(trained, k)) for k in PARAM_NAMES)
        # flat trace: batches are fresh draws, so only the trend must vanish
        # (a real training run drops by ~0.5 over this many steps)
        assert abs(trace[:50].mean() - trace[50:].mean()) < 0.1

    def test_same_seed_identical_traces(self, prior, sched50):
        cfg = TrainConfig(learning_rate=0.01, batch_size=16, steps=60, seed=5)
        model = TinyDenoiser.init(d=1, T=50, hidden=16, seed=2)
        _, trace_a = train(model, prior, sched50, cfg)
        _, trace_b = train(model, prior, sched50, cfg)
        assert np.array_equal(trace_a, trace_b)

    def test_training_does_not_mutate_input_model(self, prior, sched50):
        model = TinyDenoiser.init(d=1, T=50, hidden=16, seed=2)
        before = model.W1.copy()
        cfg = TrainConfig(learning_rate=0.05, batch_size=16, steps=30, seed=5)
        train(model, prior, sched50, cfg)
        assert np.array_equal(model.W1, before)

    def test_divergence_error_on_huge_rate(self, prior, sched50):
        model = TinyDenoiser.init(d=1, T=50, hidden=16, seed=2)
        cfg = TrainConfig(learning_rate=1e18, batch_size=8, steps=200, seed=5)
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergenceError):
            train(model, prior, sched50, cfg)

    def test_loss_descends_toward_bayes_floor(self, prior, sched50):
        # the full 1.15x-floor criterion is acceptance 5; quick sanity here
        model = TinyDenoiser.init(d=1, T=50, hidden=64, seed=1)
        cfg = TrainConfig(learning_rate=0.004, batch_size=64, steps=1500,
                          seed=1, optimizer="adam")
        trained, trace = train(model, prior, sched50, cfg)
        start = heldout_loss(model, prior, sched50, 20000, RngStream(7))
        end = heldout_loss(trained, prior, sched50, 20000, RngStream(7))
        assert end < start
        assert end < 0.55

    def test_trained_sampler_moments(self, prior, sched50):
        # trained model in the sampler slot: moments within the sampler
        # tolerances relaxed by 2x
        model = TinyDenoiser.init(d=1, T=50, hidden=64, seed=1)
        cfg = TrainConfig(learning_rate=0.004, batch_size=128, steps=4000,
                          seed=1, optimizer="adam")
        trained, _ = train(model, prior, sched50, cfg)
        z = sample_chains(chain_denoiser(trained), 6000, sched50,
                          SamplerConfig(), RngStream(71), prior_init=prior)
        assert abs(z.mean() - 0.0) < 0.2
        assert abs(z.var() - 4.0625) / 4.0625 < 0.2

    def test_config_validation(self):
        with pytest.raises(ValueError, match="batch size"):
            TrainConfig(learning_rate=0.1, batch_size=0, steps=1)
        with pytest.raises(ValueError, match="optimizer"):
            TrainConfig(learning_rate=0.1, batch_size=1, steps=1, optimizer="lbfgs")


class TestSerialization:
    def test_roundtrip_preserves_everything(self, tmp_path):
        model = TinyDenoiser.init(d=3, T=12, hidden=6, embed_dim=4, seed=9)
        path = str(tmp_path / "model.params")
        save_model(model, path)
        back = load_model(path)
        for name in (*PARAM_NAMES, "time_embed"):
            assert np.array_equal(getattr(model, name), getattr(back, name))
        z = LatentGrid.constant(0.4, 3, 1, 1)
        assert np.array_equal(forward(model, z, 5).data, forward(back, z, 5).data)

    def test_missing_parameter_detected(self, tmp_path):
        path = str(tmp_path / "model.params")
        with open(path, "w") as fh:
            fh.write("PARAM W1\nGRID 1 2 1\n0.0 0.0\n")
        with pytest.raises(Exception, match="missing parameters"):
            load_model(path)


class TestDenoiserAdapters:
    def test_model_denoiser_matches_forward(self):
        model = TinyDenoiser.init(d=4, T=10, hidden=8, seed=3)
        z = LatentGrid.from_flat([0.1, 0.2, 0.3, 0.4], 2, 2, 1)
        a = model_denoiser(model)(z, 4)
        b = forward(model, z, 4)
        assert np.array_equal(a.data, b.data)

    def test_chain_denoiser_requires_dim_one(self):
        model = TinyDenoiser.init(d=2, T=10, hidden=8, seed=3)
        with pytest.raises(ValueError, match="dim-1"):
            chain_denoiser(model)
