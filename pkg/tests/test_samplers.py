"""Sampler determinism, budget accounting, and cross-sampler equivalences.

The exact-inversion oracle denoiser lets ancestral sampling be tested
against ground truth independent of any trained model; the one-step
equivalence tests pin the reduced-budget samplers to the ancestral
update algebraically.
"""

import numpy as np
import pytest

from maskdiff.data import make_synthetic_dataset
from maskdiff.evaluation import dsc
from maskdiff.samplers import (
    CountingDenoiser,
    DenoiserContractError,
    OracleDenoiser,
    SamplerConfig,
    ancestral_sample,
    binarize,
    ddim_sample,
    ddim_step,
    dpm2_sample,
    reduced_timesteps,
    sample,
)
from maskdiff.schedule import make_linear_schedule, reverse_step


@pytest.fixture(scope="module")
def schedule():
    return make_linear_schedule(50)


def zero_denoiser(x_t, image, t):
    return np.zeros_like(x_t)


class TestSamplerConfig:
    def test_bad_kind(self):
        with pytest.raises(ValueError):
            SamplerConfig(kind="euler")

    def test_ancestral_nfe_must_match_T(self, schedule):
        cfg = SamplerConfig(kind="ancestral", nfe=10)
        with pytest.raises(ValueError):
            cfg.resolve_nfe(schedule)
        assert SamplerConfig(kind="ancestral").resolve_nfe(schedule) == 50

    def test_nfe_exceeding_T(self, schedule):
        with pytest.raises(ValueError):
            SamplerConfig(kind="ddim", nfe=51).resolve_nfe(schedule)

    def test_eta_range(self):
        with pytest.raises(ValueError):
            SamplerConfig(kind="ddim", nfe=10, eta=1.5)


class TestAncestral:
    def test_oracle_reconstruction(self, schedule):
        """With the exact-inversion oracle the full reverse chain must land
        on the true mask almost perfectly."""
        sample_ = make_synthetic_dataset(1, size=32, seed=5)[0]
        x0_true = sample_.diffusion_target
        oracle = OracleDenoiser(x0_true, schedule)
        x0 = ancestral_sample(oracle, sample_.image, schedule, seed=3)
        assert dsc(binarize(x0), sample_.mask) >= 0.99
        np.testing.assert_allclose(x0, x0_true, atol=1e-8)

    def test_deterministic_under_seed(self, schedule):
        image = np.random.default_rng(0).uniform(-1, 1, (16, 16))
        a = ancestral_sample(zero_denoiser, image, schedule, seed=11)
        b = ancestral_sample(zero_denoiser, image, schedule, seed=11)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self, schedule):
        image = np.zeros((16, 16))
        a = ancestral_sample(zero_denoiser, image, schedule, seed=1)
        b = ancestral_sample(zero_denoiser, image, schedule, seed=2)
        assert np.any(a != b)

    def test_x_T_half_normal_statistics(self, schedule):
        """The captured starting state must look like unit Gaussian noise:
        mean |x_T| near sqrt(2/pi) within Monte-Carlo error."""
        captured = {}

        def capturing(x_t, image, t):
            if t == schedule.T:
                captured["x_T"] = x_t.copy()
            return np.zeros_like(x_t)

        image = np.zeros((100, 100))
        ancestral_sample(capturing, image, schedule, seed=21)
        x_T = captured["x_T"]
        n = x_T.size
        want = np.sqrt(2.0 / np.pi)
        half_normal_var = 1.0 - 2.0 / np.pi
        se = np.sqrt(half_normal_var / n)
        assert abs(np.abs(x_T).mean() - want) < 3.0 * se

    def test_nfe_equals_T(self, schedule):
        counting = CountingDenoiser(zero_denoiser)
        ancestral_sample(counting, np.zeros((8, 8)), schedule, seed=0)
        assert counting.calls == schedule.T

    def test_denoiser_contract_enforced(self, schedule):
        def bad(x_t, image, t):
            return np.zeros((2, 2))

        with pytest.raises(DenoiserContractError):
            ancestral_sample(bad, np.zeros((8, 8)), schedule, seed=0)

    def test_batched_matches_per_item_noise(self, schedule):
        """Each item of a batched call uses its own seed stream, so the
        noise of image i only depends on its seed."""
        captured = {}

        def capturing(x_t, image, t):
            if t == schedule.T:
                captured.setdefault("first", x_t.copy())
            return np.zeros_like(x_t)

        images = np.zeros((3, 8, 8))
        ancestral_sample(capturing, images, schedule, seed=[5, 6, 7])
        batch_xT = captured["first"]
        captured.clear()
        ancestral_sample(capturing, images[1], schedule, seed=6)
        np.testing.assert_array_equal(captured["first"][0], batch_xT[1])


class TestReducedTimesteps:
    def test_endpoints(self):
        steps = reduced_timesteps(200, 10)
        assert steps[0] == 200 and steps[-1] == 1
        assert len(steps) == 10
        assert len(set(steps)) == 10

    def test_full_grid(self):
        assert reduced_timesteps(10, 10) == list(range(10, 0, -1))

    def test_single_step(self):
        assert reduced_timesteps(100, 1) == [100]


class TestDdim:
    def test_deterministic_eta0(self, schedule):
        image = np.random.default_rng(1).uniform(-1, 1, (12, 12))
        cfg = SamplerConfig(kind="ddim", nfe=10, eta=0.0, seed=4)
        oracle = OracleDenoiser(np.zeros((12, 12)), schedule)
        a = ddim_sample(oracle, image, schedule, cfg)
        b = ddim_sample(oracle, image, schedule, cfg)
        np.testing.assert_array_equal(a, b)

    def test_eta1_full_grid_step_matches_ancestral(self, schedule):
        """A single eta=1 jump t -> t-1 must coincide with the ancestral
        update using the lower-variance option, for the same z."""
        tilde = schedule.with_variance_choice("beta_tilde")
        rng = np.random.default_rng(2)
        x_t = rng.standard_normal((6, 6))
        eps_hat = rng.standard_normal((6, 6))
        for t in (2, 17, 50):
            z = rng.standard_normal((6, 6)) if t > 1 else np.zeros((6, 6))
            got = ddim_step(x_t, t, t - 1, eps_hat, z, 1.0, schedule)
            want = reverse_step(x_t, t, eps_hat, z, tilde)
            np.testing.assert_allclose(got, want, atol=1e-6)

    def test_nfe_accounting(self, schedule):
        for nfe in (1, 7, 25, 50):
            counting = CountingDenoiser(zero_denoiser)
            cfg = SamplerConfig(kind="ddim", nfe=nfe, seed=0)
            ddim_sample(counting, np.zeros((8, 8)), schedule, cfg)
            assert counting.calls == nfe

    def test_oracle_reconstruction_reduced_budget(self, schedule):
        sample_ = make_synthetic_dataset(1, size=32, seed=6)[0]
        oracle = OracleDenoiser(sample_.diffusion_target, schedule)
        cfg = SamplerConfig(kind="ddim", nfe=10, seed=9)
        x0 = ddim_sample(oracle, sample_.image, schedule, cfg)
        assert dsc(binarize(x0), sample_.mask) >= 0.99


class TestDpm2:
    def test_odd_nfe_rejected(self, schedule):
        cfg = SamplerConfig(kind="dpm2", nfe=9, seed=0)
        with pytest.raises(ValueError):
            dpm2_sample(zero_denoiser, np.zeros((8, 8)), schedule, cfg)

    def test_nfe_accounting(self, schedule):
        for nfe in (2, 10, 20):
            counting = CountingDenoiser(zero_denoiser)
            cfg = SamplerConfig(kind="dpm2", nfe=nfe, seed=0)
            dpm2_sample(counting, np.zeros((8, 8)), schedule, cfg)
            assert counting.calls == nfe

    def test_constant_denoiser_matches_ddim(self, schedule):
        """A denoiser independent of x and t kills the second-order
        correction, so the final sample must match the strided
        deterministic sampler exactly."""
        rng = np.random.default_rng(3)
        const = rng.standard_normal((10, 10))

        def const_denoiser(x_t, image, t):
            return np.broadcast_to(const, x_t.shape).copy()

        image = np.zeros((10, 10))
        got = dpm2_sample(
            const_denoiser, image, schedule, SamplerConfig(kind="dpm2", nfe=10, seed=8)
        )
        want = ddim_sample(
            const_denoiser, image, schedule, SamplerConfig(kind="ddim", nfe=10, seed=8)
        )
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_deterministic(self, schedule):
        oracle = OracleDenoiser(np.zeros((8, 8)), schedule)
        cfg = SamplerConfig(kind="dpm2", nfe=10, seed=14)
        a = dpm2_sample(oracle, np.zeros((8, 8)), schedule, cfg)
        b = dpm2_sample(oracle, np.zeros((8, 8)), schedule, cfg)
        np.testing.assert_array_equal(a, b)

    def test_oracle_reconstruction(self, schedule):
        sample_ = make_synthetic_dataset(1, size=32, seed=7)[0]
        oracle = OracleDenoiser(sample_.diffusion_target, schedule)
        cfg = SamplerConfig(kind="dpm2", nfe=10, seed=2)
        x0 = dpm2_sample(oracle, sample_.image, schedule, cfg)
        assert dsc(binarize(x0), sample_.mask) >= 0.99


class TestBinarize:
    def test_all_negative(self):
        np.testing.assert_array_equal(binarize(-np.ones((3, 3))), np.zeros((3, 3)))

    def test_all_positive(self):
        np.testing.assert_array_equal(binarize(np.ones((3, 3))), np.ones((3, 3)))

    def test_exact_threshold_maps_to_zero(self):
        assert binarize(np.array([0.0]), 0.0)[0] == 0
        assert binarize(np.array([1e-12]), 0.0)[0] == 1


class TestDispatchAndCallbacks:
    def test_sample_dispatch(self, schedule):
        image = np.zeros((8, 8))
        for cfg in (
            SamplerConfig(kind="ancestral", seed=1),
            SamplerConfig(kind="ddim", nfe=5, seed=1),
            SamplerConfig(kind="dpm2", nfe=6, seed=1),
        ):
            out = sample(zero_denoiser, image, schedule, cfg)
            assert out.shape == (8, 8)

    def test_on_step_sees_descending_steps(self, schedule):
        seen = []
        cfg = SamplerConfig(kind="ddim", nfe=5, seed=0)
        ddim_sample(
            zero_denoiser, np.zeros((8, 8)), schedule, cfg,
            on_step=lambda t, x: seen.append((t, x.shape)),
        )
        steps = [t for t, _ in seen]
        assert steps == sorted(steps, reverse=True)
        assert steps[0] == schedule.T
        assert all(shape == (8, 8) for _, shape in seen)
