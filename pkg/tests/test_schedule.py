"""Schedule math: construction invariants, forward noising, reverse updates.

Derived expectations are computed by independent oracles: a plain Python
loop for the cumulative product, Monte-Carlo moment estimates for the
closed-form marginal, and scalar loops for the elementwise formulas.
"""

import numpy as np
import pytest

from maskdiff.schedule import (
    BETA_END,
    BETA_START,
    NoiseSchedule,
    make_linear_schedule,
    mu_from_eps,
    q_sample,
    reverse_step,
)


def loop_alpha_bar(betas, t):
    """Reference oracle: cumulative product of (1 - beta) by explicit loop."""
    prod = 1.0
    for s in range(t):
        prod *= 1.0 - betas[s]
    return prod


class TestMakeLinearSchedule:
    def test_endpoints_T1000(self):
        sched = make_linear_schedule(1000)
        assert sched.betas[0] == BETA_START
        assert sched.betas[-1] == BETA_END

    def test_degenerate_T1_takes_lower_endpoint(self):
        sched = make_linear_schedule(1)
        assert sched.betas.tolist() == [BETA_START]
        assert sched.alphas[0] == 1.0 - BETA_START
        # first-step posterior variance option is 0 by the abar_0 = 1 convention
        assert sched.beta_tildes[0] == 0.0

    def test_invalid_T(self):
        with pytest.raises(ValueError):
            make_linear_schedule(0)

    def test_alpha_bar_T_matches_loop_oracle(self):
        sched = make_linear_schedule(1000)
        oracle = loop_alpha_bar(sched.betas, 1000)
        assert abs(sched.alpha_bars[-1] - oracle) < 1e-12
        # magnitude sanity: the product lands near 4.0e-5 for this schedule
        assert oracle == pytest.approx(4.0e-5, rel=0.02)

    def test_betas_nondecreasing_in_unit_interval(self):
        sched = make_linear_schedule(500)
        assert np.all(np.diff(sched.betas) >= 0.0)
        assert sched.betas[0] > 0.0
        assert sched.betas[-1] < 1.0

    @pytest.mark.parametrize("T", [1, 2, 10, 1000])
    def test_alpha_bar_strictly_decreasing(self, T):
        sched = make_linear_schedule(T)
        assert np.all(np.diff(sched.alpha_bars) < 0.0) or T == 1
        assert sched.alpha_bars[0] == 1.0 - sched.betas[0]
        assert 0.0 < sched.alpha_bars[-1] <= sched.alpha_bars[0] < 1.0

    @pytest.mark.parametrize("T", [1, 10, 1000])
    def test_beta_tilde_bounded_by_beta(self, T):
        sched = make_linear_schedule(T)
        assert np.all(sched.beta_tildes <= sched.betas)
        assert np.all(sched.beta_tildes >= 0.0)

    def test_variance_choice_selects_array(self):
        sched = make_linear_schedule(10)
        assert sched.posterior_variances is sched.betas
        tilded = sched.with_variance_choice("beta_tilde")
        assert tilded.posterior_variances is tilded.beta_tildes

    def test_bad_variance_choice(self):
        with pytest.raises(ValueError):
            make_linear_schedule(10, variance_choice="learned")


class TestQSample:
    def test_zero_noise_scales_by_sqrt_alpha_bar(self):
        sched = make_linear_schedule(100)
        x0 = np.linspace(-1, 1, 16).reshape(4, 4)
        out = q_sample(x0, 30, np.zeros_like(x0), sched)
        np.testing.assert_array_equal(out, np.sqrt(sched.alpha_bars[29]) * x0)

    def test_zero_signal_scales_noise(self):
        sched = make_linear_schedule(100)
        eps = np.random.default_rng(0).standard_normal((4, 4))
        out = q_sample(np.zeros((4, 4)), 77, eps, sched)
        np.testing.assert_array_equal(out, np.sqrt(1.0 - sched.alpha_bars[76]) * eps)

    def test_shape_mismatch_rejected(self):
        sched = make_linear_schedule(10)
        with pytest.raises(ValueError):
            q_sample(np.zeros((4, 4)), 5, np.zeros((4, 5)), sched)

    @pytest.mark.parametrize("t", [0, 101])
    def test_t_out_of_range(self, t):
        sched = make_linear_schedule(100)
        with pytest.raises(ValueError):
            q_sample(np.zeros((2, 2)), t, np.zeros((2, 2)), sched)

    def test_monte_carlo_moments_match_marginal(self):
        """Empirical mean/variance of x_T over many draws agrees with the
        closed-form marginal within 3 standard errors."""
        sched = make_linear_schedule(1000)
        rng = np.random.default_rng(42)
        x0 = 0.37
        n = 100_000
        draws = q_sample(
            np.full(n, x0), 1000, rng.standard_normal(n), sched
        )
        ab = sched.alpha_bars[-1]
        want_mean = np.sqrt(ab) * x0
        want_var = 1.0 - ab
        se_mean = np.sqrt(want_var / n)
        # variance of the sample variance of a Gaussian: 2 sigma^4 / (n - 1)
        se_var = np.sqrt(2.0 * want_var**2 / (n - 1))
        assert abs(draws.mean() - want_mean) < 3.0 * se_mean
        assert abs(draws.var() - want_var) < 3.0 * se_var

    def test_composition_matches_single_shot_moments(self):
        """t sequential one-step noisings have the same first two moments as
        the direct jump to x_t, checked by Monte-Carlo on a 4x4 tensor."""
        T = 10
        sched = make_linear_schedule(T)
        rng = np.random.default_rng(7)
        x0 = rng.uniform(-1, 1, size=(4, 4))
        n = 20_000

        seq = np.broadcast_to(x0, (n, 4, 4)).copy()
        for t in range(1, T + 1):
            beta = sched.betas[t - 1]
            seq = np.sqrt(1.0 - beta) * seq + np.sqrt(beta) * rng.standard_normal(
                seq.shape
            )

        ab = sched.alpha_bars[-1]
        want_mean = np.sqrt(ab) * x0
        want_var = 1.0 - ab
        se_mean = np.sqrt(want_var / n)
        se_var = np.sqrt(2.0 * want_var**2 / (n - 1))
        assert np.all(np.abs(seq.mean(axis=0) - want_mean) < 3.5 * se_mean)
        assert np.all(np.abs(seq.var(axis=0) - want_var) < 3.5 * se_var)


class TestMuFromEps:
    def test_zero_eps_hat(self):
        sched = make_linear_schedule(100)
        x_t = np.random.default_rng(1).standard_normal((3, 3))
        out = mu_from_eps(x_t, 40, np.zeros_like(x_t), sched)
        np.testing.assert_allclose(out, x_t / np.sqrt(sched.alphas[39]), rtol=0, atol=0)

    def test_exact_inversion_at_t1(self):
        sched = make_linear_schedule(100)
        rng = np.random.default_rng(2)
        x0 = rng.uniform(-1, 1, size=(8, 8))
        eps = rng.standard_normal((8, 8))
        x1 = q_sample(x0, 1, eps, sched)
        out = mu_from_eps(x1, 1, eps, sched)
        np.testing.assert_allclose(out, x0, atol=1e-12)

    def test_matches_scalar_loop_oracle(self):
        sched = make_linear_schedule(1000)
        rng = np.random.default_rng(3)
        x_t = rng.standard_normal((5, 5))
        eps_hat = rng.standard_normal((5, 5))
        t = 500
        got = mu_from_eps(x_t, t, eps_hat, sched)
        beta = sched.betas[t - 1]
        alpha = sched.alphas[t - 1]
        ab = sched.alpha_bars[t - 1]
        for i in range(5):
            for j in range(5):
                ref = (x_t[i, j] - beta / np.sqrt(1 - ab) * eps_hat[i, j]) / np.sqrt(
                    alpha
                )
                assert abs(got[i, j] - ref) < 1e-12


class TestReverseStep:
    def test_recovers_x0_with_exact_eps(self):
        sched = make_linear_schedule(200)
        rng = np.random.default_rng(4)
        x0 = rng.uniform(-1, 1, size=(6, 6))
        eps = rng.standard_normal((6, 6))
        x1 = q_sample(x0, 1, eps, sched)
        out = reverse_step(x1, 1, eps, np.zeros_like(x1), sched)
        np.testing.assert_allclose(out, x0, atol=1e-5)

    def test_zero_noise_zero_eps(self):
        sched = make_linear_schedule(100)
        x_t = np.random.default_rng(5).standard_normal((4, 4))
        out = reverse_step(x_t, 50, np.zeros_like(x_t), np.zeros_like(x_t), sched)
        np.testing.assert_allclose(out, x_t / np.sqrt(sched.alphas[49]))

    def test_beta_tilde_final_step_is_deterministic_mean(self):
        sched = make_linear_schedule(100, variance_choice="beta_tilde")
        rng = np.random.default_rng(6)
        x_1 = rng.standard_normal((4, 4))
        eps_hat = rng.standard_normal((4, 4))
        assert sched.posterior_variances[0] == 0.0
        out = reverse_step(x_1, 1, eps_hat, np.zeros_like(x_1), sched)
        np.testing.assert_array_equal(out, mu_from_eps(x_1, 1, eps_hat, sched))

    def test_nonzero_z_at_t1_rejected(self):
        sched = make_linear_schedule(100)
        x = np.zeros((2, 2))
        with pytest.raises(ValueError):
            reverse_step(x, 1, x, np.ones_like(x), sched)

    def test_noise_scaled_by_sigma(self):
        sched = make_linear_schedule(100)
        rng = np.random.default_rng(8)
        x_t = rng.standard_normal((4, 4))
        eps_hat = rng.standard_normal((4, 4))
        z = rng.standard_normal((4, 4))
        t = 60
        got = reverse_step(x_t, t, eps_hat, z, sched)
        want = mu_from_eps(x_t, t, eps_hat, sched) + np.sqrt(sched.betas[t - 1]) * z
        np.testing.assert_array_equal(got, want)


def test_schedule_arrays_immutable():
    sched = make_linear_schedule(10)
    with pytest.raises(ValueError):
        sched.betas[0] = 0.5
