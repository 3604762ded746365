"""Closed-form forward/reverse diffusion math over a precomputed noise schedule.

Everything here is pure 64-bit numpy, independent of any network. Step
indices are 1-based in the public API (t runs over 1..T); the arrays are
stored 0-based, so ``betas[t - 1]`` is the variance increment of step t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA_START = 1e-4
BETA_END = 2e-2

VARIANCE_CHOICES = ("beta", "beta_tilde")


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed diffusion schedule arrays. Immutable; safe to share.

    ``beta_tildes`` uses the convention that the cumulative alpha product
    before the first step is 1, which makes the first reverse step
    deterministic (beta_tilde_1 = 0).
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_tildes: np.ndarray
    variance_choice: str = "beta"

    def __post_init__(self) -> None:
        if self.variance_choice not in VARIANCE_CHOICES:
            raise ValueError(
                f"variance_choice must be one of {VARIANCE_CHOICES}, "
                f"got {self.variance_choice!r}"
            )
        for name in ("betas", "alphas", "alpha_bars", "beta_tildes"):
            arr = getattr(self, name)
            arr.setflags(write=False)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},)")

    @property
    def posterior_variances(self) -> np.ndarray:
        """sigma_t^2 for the reverse step, per the configured variance choice."""
        return self.betas if self.variance_choice == "beta" else self.beta_tildes

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha product at step t, with step 0 defined as 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def with_variance_choice(self, variance_choice: str) -> "NoiseSchedule":
        return NoiseSchedule(
            T=self.T,
            betas=self.betas,
            alphas=self.alphas,
            alpha_bars=self.alpha_bars,
            beta_tildes=self.beta_tildes,
            variance_choice=variance_choice,
        )

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step index t={t} out of range 1..{self.T}")


def make_linear_schedule(T: int, variance_choice: str = "beta") -> NoiseSchedule:
    """Build the linear schedule: T evenly spaced betas from 1e-4 to 2e-2.

    T=1 degenerates to the single lower endpoint.
    """
    if T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    betas = np.linspace(BETA_START, BETA_END, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars_prev = np.concatenate(([1.0], alpha_bars[:-1]))
    beta_tildes = (1.0 - alpha_bars_prev) / (1.0 - alpha_bars) * betas
    return NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        beta_tildes=beta_tildes,
        variance_choice=variance_choice,
    )


def q_sample(
    x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """Noise a clean sample straight to step t:

        x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
    """
    schedule._check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = schedule.alpha_bars[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def mu_from_eps(
    x_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """Posterior mean from the noise prediction:

        mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
    """
    schedule._check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"eps_hat shape {eps_hat.shape} != x_t shape {x_t.shape}")
    beta = schedule.betas[t - 1]
    alpha = schedule.alphas[t - 1]
    ab = schedule.alpha_bars[t - 1]
    return (x_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)


def reverse_step(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    z: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One ancestral reverse update: x_{t-1} = mu + sigma_t * z.

    The last step (t=1) is deterministic; z must be all zeros there.
    """
    schedule._check_t(t)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != np.shape(x_t):
        raise ValueError(f"z shape {z.shape} != x_t shape {np.shape(x_t)}")
    if t == 1 and np.any(z != 0.0):
        raise ValueError("z must be all zeros at t=1 (no noise on the final step)")
    mu = mu_from_eps(x_t, t, eps_hat, schedule)
    sigma = np.sqrt(schedule.posterior_variances[t - 1])
    return mu + sigma * z
