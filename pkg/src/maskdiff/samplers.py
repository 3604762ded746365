"""Reverse-process samplers: full ancestral plus reduced-evaluation variants.

All samplers are pure functions of (denoiser, image, schedule, config,
seed): randomness comes from seeded generators, never global state. State
tensors are float64 numpy; a denoiser is any callable
``(x_t, image, t) -> eps_hat`` over arrays shaped (B, H, W) with a
1-based step index.

Single images (H, W) and stacks (B, H, W) are both accepted; stacks take
one seed per item so a trajectory is independent of how it was batched
into a call.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from maskdiff.schedule import NoiseSchedule, reverse_step

SAMPLER_KINDS = ("ancestral", "ddim", "dpm2")

Denoiser = Callable[[np.ndarray, np.ndarray, int], np.ndarray]
StepCallback = Callable[[int, np.ndarray], None]


class DenoiserContractError(RuntimeError):
    """The denoiser returned an output that violates its contract."""


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ancestral"
    nfe: int | None = None
    eta: float = 0.0
    seed: int = 0
    binarize_threshold: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"kind must be one of {SAMPLER_KINDS}, got {self.kind!r}")
        if self.nfe is not None and self.nfe < 1:
            raise ValueError("nfe must be a positive integer")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")

    def resolve_nfe(self, schedule: NoiseSchedule) -> int:
        """Validate the evaluation budget against a concrete schedule."""
        if self.kind == "ancestral":
            if self.nfe is not None and self.nfe != schedule.T:
                raise ValueError(
                    f"ancestral sampling uses every step: nfe must be {schedule.T}"
                )
            return schedule.T
        if self.nfe is None:
            raise ValueError(f"{self.kind} sampling requires an explicit nfe")
        if self.nfe > schedule.T:
            raise ValueError(f"nfe={self.nfe} exceeds schedule T={schedule.T}")
        return self.nfe


def _as_batch(image: np.ndarray, seed) -> tuple[np.ndarray, list[int], bool]:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        batched = image[None]
        single = True
    elif image.ndim == 3:
        batched = image
        single = False
    else:
        raise ValueError(f"image must be 2-D or 3-D, got shape {image.shape}")
    if isinstance(seed, (int, np.integer)):
        if single:
            seeds = [int(seed)]
        else:
            seeds = [int(seed) + i for i in range(batched.shape[0])]
    else:
        seeds = [int(s) for s in seed]
    if len(seeds) != batched.shape[0]:
        raise ValueError(f"got {len(seeds)} seeds for {batched.shape[0]} images")
    return batched, seeds, single


def _stack_noise(rngs: list[np.random.Generator], shape) -> np.ndarray:
    return np.stack([rng.standard_normal(shape) for rng in rngs])


def _checked(denoiser: Denoiser, x: np.ndarray, image: np.ndarray, t: int) -> np.ndarray:
    eps = np.asarray(denoiser(x, image, t), dtype=np.float64)
    if eps.shape != x.shape:
        raise DenoiserContractError(
            f"denoiser returned shape {eps.shape}, expected {x.shape}"
        )
    return eps


def ancestral_sample(
    denoiser: Denoiser,
    image: np.ndarray,
    schedule: NoiseSchedule,
    seed: int | Sequence[int] = 0,
    on_step: StepCallback | None = None,
) -> np.ndarray:
    """Full reverse chain from seeded Gaussian noise down to x_0.

    Applies one reverse step per schedule step, with no noise injected at
    the final step; returns the continuous x_0.
    """
    image, seeds, single = _as_batch(image, seed)
    rngs = [np.random.default_rng(s) for s in seeds]
    x = _stack_noise(rngs, image.shape[1:])
    for t in range(schedule.T, 0, -1):
        if on_step is not None:
            on_step(t, x[0] if single else x)
        eps_hat = _checked(denoiser, x, image, t)
        z = _stack_noise(rngs, image.shape[1:]) if t > 1 else np.zeros_like(x)
        x = reverse_step(x, t, eps_hat, z, schedule)
    return x[0] if single else x


def reduced_timesteps(T: int, steps: int) -> list[int]:
    """Uniformly strided subset of 1..T, largest step always included,
    returned in descending order."""
    if steps < 1 or steps > T:
        raise ValueError(f"steps={steps} outside 1..{T}")
    if steps == 1:
        return [T]
    grid = np.linspace(1, T, steps)
    return [int(t) for t in np.round(grid)[::-1]]


def ddim_step(
    x_t: np.ndarray,
    t: int,
    t_next: int,
    eps_hat: np.ndarray,
    z: np.ndarray,
    eta: float,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One generalized deterministic/stochastic jump t -> t_next (t_next
    may be 0, meaning the clean sample)."""
    ab_t = schedule.alpha_bar(t)
    ab_s = schedule.alpha_bar(t_next)
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    sigma = (
        eta
        * np.sqrt((1.0 - ab_s) / (1.0 - ab_t))
        * np.sqrt(max(1.0 - ab_t / ab_s, 0.0))
    )
    direction = np.sqrt(max(1.0 - ab_s - sigma**2, 0.0)) * eps_hat
    return np.sqrt(ab_s) * x0_hat + direction + sigma * z


def ddim_sample(
    denoiser: Denoiser,
    image: np.ndarray,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    on_step: StepCallback | None = None,
    seed: int | Sequence[int] | None = None,
) -> np.ndarray:
    """Strided sampler using exactly ``config.nfe`` denoiser evaluations;
    eta=0 gives a fully deterministic trajectory."""
    nfe = config.resolve_nfe(schedule)
    image, seeds, single = _as_batch(image, config.seed if seed is None else seed)
    rngs = [np.random.default_rng(s) for s in seeds]
    x = _stack_noise(rngs, image.shape[1:])
    steps = reduced_timesteps(schedule.T, nfe)
    for t, t_next in zip(steps, steps[1:] + [0]):
        if on_step is not None:
            on_step(t, x[0] if single else x)
        eps_hat = _checked(denoiser, x, image, t)
        if config.eta > 0.0 and t_next > 0:
            z = _stack_noise(rngs, image.shape[1:])
        else:
            z = np.zeros_like(x)
        x = ddim_step(x, t, t_next, eps_hat, z, config.eta, schedule)
    return x[0] if single else x


def _log_snr_half(ab: float) -> float:
    return 0.5 * (np.log(ab) - np.log(1.0 - ab))


def dpm2_sample(
    denoiser: Denoiser,
    image: np.ndarray,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    on_step: StepCallback | None = None,
    seed: int | Sequence[int] | None = None,
) -> np.ndarray:
    """Second-order midpoint sampler; every output step spends two
    denoiser evaluations, so nfe must be even."""
    nfe = config.resolve_nfe(schedule)
    if nfe % 2 != 0:
        raise ValueError(f"dpm2 needs an even nfe (two evaluations per step), got {nfe}")
    image, seeds, single = _as_batch(image, config.seed if seed is None else seed)
    rngs = [np.random.default_rng(s) for s in seeds]
    x = _stack_noise(rngs, image.shape[1:])
    steps = reduced_timesteps(schedule.T, nfe // 2)
    for t, t_next in zip(steps, steps[1:] + [0]):
        if on_step is not None:
            on_step(t, x[0] if single else x)
        eps_t = _checked(denoiser, x, image, t)
        t_mid = max((t + t_next) // 2, 1)
        ab_t = schedule.alpha_bar(t)
        ab_mid = schedule.alpha_bar(t_mid)
        # half log-SNR jump to the midpoint, then full jump with midpoint slope
        h_half = _log_snr_half(ab_mid) - _log_snr_half(ab_t)
        u = np.sqrt(ab_mid / ab_t) * x - np.sqrt(1.0 - ab_mid) * np.expm1(h_half) * eps_t
        eps_mid = _checked(denoiser, u, image, t_mid)
        if t_next == 0:
            x = (x - np.sqrt(1.0 - ab_t) * eps_mid) / np.sqrt(ab_t)
        else:
            ab_s = schedule.alpha_bar(t_next)
            h = _log_snr_half(ab_s) - _log_snr_half(ab_t)
            x = np.sqrt(ab_s / ab_t) * x - np.sqrt(1.0 - ab_s) * np.expm1(h) * eps_mid
    return x[0] if single else x


def sample(
    denoiser: Denoiser,
    image: np.ndarray,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    on_step: StepCallback | None = None,
    seed: int | Sequence[int] | None = None,
) -> np.ndarray:
    """Dispatch on ``config.kind``."""
    if config.kind == "ancestral":
        return ancestral_sample(
            denoiser, image, schedule, config.seed if seed is None else seed, on_step
        )
    if config.kind == "ddim":
        return ddim_sample(denoiser, image, schedule, config, on_step, seed)
    return dpm2_sample(denoiser, image, schedule, config, on_step, seed)


def binarize(x0: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Strictly-greater thresholding to a {0, 1} mask."""
    return (np.asarray(x0) > threshold).astype(np.uint8)


class OracleDenoiser:
    """Exact noise oracle for a known clean target.

    Inverts the closed-form forward marginal: given x_t, the noise
    consistent with the target is (x_t - sqrt(abar_t) x0) / sqrt(1 - abar_t).
    Reverse-stepping with it lands exactly on the target at t=1, which
    isolates sampler correctness from model quality.
    """

    def __init__(self, x0: np.ndarray, schedule: NoiseSchedule):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.schedule = schedule

    def __call__(self, x_t: np.ndarray, image: np.ndarray, t: int) -> np.ndarray:
        ab = self.schedule.alpha_bar(t)
        x0 = self.x0 if self.x0.shape == x_t.shape else np.broadcast_to(self.x0, x_t.shape)
        return (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)


class CountingDenoiser:
    """Wrapper that counts evaluations, for evaluation-budget accounting."""

    def __init__(self, denoiser: Denoiser):
        self.denoiser = denoiser
        self.calls = 0

    def __call__(self, x_t, image, t):
        self.calls += 1
        return self.denoiser(x_t, image, t)
