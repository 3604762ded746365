"""Training objectives: diffusion MSE plus the prior-branch supervision terms.

All functions take torch tensors and stay differentiable. The two
cross-entropies clamp probabilities away from {0, 1} with a fixed floor;
the map-level BCE is a plain sum over elements (not a mean), matching the
localization supervision it implements.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

PROB_CLAMP = 1e-7


class NonFiniteLossError(RuntimeError):
    """Raised when a loss component turns NaN/inf; names the offender."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component
        self.value = value


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    dice_epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.dice_epsilon <= 0:
            raise ValueError("dice_epsilon must be positive")


def mse_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean of squared elementwise differences."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return torch.mean((x - y) ** 2)


def ce_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over predicted probabilities p and labels y."""
    if p.numel() == 0:
        raise ValueError("ce_loss needs at least one element")
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(y.shape)}")
    p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -torch.mean(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))


def dice_loss(
    y: torch.Tensor, y_hat: torch.Tensor, epsilon: float = 1e-6
) -> torch.Tensor:
    """1 - (2 * sum(y * y_hat) + eps) / (sum(y) + sum(y_hat) + eps).

    The epsilon makes the empty-vs-empty case come out as exactly 0.
    """
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    inter = torch.sum(y * y_hat)
    return 1.0 - (2.0 * inter + epsilon) / (torch.sum(y) + torch.sum(y_hat) + epsilon)


def bce_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Summed binary cross-entropy over all elements (no averaging)."""
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    y_hat = y_hat.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -torch.sum(y * torch.log(y_hat) + (1.0 - y) * torch.log(1.0 - y_hat))


def total_loss(
    mse: torch.Tensor,
    ce: torch.Tensor,
    dice: torch.Tensor,
    bce: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """mse + lambda1 * ce + lambda2 * (dice + bce), aborting on non-finite parts."""
    for name, value in (("mse", mse), ("ce", ce), ("dice", dice), ("bce", bce)):
        if not torch.isfinite(value):
            raise NonFiniteLossError(name, float(value))
    return mse + weights.lambda1 * ce + weights.lambda2 * (dice + bce)
