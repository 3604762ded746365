"""Gradient-weighted activation heatmaps over layers and diffusion steps.

The denoiser exposes named activation points (encoder levels of both
flows before/after the attention exchange, bottleneck, prior units,
decoder levels); a heatmap is the ReLU of the channel sum of activations
weighted by spatially pooled gradients of a scalar target, min-max
normalized to [0, 1] and upsampled to the input resolution.

The default target for the noise predictor is the mean of the noise
estimate over the currently predicted foreground, a documented choice
(selectable) rather than anything canonical.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from maskdiff.network import DualBranchDenoiser, ModelOutputs
from maskdiff.samplers import SamplerConfig, sample
from maskdiff.schedule import NoiseSchedule

logger = logging.getLogger(__name__)

TARGETS = ("foreground_eps_mean", "eps_mean", "class_logit")


def _as_input(array: np.ndarray) -> torch.Tensor:
    array = np.asarray(array, dtype=np.float32)
    if array.ndim != 2:
        raise ValueError(f"expected a single 2-D array, got shape {array.shape}")
    return torch.from_numpy(array)[None, None]


def _target_scalar(
    outputs: ModelOutputs,
    x_t: torch.Tensor,
    t: int,
    schedule: NoiseSchedule | None,
    target: str | Callable[[ModelOutputs], torch.Tensor],
) -> torch.Tensor:
    if callable(target):
        return target(outputs)
    if target == "class_logit":
        return outputs.class_logit.sum()
    if target == "eps_mean":
        return outputs.eps.mean()
    if target == "foreground_eps_mean":
        if schedule is None:
            return outputs.eps.mean()
        ab = schedule.alpha_bar(t)
        with torch.no_grad():
            x0_hat = (x_t - np.sqrt(1.0 - ab) * outputs.eps) / np.sqrt(ab)
            foreground = x0_hat > 0.0
        if foreground.any():
            return outputs.eps[foreground].mean()
        return outputs.eps.mean()
    raise ValueError(f"unknown target {target!r}; expected one of {TARGETS} or a callable")


def _cam_from(activation: torch.Tensor, grad: torch.Tensor, out_size: int) -> np.ndarray:
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * activation).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=(out_size, out_size), mode="bilinear", align_corners=False)
    cam = cam[0, 0].detach().numpy()
    spread = cam.max() - cam.min()
    if spread <= 1e-12:
        return np.zeros_like(cam)  # flat map: no attributable region
    return (cam - cam.min()) / spread


def gradcam(
    model: DualBranchDenoiser,
    image: np.ndarray,
    x_t: np.ndarray,
    t: int,
    layer: str,
    target: str | Callable[[ModelOutputs], torch.Tensor] = "foreground_eps_mean",
    schedule: NoiseSchedule | None = None,
) -> np.ndarray:
    """Heatmap in [0, 1] at image resolution for one activation point."""
    valid = model.activation_names()
    if layer not in valid:
        raise ValueError(f"unknown layer {layer!r}; valid layers: {', '.join(valid)}")
    model.eval()
    image_t = _as_input(image)
    x_t_t = _as_input(x_t)
    capture: dict[str, torch.Tensor] = {}
    with torch.enable_grad():
        outputs = model.forward_full(x_t_t, image_t, t, capture)
        scalar = _target_scalar(outputs, x_t_t, t, schedule, target)
        activation = capture[layer]
        (grad,) = torch.autograd.grad(scalar, activation, allow_unused=True)
    if grad is None:
        # target does not depend on this layer: nothing to attribute
        size = image_t.shape[-1]
        return np.zeros((size, size))
    return _cam_from(activation, grad, image_t.shape[-1])


def prior_cam(model: DualBranchDenoiser, image: np.ndarray) -> np.ndarray:
    """Heatmap of the prior branch's final supervised unit against the
    tumor-presence logit."""
    zeros = np.zeros_like(np.asarray(image, dtype=np.float32))
    return gradcam(model, image, zeros, 1, layer="prior4", target="class_logit")


def attention_timeline(
    model: DualBranchDenoiser,
    image: np.ndarray,
    schedule: NoiseSchedule,
    layers: Sequence[str],
    timesteps: Sequence[int],
    seed: int = 0,
    sampler_config: SamplerConfig | None = None,
    target: str = "foreground_eps_mean",
) -> dict:
    """Heatmap grid over layers x timesteps along one sampling trajectory.

    Requested steps not visited by the trajectory fall back to the nearest
    captured step (logged). Returns the grid, the states used, and the
    final sample.
    """
    valid = model.activation_names()
    unknown = [name for name in layers if name not in valid]
    if unknown:
        raise ValueError(f"unknown layers {unknown}; valid layers: {', '.join(valid)}")

    from maskdiff.network import make_denoiser

    config = sampler_config or SamplerConfig(kind="ancestral", seed=seed)
    captured: dict[int, np.ndarray] = {}

    def keep(t: int, x: np.ndarray) -> None:
        captured[t] = np.array(x, copy=True)

    x0 = sample(make_denoiser(model), image, schedule, config, on_step=keep, seed=seed)

    available = sorted(captured)
    resolved = []
    for t in timesteps:
        nearest = min(available, key=lambda s: abs(s - t))
        if nearest != t:
            logger.warning("step %d not on trajectory; using nearest %d", t, nearest)
        resolved.append(nearest)

    size = np.asarray(image).shape[-1]
    grid = np.zeros((len(layers), len(resolved), size, size))
    for i, layer in enumerate(layers):
        for j, t_used in enumerate(resolved):
            grid[i, j] = gradcam(
                model, image, captured[t_used], t_used, layer, target, schedule
            )
    return {
        "grid": grid,
        "layers": list(layers),
        "timesteps": resolved,
        "states": captured,
        "x0": x0,
    }


def save_heatmap_grid(
    image: np.ndarray,
    grid: np.ndarray,
    layers: Sequence[str],
    timesteps: Sequence[int],
    path: str | Path,
    alpha: float = 0.55,
) -> Path:
    """Overlay grid figure: rows are layers, columns are diffusion steps."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n_rows, n_cols = grid.shape[:2]
    fig, axes = plt.subplots(
        n_rows, n_cols, figsize=(2.0 * n_cols, 2.0 * n_rows), squeeze=False
    )
    base = (np.asarray(image) + 1.0) / 2.0
    for i in range(n_rows):
        for j in range(n_cols):
            ax = axes[i][j]
            ax.imshow(base, cmap="gray", vmin=0, vmax=1)
            ax.imshow(grid[i, j], cmap="viridis", vmin=0, vmax=1, alpha=alpha)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(f"t={timesteps[j]}", fontsize=8)
            if j == 0:
                ax.set_ylabel(layers[i], fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_heatmap_arrays(
    grid: np.ndarray,
    layers: Sequence[str],
    timesteps: Sequence[int],
    path: str | Path,
) -> Path:
    """Raw per-cell heatmaps as a keyed archive ('<layer>@t<step>')."""
    arrays = {
        f"{layer}@t{t}": grid[i, j]
        for i, layer in enumerate(layers)
        for j, t in enumerate(timesteps)
    }
    path = Path(path)
    np.savez_compressed(path, **arrays)
    return path
