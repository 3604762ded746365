"""Conditional noise-prediction network for mask diffusion.

Two encoder branches process the conditioning image and the noisy mask in
parallel; a parameter-shared cross-attention block after each level lets
the branches exchange information, a small supervised image branch injects
a localization prior at the bottleneck, and a skip-connected decoder emits
the noise estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from maskdiff.attention import attend


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``norm_after_activation`` keeps the block composition
    Conv -> SiLU -> GroupNorm; set it False for the conventional
    Conv -> GroupNorm -> SiLU ordering.
    """

    base_channels: int = 32
    level_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    sdb_layers: int = 4
    sdb_scale: float = 0.2
    attention_reduction: int = 8
    time_embed_dim: int = 128
    image_size: int = 128
    norm_after_activation: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "level_channels", tuple(self.level_channels))
        if len(self.level_channels) != 4:
            raise ValueError("level_channels must list exactly four widths")
        for c in self.level_channels:
            if c % self.attention_reduction != 0:
                raise ValueError(
                    f"level channel {c} not divisible by "
                    f"attention_reduction={self.attention_reduction}"
                )
        if self.image_size % 16 != 0:
            raise ValueError("image_size must be divisible by 16 (four halvings)")
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        if self.sdb_layers < 1:
            raise ValueError("sdb_layers must be at least 1")


class ModelOutputs(NamedTuple):
    eps: torch.Tensor
    class_logit: torch.Tensor
    loc_logits: torch.Tensor


def time_embedding(t: int | torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal step embedding; deterministic and distinct per step.

    Accepts a single 1-based step index or a batch of them; returns
    ``(dim,)`` or ``(B, dim)`` accordingly.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    scalar = not isinstance(t, torch.Tensor)
    t_vec = torch.as_tensor([t] if scalar else t, dtype=torch.float64)
    if (t_vec < 1).any():
        raise ValueError("step index must be >= 1")
    half = dim // 2
    exponent = -math.log(10000.0) / max(half - 1, 1)
    freqs = torch.exp(exponent * torch.arange(half, dtype=t_vec.dtype))
    angles = t_vec[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    emb = emb.to(torch.get_default_dtype())
    return emb[0] if scalar else emb


def _num_groups(channels: int) -> int:
    return math.gcd(8, channels)


class ConvBlock(nn.Module):
    """3x3 convolution, SiLU, and GroupNorm in the configured order."""

    def __init__(
        self, in_channels: int, out_channels: int, norm_after_activation: bool = True
    ):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm = nn.GroupNorm(_num_groups(out_channels), out_channels)
        self.norm_after_activation = norm_after_activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} input channels, got {x.shape[1]}"
            )
        h = self.conv(x)
        if self.norm_after_activation:
            return self.norm(F.silu(h))
        return F.silu(self.norm(h))


class ResidualBlock(nn.Module):
    """Two conv blocks with an identity shortcut and optional step injection.

    The step projection carries no bias, so a zero embedding leaves the
    block purely convolutional.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        time_embed_dim: int | None = None,
        norm_after_activation: bool = True,
    ):
        super().__init__()
        self.block1 = ConvBlock(in_channels, out_channels, norm_after_activation)
        self.block2 = ConvBlock(out_channels, out_channels, norm_after_activation)
        self.time_proj = (
            nn.Linear(time_embed_dim, out_channels, bias=False)
            if time_embed_dim
            else None
        )
        self.shortcut = (
            nn.Conv2d(in_channels, out_channels, 1)
            if in_channels != out_channels
            else nn.Identity()
        )

    def forward(self, x: torch.Tensor, t_embed: torch.Tensor | None = None) -> torch.Tensor:
        h = self.block1(x)
        if self.time_proj is not None and t_embed is not None:
            if t_embed.dim() == 1:
                t_embed = t_embed[None, :]
            h = h + self.time_proj(t_embed)[:, :, None, None]
        h = self.block2(h)
        return h + self.shortcut(x)


class SlimDenseBlock(nn.Module):
    """Constant-width dense block combining shortcuts by scaled addition.

    Layer i computes H(x_{i-1}) plus ``scale`` times the sum of all earlier
    layer outputs; every H preserves the channel count, so depth never
    grows the width. H is two conv+BatchNorm+LeakyReLU stages.
    """

    def __init__(self, channels: int, num_layers: int = 4, scale: float = 0.2):
        super().__init__()
        self.scale = scale
        self.layers = nn.ModuleList(
            [self._make_stage(channels) for _ in range(num_layers)]
        )

    @staticmethod
    def _make_stage(channels: int) -> nn.Sequential:
        return nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
            nn.LeakyReLU(0.2, inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outputs: list[torch.Tensor] = []
        prev = x
        for layer in self.layers:
            new = layer(prev)
            if outputs and self.scale != 0.0:
                new = new + self.scale * sum(outputs)
            outputs.append(new)
            prev = new
        return outputs[-1]


class ParameterSharedAttention(nn.Module):
    """Cross-branch attention with one query/key projection pair shared by
    both inputs, per-branch value projections, and zero-initialized gates,
    so the module starts as an exact identity on both branches.
    """

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        if channels % reduction != 0:
            raise ValueError(
                f"channels={channels} not divisible by reduction={reduction}"
            )
        reduced = channels // reduction
        self.query = nn.Conv2d(channels, reduced, 1)
        self.key = nn.Conv2d(channels, reduced, 1)
        self.value1 = nn.Conv2d(channels, channels, 1)
        self.value2 = nn.Conv2d(channels, channels, 1)
        self.gate1 = nn.Parameter(torch.zeros(1))
        self.gate2 = nn.Parameter(torch.zeros(1))

    def _attend(self, x: torch.Tensor, value_proj: nn.Conv2d) -> torch.Tensor:
        b, c, h, w = x.shape
        n = h * w
        q = self.query(x).reshape(b, -1, n)
        k = self.key(x).reshape(b, -1, n)
        v = value_proj(x).reshape(b, c, n)
        return attend(q, k, v).reshape(b, c, h, w)

    def forward(
        self, x1: torch.Tensor, x2: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if x1.shape != x2.shape:
            raise ValueError(f"branch shapes differ: {x1.shape} vs {x2.shape}")
        out1 = self.gate1 * self._attend(x1, self.value1) + x1
        out2 = self.gate2 * self._attend(x2, self.value2) + x2
        return out1, out2


class SelfAttention2d(nn.Module):
    """Single-input spatial attention with the same reduced projections and
    zero-initialized gate as the cross-branch module."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        reduced = max(channels // reduction, 1)
        self.query = nn.Conv2d(channels, reduced, 1)
        self.key = nn.Conv2d(channels, reduced, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gate = nn.Parameter(torch.zeros(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        n = h * w
        q = self.query(x).reshape(b, -1, n)
        k = self.key(x).reshape(b, -1, n)
        v = self.value(x).reshape(b, c, n)
        attended = attend(q, k, v).reshape(b, c, h, w)
        return self.gate * attended + x


class EncoderUnit(nn.Module):
    """One encoder level: step-conditioned residual blocks then a 2x
    stride-ated downsampling convolution. ``body`` and ``down`` are exposed
    separately so cross-branch attention can run between them.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        time_embed_dim: int,
        norm_after_activation: bool = True,
    ):
        super().__init__()
        self.res1 = ResidualBlock(
            in_channels, out_channels, time_embed_dim, norm_after_activation
        )
        self.res2 = ResidualBlock(
            out_channels, out_channels, time_embed_dim, norm_after_activation
        )
        self.downsample = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1)

    def body(self, x: torch.Tensor, t_embed: torch.Tensor | None) -> torch.Tensor:
        return self.res2(self.res1(x, t_embed), t_embed)

    def down(self, x: torch.Tensor) -> torch.Tensor:
        return self.downsample(x)

    def forward(
        self, x: torch.Tensor, t_embed: torch.Tensor | None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (downsampled features, pre-downsample skip)."""
        skip = self.body(x, t_embed)
        return self.down(skip), skip


class UpUnit(nn.Module):
    """Decoder level: step injection, 2x upsampling, skip concatenation
    folded back down by a 1x1 projection, then residual blocks."""

    def __init__(
        self,
        in_channels: int,
        skip_channels: int,
        out_channels: int,
        time_embed_dim: int,
        norm_after_activation: bool = True,
    ):
        super().__init__()
        self.time_proj = nn.Linear(time_embed_dim, in_channels, bias=False)
        self.upsample_conv = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.fuse = nn.Conv2d(in_channels + skip_channels, out_channels, 1)
        self.res1 = ResidualBlock(
            out_channels, out_channels, time_embed_dim, norm_after_activation
        )
        self.res2 = ResidualBlock(
            out_channels, out_channels, time_embed_dim, norm_after_activation
        )

    def forward(
        self, x: torch.Tensor, skip: torch.Tensor, t_embed: torch.Tensor
    ) -> torch.Tensor:
        x = x + self.time_proj(t_embed)[:, :, None, None]
        x = self.upsample_conv(F.interpolate(x, scale_factor=2, mode="nearest"))
        if skip.shape[-2:] != x.shape[-2:] or skip.shape[0] != x.shape[0]:
            raise ValueError(
                f"skip shape {tuple(skip.shape)} incompatible with {tuple(x.shape)}"
            )
        x = self.fuse(torch.cat([x, skip], dim=1))
        return self.res2(self.res1(x, t_embed), t_embed)


class Bottleneck(nn.Module):
    """Residual block, spatial self-attention, residual block."""

    def __init__(
        self, channels: int, time_embed_dim: int, reduction: int = 8,
        norm_after_activation: bool = True,
    ):
        super().__init__()
        self.res1 = ResidualBlock(
            channels, channels, time_embed_dim, norm_after_activation
        )
        self.attention = SelfAttention2d(channels, reduction)
        self.res2 = ResidualBlock(
            channels, channels, time_embed_dim, norm_after_activation
        )

    def forward(
        self, x: torch.Tensor, bias: torch.Tensor, t_embed: torch.Tensor
    ) -> torch.Tensor:
        h = self.res1(x + bias, t_embed)
        h = self.attention(h)
        return self.res2(h, t_embed)


class PriorGuide(nn.Module):
    """Supervised image branch providing a bottleneck bias, a
    tumor-presence logit, and a coarse localization map.

    A conv stem is followed by four stride-2 supervised units whose
    widths track the encoder levels, so the final feature map matches the
    bottleneck; the localization head reads the penultimate unit.
    """

    def __init__(self, config: ModelConfig, in_channels: int = 1):
        super().__init__()
        widths = [config.base_channels, *config.level_channels]
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, padding=1),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        self.units = nn.ModuleList(
            [self._make_unit(widths[i], widths[i + 1]) for i in range(4)]
        )
        self.loc_head = nn.Conv2d(config.level_channels[2], 1, 1)
        self.class_head = nn.Linear(config.level_channels[3], 1)

    @staticmethod
    def _make_unit(in_channels: int, out_channels: int) -> nn.Sequential:
        return nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(
        self, image: torch.Tensor, capture: dict | None = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h = self.stem(image)
        feats = []
        for idx, unit in enumerate(self.units, start=1):
            h = unit(h)
            feats.append(h)
            if capture is not None:
                capture[f"prior{idx}"] = h
        loc_logits = self.loc_head(feats[2])
        pooled = feats[3].mean(dim=(2, 3))
        class_logit = self.class_head(pooled).squeeze(-1)
        return feats[3], class_logit, loc_logits


class DualBranchDenoiser(nn.Module):
    """Full noise predictor over (noisy mask, conditioning image, step)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        levels = config.level_channels
        tdim = config.time_embed_dim
        naa = config.norm_after_activation

        self.time_mlp = nn.Sequential(
            nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim)
        )

        self.cond_stem = nn.Conv2d(1, c, 3, padding=1)
        self.den_stem = nn.Conv2d(1, c, 3, padding=1)
        self.cond_sdb = SlimDenseBlock(c, config.sdb_layers, config.sdb_scale)
        self.den_sdb = SlimDenseBlock(c, config.sdb_layers, config.sdb_scale)

        in_widths = [c, *levels[:-1]]
        self.cond_units = nn.ModuleList(
            [EncoderUnit(i, o, tdim, naa) for i, o in zip(in_widths, levels)]
        )
        self.den_units = nn.ModuleList(
            [EncoderUnit(i, o, tdim, naa) for i, o in zip(in_widths, levels)]
        )
        self.attentions = nn.ModuleList(
            [
                ParameterSharedAttention(ch, config.attention_reduction)
                for ch in levels
            ]
        )

        self.prior = PriorGuide(config)
        self.bottleneck = Bottleneck(
            levels[-1], tdim, config.attention_reduction, naa
        )

        skip_widths = list(reversed(levels))
        out_widths = [levels[2], levels[1], levels[0], levels[0]]
        up_in = [levels[-1], *out_widths[:-1]]
        self.up_units = nn.ModuleList(
            [
                UpUnit(i, s, o, tdim, naa)
                for i, s, o in zip(up_in, skip_widths, out_widths)
            ]
        )
        self.head = nn.Conv2d(out_widths[-1], 1, 3, padding=1)

    def forward_full(
        self,
        x_t: torch.Tensor,
        image: torch.Tensor,
        t: int | torch.Tensor,
        capture: dict | None = None,
    ) -> ModelOutputs:
        if x_t.shape != image.shape:
            raise ValueError(
                f"x_t shape {tuple(x_t.shape)} != image shape {tuple(image.shape)}"
            )
        if isinstance(t, (int, np.integer)):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
        t_embed = self.time_mlp(time_embedding(t, self.config.time_embed_dim).to(x_t.dtype))

        cond = self.cond_sdb(self.cond_stem(image))
        den = self.den_sdb(self.den_stem(x_t))
        if capture is not None:
            capture["cond_sdb"] = cond
            capture["den_sdb"] = den

        skips = []
        for idx, (cond_unit, den_unit, attention) in enumerate(
            zip(self.cond_units, self.den_units, self.attentions), start=1
        ):
            cond = cond_unit.body(cond, t_embed)
            den = den_unit.body(den, t_embed)
            if capture is not None:
                capture[f"cond{idx}_pre_attn"] = cond
                capture[f"den{idx}_pre_attn"] = den
            cond, den = attention(cond, den)
            if capture is not None:
                capture[f"cond{idx}_post_attn"] = cond
                capture[f"den{idx}_post_attn"] = den
            skips.append(den)
            cond = cond_unit.down(cond)
            den = den_unit.down(den)

        bias, class_logit, loc_logits = self.prior(image, capture)
        h = self.bottleneck(cond + den, bias, t_embed)
        if capture is not None:
            capture["bottleneck"] = h

        for idx, (up, skip) in enumerate(zip(self.up_units, reversed(skips)), start=1):
            h = up(h, skip, t_embed)
            if capture is not None:
                capture[f"up{idx}"] = h

        eps = self.head(h)
        return ModelOutputs(eps=eps, class_logit=class_logit, loc_logits=loc_logits)

    def forward(
        self, x_t: torch.Tensor, image: torch.Tensor, t: int | torch.Tensor
    ) -> torch.Tensor:
        return self.forward_full(x_t, image, t).eps

    def activation_names(self) -> list[str]:
        names = ["cond_sdb", "den_sdb"]
        for i in range(1, 5):
            names += [
                f"cond{i}_pre_attn",
                f"cond{i}_post_attn",
                f"den{i}_pre_attn",
                f"den{i}_post_attn",
            ]
        names.append("bottleneck")
        names += [f"prior{i}" for i in range(1, 5)]
        names += [f"up{i}" for i in range(1, 5)]
        return names


def make_denoiser(model: DualBranchDenoiser, device: str | torch.device = "cpu"):
    """Wrap the model as a numpy denoiser callable for the samplers.

    The callable takes float64 arrays shaped (B, H, W) and a 1-based step
    index, returning the predicted noise in the same shape and dtype.
    """
    model = model.to(device).eval()

    def denoiser(x_t, image, t: int):
        x = torch.from_numpy(np.ascontiguousarray(x_t, dtype=np.float32))[:, None]
        img = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[:, None]
        with torch.no_grad():
            eps = model(x.to(device), img.to(device), t)
        return eps[:, 0].cpu().double().numpy()

    return denoiser
