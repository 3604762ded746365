"""Diffusion training loop with checkpointing, validation, and resume.

Each step draws a per-item timestep and unit noise, forms x_t in closed
form on the {-1,+1} mask, and optimizes the noise-prediction MSE plus the
prior-branch supervision. All randomness flows from one seeded generator
whose state is checkpointed, so an interrupted run resumes bit-exactly.

The paper-side math fixes none of the optimizer details; everything in
TrainConfig is an artifact default and is recorded in the metrics log.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from maskdiff.data import Sample
from maskdiff.evaluation import evaluate
from maskdiff.losses import (
    LossWeights,
    bce_loss,
    ce_loss,
    dice_loss,
    mse_loss,
    total_loss,
)
from maskdiff.network import DualBranchDenoiser, ModelConfig, make_denoiser
from maskdiff.samplers import SamplerConfig
from maskdiff.schedule import NoiseSchedule, make_linear_schedule

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 2e-4
    optimizer: str = "adam"
    ema_decay: float | None = None
    grad_clip: float | None = None
    seed: int = 0
    checkpoint_interval: int = 200
    validation_interval: int = 0  # steps; 0 disables mid-training validation
    validation_nfe: int = 25
    validation_images: int = 4
    loss_weights: LossWeights = field(default_factory=LossWeights)
    timesteps: int = 1000
    variance_choice: str = "beta"
    norm_recalibration_batches: int = 50

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class LossRecord:
    step: int
    mse: float
    ce: float
    dice: float
    bce: float
    total: float

    def as_json(self) -> str:
        return json.dumps({"kind": "train_step", **asdict(self)})


def _stack_split(samples: list[Sample]):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    targets = np.stack([s.diffusion_target for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.float32)
    labels = np.array([float(s.has_tumor) for s in samples], dtype=np.float32)
    return images, targets, masks, labels


class EmaWeights:
    """Exponential moving average of model parameters."""

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {
            name: p.detach().clone() for name, p in model.named_parameters()
        }

    def update(self, model: torch.nn.Module) -> None:
        with torch.no_grad():
            for name, p in model.named_parameters():
                self.shadow[name].mul_(self.decay).add_(p, alpha=1 - self.decay)

    def copy_to(self, model: torch.nn.Module) -> None:
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(self.shadow[name])


class Trainer:
    """Owns the model, optimizer, schedule, and RNG for one training run."""

    def __init__(
        self,
        model: DualBranchDenoiser,
        train_config: TrainConfig,
        schedule: NoiseSchedule | None = None,
    ):
        self.model = model
        self.config = train_config
        self.schedule = schedule or make_linear_schedule(
            train_config.timesteps, train_config.variance_choice
        )
        if self.schedule.T != train_config.timesteps:
            raise ValueError("schedule length disagrees with train config")
        self.optimizer = torch.optim.Adam(
            model.parameters(), lr=train_config.learning_rate
        )
        self.rng = np.random.default_rng(train_config.seed)
        self.ema = (
            EmaWeights(model, train_config.ema_decay)
            if train_config.ema_decay
            else None
        )
        self.global_step = 0
        self.epoch = 0
        self.records: list[LossRecord] = []

    # -- single optimization step -------------------------------------
    def train_step(
        self,
        images: torch.Tensor,
        targets: torch.Tensor,
        masks: torch.Tensor,
        labels: torch.Tensor,
    ) -> LossRecord:
        """One optimizer update on a prepared batch.

        images/targets: (B, 1, H, W) in [-1, 1]; masks: (B, 1, H, W) in
        {0, 1}; labels: (B,) presence flags.
        """
        batch = images.shape[0]
        t = self.rng.integers(1, self.schedule.T + 1, size=batch)
        eps = torch.from_numpy(
            self.rng.standard_normal((batch, *targets.shape[1:])).astype(np.float32)
        )
        ab = torch.from_numpy(
            self.schedule.alpha_bars[t - 1].astype(np.float32)
        ).reshape(-1, 1, 1, 1)
        x_t = ab.sqrt() * targets + (1.0 - ab).sqrt() * eps

        self.model.train()
        out = self.model.forward_full(x_t, images, torch.from_numpy(t))

        mse = mse_loss(out.eps, eps)
        ce = ce_loss(torch.sigmoid(out.class_logit), labels)
        loc_probs = torch.sigmoid(out.loc_logits)
        loc_truth = F.interpolate(masks, size=loc_probs.shape[-2:], mode="nearest")
        dice = dice_loss(loc_truth, loc_probs, self.config.loss_weights.dice_epsilon)
        bce = bce_loss(loc_truth, loc_probs)
        loss = total_loss(mse, ce, dice, bce, self.config.loss_weights)

        self.optimizer.zero_grad()
        loss.backward()
        if self.config.grad_clip:
            torch.nn.utils.clip_grad_norm_(
                self.model.parameters(), self.config.grad_clip
            )
        self.optimizer.step()
        if self.ema is not None:
            self.ema.update(self.model)

        self.global_step += 1
        record = LossRecord(
            step=self.global_step,
            mse=mse.item(),
            ce=ce.item(),
            dice=dice.item(),
            bce=bce.item(),
            total=loss.item(),
        )
        self.records.append(record)
        return record

    # -- full loop ------------------------------------------------------
    def train_loop(
        self,
        train_samples: list[Sample],
        val_samples: list[Sample] | None = None,
        out_dir: str | Path = "run",
        resume_from: str | Path | None = None,
    ) -> Path:
        """Epoch loop with periodic checkpoints and optional validation.

        Returns the path of the final checkpoint. Batch order within an
        epoch is a permutation derived from (seed, epoch), so resuming
        from a checkpoint replays the identical stream.
        """
        if not train_samples:
            raise ValueError("training split is empty")
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"

        start_batch = 0
        if resume_from is not None:
            state = load_checkpoint(resume_from)
            self.restore_training_state(state)
            start_batch = state["train_state"]["next_batch"]
            logger.info(
                "resumed from %s at step %d (epoch %d)",
                resume_from, self.global_step, self.epoch,
            )

        images, targets, masks, labels = _stack_split(train_samples)
        n = len(train_samples)
        batch = min(self.config.batch_size, n)
        started = time.time()

        with open(metrics_path, "a") as metrics_file:
            while self.epoch < self.config.epochs:
                order = np.random.default_rng(
                    (self.config.seed, self.epoch)
                ).permutation(n)
                n_batches = n // batch
                for b in range(start_batch, n_batches):
                    idx = order[b * batch : (b + 1) * batch]
                    record = self.train_step(
                        torch.from_numpy(images[idx])[:, None],
                        torch.from_numpy(targets[idx])[:, None],
                        torch.from_numpy(masks[idx])[:, None],
                        torch.from_numpy(labels[idx]),
                    )
                    metrics_file.write(record.as_json() + "\n")
                    if (
                        self.config.checkpoint_interval
                        and self.global_step % self.config.checkpoint_interval == 0
                    ):
                        self.save(out_dir / "checkpoint.pt", next_batch=b + 1)
                    if (
                        self.config.validation_interval
                        and val_samples
                        and self.global_step % self.config.validation_interval == 0
                    ):
                        score = self.validate(val_samples)
                        metrics_file.write(
                            json.dumps(
                                {
                                    "kind": "validation",
                                    "step": self.global_step,
                                    "mean_dsc": score,
                                }
                            )
                            + "\n"
                        )
                        logger.info(
                            "step %d: validation DSC %.4f", self.global_step, score
                        )
                start_batch = 0
                self.epoch += 1

        logger.info(
            "trained %d steps in %.1f s", self.global_step, time.time() - started
        )
        if self.config.norm_recalibration_batches:
            self.recalibrate_norm_stats(train_samples)
        final = out_dir / "checkpoint.pt"
        self.save(final, next_batch=0)
        return final

    def validate(self, val_samples: list[Sample], repeats: int = 1) -> float:
        """Quick DSC check with the reduced-budget deterministic sampler."""
        subset = val_samples[: self.config.validation_images]
        config = SamplerConfig(kind="ddim", nfe=min(self.config.validation_nfe, self.schedule.T))
        metrics = evaluate(
            make_denoiser(self.model),
            subset,
            self.schedule,
            config,
            repeats=repeats,
            seed=self.config.seed,
        )
        return metrics.mean_dsc

    def recalibrate_norm_stats(self, samples: list[Sample]) -> None:
        """Refresh normalization running statistics with noised inputs.

        Running estimates collected with momentum during optimization lag
        the final weights; a cumulative-average pass over freshly noised
        batches makes inference-mode statistics match the data the
        denoiser actually sees.
        """
        images, targets, _, _ = _stack_split(samples)
        n = images.shape[0]
        batch = min(self.config.batch_size, n)
        momenta = {}
        for module in self.model.modules():
            if isinstance(module, torch.nn.BatchNorm2d):
                momenta[module] = module.momentum
                module.momentum = None  # cumulative average
                module.reset_running_stats()
        self.model.train()
        rng = np.random.default_rng(self.config.seed + 1)
        with torch.no_grad():
            for _ in range(self.config.norm_recalibration_batches):
                idx = rng.choice(n, size=batch, replace=True)
                t = rng.integers(1, self.schedule.T + 1, size=batch)
                eps = rng.standard_normal((batch, 1, *images.shape[1:]))
                ab = self.schedule.alpha_bars[t - 1].reshape(-1, 1, 1, 1)
                x_t = np.sqrt(ab) * targets[idx][:, None] + np.sqrt(1 - ab) * eps
                self.model.forward_full(
                    torch.from_numpy(x_t.astype(np.float32)),
                    torch.from_numpy(images[idx])[:, None],
                    torch.from_numpy(t),
                )
        for module, momentum in momenta.items():
            module.momentum = momentum
        self.model.eval()

    # -- checkpointing ----------------------------------------------------
    def save(self, path: str | Path, next_batch: int = 0) -> Path:
        path = Path(path)
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model_config": asdict(self.model.config),
            "schedule": {
                "T": self.schedule.T,
                "variance_choice": self.schedule.variance_choice,
            },
            "model_state": self.model.state_dict(),
            "optimizer_state": self.optimizer.state_dict(),
            "ema_state": self.ema.shadow if self.ema else None,
            "train_config": asdict(self.config),
            "train_state": {
                "global_step": self.global_step,
                "epoch": self.epoch,
                "next_batch": next_batch,
                "rng_state": self.rng.bit_generator.state,
            },
        }
        torch.save(payload, path)
        return path

    def restore_training_state(self, state: dict) -> None:
        self.model.load_state_dict(state["model_state"])
        self.optimizer.load_state_dict(state["optimizer_state"])
        if state.get("ema_state") and self.ema:
            self.ema.shadow = state["ema_state"]
        train_state = state["train_state"]
        self.global_step = train_state["global_step"]
        self.epoch = train_state["epoch"]
        self.rng.bit_generator.state = train_state["rng_state"]


def load_checkpoint(path: str | Path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    version = state.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version: {version}")
    return state


def load_model(path: str | Path) -> tuple[DualBranchDenoiser, NoiseSchedule, dict]:
    """Rebuild the model and schedule stored in a checkpoint."""
    state = load_checkpoint(path)
    config = ModelConfig(**state["model_config"])
    model = DualBranchDenoiser(config)
    model.load_state_dict(state["model_state"])
    model.eval()
    schedule = make_linear_schedule(
        state["schedule"]["T"], state["schedule"]["variance_choice"]
    )
    return model, schedule, state
