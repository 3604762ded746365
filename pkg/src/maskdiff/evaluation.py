"""Segmentation quality metrics and the repeated-sampling study harness.

The evaluation protocol runs each sampler several times with derived
seeds, averages DSC over images within a repeat, then reports the mean
and variance over the repeat-level means. The sweep harness applies that
protocol across evaluation budgets and sampler kinds and renders the
mean/variance curves against the full-budget ancestral reference.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from maskdiff.data import Sample
from maskdiff.samplers import Denoiser, SamplerConfig, binarize, sample
from maskdiff.schedule import NoiseSchedule

logger = logging.getLogger(__name__)


def dsc(pred: np.ndarray, truth: np.ndarray) -> float:
    """Dice similarity 2|A∩B| / (|A| + |B|); two empty masks count as 1.0."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    pred = pred > 0
    truth = truth > 0
    total = pred.sum() + truth.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, truth).sum() / total)


@dataclass
class RunMetrics:
    """Repeated-run DSC statistics for one (sampler kind, nfe) cell."""

    per_image_dsc: np.ndarray  # (repeats, n_images)
    mean_dsc: float
    var_dsc: float
    nfe: int
    kind: str
    repeats: int
    seeds: list[int] = field(default_factory=list)

    @property
    def repeat_means(self) -> np.ndarray:
        return self.per_image_dsc.mean(axis=1)


def derive_seed(base_seed: int, repeat: int, index: int) -> int:
    """Stable per-(run, repeat, image) seed, independent of batch order."""
    ss = np.random.SeedSequence((base_seed, repeat, index))
    return int(ss.generate_state(1)[0])


def evaluate(
    denoiser: Denoiser,
    samples: list[Sample],
    schedule: NoiseSchedule,
    config: SamplerConfig,
    repeats: int = 5,
    seed: int = 0,
) -> RunMetrics:
    """Run the sampler ``repeats`` times over a split and aggregate DSC.

    Repeats run sequentially for seed bookkeeping; images within a repeat
    are batched into one trajectory with per-image seeds.
    """
    if not samples:
        raise ValueError("evaluate needs a non-empty sample list")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")

    images = np.stack([s.image for s in samples])
    truths = np.stack([s.mask for s in samples])
    nfe = config.resolve_nfe(schedule)

    scores = np.zeros((repeats, len(samples)))
    seeds_used = []
    for r in range(repeats):
        item_seeds = [derive_seed(seed, r, i) for i in range(len(samples))]
        seeds_used.extend(item_seeds)
        x0 = sample(denoiser, images, schedule, config, seed=item_seeds)
        preds = binarize(x0, config.binarize_threshold)
        scores[r] = [dsc(p, t) for p, t in zip(preds, truths)]

    repeat_means = scores.mean(axis=1)
    return RunMetrics(
        per_image_dsc=scores,
        mean_dsc=float(repeat_means.mean()),
        var_dsc=float(repeat_means.var()),
        nfe=nfe,
        kind=config.kind,
        repeats=repeats,
        seeds=seeds_used,
    )


def nfe_sweep(
    denoiser: Denoiser,
    samples: list[Sample],
    schedule: NoiseSchedule,
    nfe_list: list[int],
    kinds: list[str] = ("ddim", "dpm2"),
    repeats: int = 5,
    seed: int = 0,
    out_dir: str | Path | None = None,
    reference: RunMetrics | None = None,
) -> list[RunMetrics]:
    """DSC mean/variance for each (kind, nfe) cell plus reference line.

    Budgets above the schedule length are dropped with a warning. When
    ``out_dir`` is given, writes a CSV table, a JSON summary, and one plot
    per kind with the ancestral reference as a horizontal line.
    """
    usable = []
    for nfe in nfe_list:
        if nfe > schedule.T:
            logger.warning("nfe=%d exceeds T=%d; skipped", nfe, schedule.T)
        else:
            usable.append(nfe)

    if reference is None:
        reference = evaluate(
            denoiser,
            samples,
            schedule,
            SamplerConfig(kind="ancestral"),
            repeats=repeats,
            seed=seed,
        )

    results = []
    for kind in kinds:
        for nfe in usable:
            if kind == "dpm2" and nfe % 2 != 0:
                logger.warning("nfe=%d is odd; skipped for dpm2", nfe)
                continue
            config = SamplerConfig(kind=kind, nfe=nfe)
            metrics = evaluate(
                denoiser, samples, schedule, config, repeats=repeats, seed=seed
            )
            logger.info(
                "%s nfe=%d: mean DSC %.4f var %.2e", kind, nfe, metrics.mean_dsc,
                metrics.var_dsc,
            )
            results.append(metrics)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_sweep_table(results, reference, out_dir / "sweep.csv")
        write_sweep_summary(results, reference, out_dir / "sweep.json")
        for kind in kinds:
            plot_sweep(
                [m for m in results if m.kind == kind],
                reference,
                out_dir / f"sweep_{kind}.png",
            )
    return results


def write_sweep_table(
    results: list[RunMetrics], reference: RunMetrics, path: Path
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "nfe", "repeat", "mean_dsc"])
        for metrics in [reference, *results]:
            for r, value in enumerate(metrics.repeat_means):
                writer.writerow([metrics.kind, metrics.nfe, r, f"{value:.6f}"])


def write_sweep_summary(
    results: list[RunMetrics], reference: RunMetrics, path: Path
) -> None:
    payload = {
        "reference": _metrics_dict(reference),
        "results": [_metrics_dict(m) for m in results],
    }
    path.write_text(json.dumps(payload, indent=2))


def _metrics_dict(m: RunMetrics) -> dict:
    return {
        "kind": m.kind,
        "nfe": m.nfe,
        "repeats": m.repeats,
        "mean_dsc": m.mean_dsc,
        "var_dsc": m.var_dsc,
        "repeat_means": [float(v) for v in m.repeat_means],
    }


def plot_sweep(
    results: list[RunMetrics], reference: RunMetrics, path: Path
) -> None:
    """Mean DSC (solid) and variance (dashed) vs evaluation budget, with
    the full-budget ancestral mean as a horizontal reference line."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    results = sorted(results, key=lambda m: m.nfe)
    nfes = [m.nfe for m in results]
    means = [m.mean_dsc for m in results]
    variances = [m.var_dsc for m in results]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(nfes, means, "-o", label="mean DSC")
    ax.axhline(
        reference.mean_dsc, color="gold", linewidth=2, label="ancestral reference"
    )
    ax.set_xlabel("denoiser evaluations")
    ax.set_ylabel("DSC")
    ax2 = ax.twinx()
    ax2.plot(nfes, variances, "--s", color="tab:red", label="variance")
    ax2.set_ylabel("variance")
    kind = results[0].kind if results else "?"
    ax.set_title(f"{kind}: DSC vs evaluation budget")
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
