"""Dataset ingestion, preprocessing, augmentation, and a synthetic generator.

Images are grayscale 2-D arrays normalized to [-1, 1]; masks stay binary
{0, 1} in storage and are mapped to {-1, +1} only when fed to the
diffusion process. Mask resizing is always nearest-neighbor so binarity
survives every operation.

File layout expected by :func:`load_dataset_dir`: pairs ``<id>.png`` +
``<id>_mask.png``, either in one flat directory or in one subdirectory
per class (the split is then stratified per class).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

logger = logging.getLogger(__name__)

MASK_SUFFIX = "_mask"


@dataclass
class Sample:
    """One training/eval item. ``has_tumor`` mirrors mask occupancy."""

    image: np.ndarray
    mask: np.ndarray
    has_tumor: bool
    source_id: str

    def __post_init__(self) -> None:
        if self.image.shape != self.mask.shape:
            raise ValueError(
                f"image shape {self.image.shape} != mask shape {self.mask.shape}"
            )
        if self.has_tumor != bool(self.mask.any()):
            raise ValueError("has_tumor flag inconsistent with mask content")

    @property
    def diffusion_target(self) -> np.ndarray:
        """Mask mapped to the [-1, +1] range the diffusion operates on."""
        return self.mask.astype(np.float64) * 2.0 - 1.0


@dataclass(frozen=True)
class PreprocessConfig:
    """Intensity window and geometry settings.

    ``rescale_to_255`` first maps each item's own intensity range onto
    [0, 255] (for sources whose raw range varies per item, e.g. exported
    MR slices); already 8-bit sources should leave it off.
    """

    window: tuple[float, float] = (0.0, 255.0)
    target_size: int = 128
    rescale_to_255: bool = False

    def __post_init__(self) -> None:
        lo, hi = self.window
        if not lo < hi:
            raise ValueError(f"window must satisfy lo < hi, got [{lo}, {hi}]")
        if self.target_size < 1:
            raise ValueError("target_size must be positive")


MRI_PRESET = PreprocessConfig(window=(20.0, 200.0), rescale_to_255=True)
ULTRASOUND_PRESET = PreprocessConfig(window=(30.0, 235.0), rescale_to_255=False)


def window_normalize(image: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Clip intensities to [lo, hi] and map that window linearly onto [-1, 1]."""
    clipped = np.clip(np.asarray(image, dtype=np.float64), lo, hi)
    return (clipped - lo) / (hi - lo) * 2.0 - 1.0


def rescale_to_255(image: np.ndarray) -> np.ndarray | None:
    """Map the item's own [min, max] onto [0, 255]; None if constant."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi == lo:
        return None
    return (image - lo) / (hi - lo) * 255.0


def _resize(arr: np.ndarray, size: int, nearest: bool) -> np.ndarray:
    if arr.shape == (size, size):
        return arr.astype(np.float64)
    img = Image.fromarray(arr.astype(np.float32), mode="F")
    resampling = Image.Resampling.NEAREST if nearest else Image.Resampling.BILINEAR
    return np.asarray(img.resize((size, size), resampling), dtype=np.float64)


def preprocess(
    raw_image: np.ndarray,
    raw_mask: np.ndarray,
    cfg: PreprocessConfig,
    source_id: str = "",
) -> Sample:
    """Run the intensity pipeline and resize to model resolution.

    Degenerate (constant) raw images under per-item rescaling cannot be
    windowed meaningfully; they are logged and mapped to all -1.
    """
    raw_image = np.asarray(raw_image, dtype=np.float64)
    raw_mask = np.asarray(raw_mask, dtype=np.float64)
    if raw_image.ndim != 2 or raw_mask.ndim != 2:
        raise ValueError("preprocess expects 2-D grayscale image and mask")

    degenerate = False
    if cfg.rescale_to_255:
        rescaled = rescale_to_255(raw_image)
        if rescaled is None:
            logger.warning("degenerate constant image %r mapped to all -1", source_id)
            degenerate = True
        else:
            raw_image = rescaled

    if degenerate:
        image = np.full(raw_image.shape, -1.0)
    else:
        image = window_normalize(raw_image, *cfg.window)
    image = np.clip(_resize(image, cfg.target_size, nearest=False), -1.0, 1.0)

    peak = raw_mask.max()
    binary = (raw_mask > 0.5 * peak).astype(np.float64) if peak > 0 else np.zeros_like(raw_mask)
    mask = _resize(binary, cfg.target_size, nearest=True).astype(np.uint8)

    return Sample(
        image=image, mask=mask, has_tumor=bool(mask.any()), source_id=source_id
    )


def augment_sixfold(sample: Sample) -> list[Sample]:
    """Original plus h-flip, v-flip and the three quarter-turn rotations."""
    if sample.image.shape[0] != sample.image.shape[1]:
        raise ValueError("six-fold augmentation requires square images")

    transforms = [
        ("orig", lambda a: a),
        ("hflip", np.fliplr),
        ("vflip", np.flipud),
        ("rot90", lambda a: np.rot90(a, 1)),
        ("rot180", lambda a: np.rot90(a, 2)),
        ("rot270", lambda a: np.rot90(a, 3)),
    ]
    out = []
    for name, fn in transforms:
        out.append(
            Sample(
                image=np.ascontiguousarray(fn(sample.image)),
                mask=np.ascontiguousarray(fn(sample.mask)),
                has_tumor=sample.has_tumor,
                source_id=f"{sample.source_id}/{name}",
            )
        )
    return out


@dataclass(frozen=True)
class SplitSpec:
    """Fractional split applied per class in file-sorted order:
    first ``train`` of items, then ``val``, remainder test."""

    train: float = 0.7
    val: float = 0.1

    def __post_init__(self) -> None:
        if not (0 < self.train < 1 and 0 <= self.val < 1 and self.train + self.val < 1):
            raise ValueError("split fractions must be positive and sum below 1")

    def cut(self, n: int) -> tuple[int, int]:
        n_train = int(np.floor(self.train * n))
        n_val = int(np.floor(self.val * n))
        return n_train, n_val


@dataclass
class DatasetSplits:
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)


def _read_gray(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "I", "I;16", "F"):
            img = img.convert("L")
        return np.asarray(img, dtype=np.float64)


def _pair_files(directory: Path) -> list[tuple[str, Path, Path]]:
    pairs = []
    for image_path in sorted(directory.iterdir()):
        if not image_path.is_file() or image_path.stem.endswith(MASK_SUFFIX):
            continue
        mask_path = image_path.with_name(
            image_path.stem + MASK_SUFFIX + image_path.suffix
        )
        if not mask_path.exists():
            logger.warning("no mask for %s; skipped", image_path.name)
            continue
        pairs.append((image_path.stem, image_path, mask_path))
    return pairs


def load_dataset_dir(
    path: str | Path,
    split: SplitSpec | None = None,
    cfg: PreprocessConfig | None = None,
    augment_train: bool = False,
) -> DatasetSplits:
    """Load image/mask pairs and split them deterministically per class.

    Subdirectories, when present, are treated as classes and split
    independently so class proportions carry over to every split.
    """
    path = Path(path)
    split = split or SplitSpec()
    cfg = cfg or PreprocessConfig()
    if not path.is_dir():
        raise ValueError(f"dataset directory not found: {path}")

    class_dirs = sorted(p for p in path.iterdir() if p.is_dir()) or [path]
    splits = DatasetSplits()
    for class_dir in class_dirs:
        pairs = _pair_files(class_dir)
        n_train, n_val = split.cut(len(pairs))
        for idx, (stem, image_path, mask_path) in enumerate(pairs):
            source_id = f"{class_dir.name}/{stem}" if class_dir != path else stem
            sample = preprocess(
                _read_gray(image_path), _read_gray(mask_path), cfg, source_id
            )
            if idx < n_train:
                splits.train.append(sample)
            elif idx < n_train + n_val:
                splits.val.append(sample)
            else:
                splits.test.append(sample)

    if augment_train:
        splits.train = [s for orig in splits.train for s in augment_sixfold(orig)]

    for name in ("train", "val", "test"):
        items = getattr(splits, name)
        logger.info("%s split: %d samples", name, len(items))
        if not items:
            raise ValueError(f"empty {name} split from {path}")
    return splits


def ellipse_mask(
    size: int, cx: float, cy: float, a: float, b: float, theta: float
) -> np.ndarray:
    """Exact interior predicate of a rotated ellipse on the pixel grid."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)


def make_synthetic_dataset(
    n: int, size: int = 64, seed: int = 0, tumor_free_fraction: float = 0.15
) -> list[Sample]:
    """Textured backgrounds with 0-2 bright elliptical lesions.

    Masks are rasterized from the same analytic interior predicate that
    shapes the image, so they are exact by construction. Roughly
    ``tumor_free_fraction`` of samples carry no lesion at all.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        texture = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16)
        spread = np.abs(texture).max() or 1.0
        image = -0.55 + 0.35 * texture / spread

        if rng.uniform() < tumor_free_fraction:
            n_ellipses = 0
        else:
            n_ellipses = rng.integers(1, 3)

        mask = np.zeros((size, size), dtype=np.uint8)
        for _ in range(n_ellipses):
            # axes >= 2 px so every ellipse rasterizes to at least one pixel
            a = max(rng.uniform(0.08, 0.22) * size, 2.0)
            b = max(rng.uniform(0.08, 0.22) * size, 2.0)
            margin = max(a, b) * 0.5
            cx = rng.uniform(margin, size - 1 - margin)
            cy = rng.uniform(margin, size - 1 - margin)
            theta = rng.uniform(0, np.pi)
            interior = ellipse_mask(size, cx, cy, a, b, theta)
            mask |= interior
            image = np.where(interior, rng.uniform(0.45, 0.8), image)

        image = np.clip(image + 0.08 * rng.standard_normal((size, size)), -1.0, 1.0)
        samples.append(
            Sample(
                image=image,
                mask=mask,
                has_tumor=n_ellipses > 0,
                source_id=f"synthetic-{seed}-{i:04d}",
            )
        )
    return samples


def split_synthetic(
    samples: list[Sample], split: SplitSpec | None = None
) -> DatasetSplits:
    """Deterministic 70/10/20-style split of an already-generated list."""
    split = split or SplitSpec()
    n_train, n_val = split.cut(len(samples))
    return DatasetSplits(
        train=samples[:n_train],
        val=samples[n_train : n_train + n_val],
        test=samples[n_train + n_val :],
    )
