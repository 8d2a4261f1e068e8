"""Dataset loading, preprocessing, and sampling.

Datasets live on disk as a directory with ``images/`` and, for labeled
splits, ``masks/`` holding filename-matched 8-bit files. Pixels are kept
as float arrays in [0, 1]; labels are integer class planes in {0, 1}.

Two preprocessing paths feed training: whole-image resize and random
crop, both producing single-channel planes of the configured size.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".gif", ".bmp")

# ITU-R 601 luminance coefficients
DEFAULT_GRAYSCALE_WEIGHTS = (0.299, 0.587, 0.114)


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


class DatasetError(ValueError):
    """Missing or malformed dataset directory."""


@dataclass
class ImageSample:
    """One image plane with optional label mask and identity metadata."""

    pixels: np.ndarray  # (H, W) or (H, W, 3), float in [0, 1]
    label: np.ndarray | None  # (H, W) int in {0, ..., L-1}, or None
    domain: Domain
    id: str

    def __post_init__(self):
        if self.label is not None and self.label.shape != self.pixels.shape[:2]:
            raise ValueError(
                f"label shape {self.label.shape} != pixel shape {self.pixels.shape[:2]} ({self.id})"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass
class PreprocessConfig:
    """Geometry, grayscale, and augmentation settings for training inputs."""

    train_size: tuple[int, int] = (384, 384)  # (W, H)
    grayscale_weights: tuple[float, float, float] = DEFAULT_GRAYSCALE_WEIGHTS
    horizontal_flip: bool = True
    vertical_flip: bool = True
    color_jitter: bool = True
    brightness: float = 0.1
    contrast: float = 0.1
    seed: int = 0

    def __post_init__(self):
        w, h = self.train_size
        if w <= 0 or h <= 0:
            raise ValueError(f"train_size must be positive, got {self.train_size}")
        if abs(sum(self.grayscale_weights) - 1.0) > 1e-9:
            raise ValueError("grayscale_weights must sum to 1")
        if self.brightness < 0 or self.contrast < 0:
            raise ValueError("jitter amplitudes must be >= 0")


@dataclass
class QuadBatch:
    """The four per-iteration inputs: resized/cropped source and target.

    ``sr``/``tr`` hold the whole-resize path, ``sp``/``tp`` the crop path
    (under input_mode="both"; other modes fill the slots from one path).
    Source slots carry labels, target slots do not.
    """

    sr: ImageSample
    sp: ImageSample
    tr: ImageSample
    tp: ImageSample


def load_dataset(root: str | Path, domain: Domain | str, split: str = "train") -> list[ImageSample]:
    """Load all samples under ``root/images`` (+ ``root/masks`` when present).

    Masks are binarized at threshold 127 on the 8-bit values. The target
    training split is returned unlabeled even if masks exist on disk.
    Image/mask shape mismatches reject the file with a warning instead of
    failing the whole load.
    """
    domain = Domain(domain)
    root = Path(root)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise DatasetError(f"missing dataset directory: {images_dir}")
    masks_dir = root / "masks"
    use_masks = masks_dir.is_dir() and not (domain == Domain.TARGET and split == "train")

    paths = sorted(p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    if not paths:
        warnings.warn(f"no images found under {images_dir}", stacklevel=2)
        return []

    samples = []
    for path in paths:
        pixels = _read_image(path)
        label = None
        if use_masks:
            mask_path = _matching_mask(masks_dir, path)
            if mask_path is None:
                log.warning("rejecting %s: no matching mask", path.name)
                continue
            raw = np.asarray(Image.open(mask_path))
            if raw.ndim == 3:
                raw = raw[..., 0]
            if raw.shape != pixels.shape[:2]:
                log.warning(
                    "rejecting %s: mask shape %s != image shape %s",
                    path.name, raw.shape, pixels.shape[:2],
                )
                continue
            label = (raw > 127).astype(np.int64)
        samples.append(ImageSample(pixels=pixels, label=label, domain=domain, id=path.stem))
    samples.sort(key=lambda s: s.id)
    return samples


def _read_image(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "RGB", "I;16", "I"):
        img = img.convert("RGB")
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    elif arr.dtype == np.uint16:
        arr = arr.astype(np.float64) / 65535.0
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    return np.clip(arr, 0.0, 1.0)


def _matching_mask(masks_dir: Path, image_path: Path) -> Path | None:
    for ext in IMAGE_EXTS:
        cand = masks_dir / (image_path.stem + ext)
        if cand.is_file():
            return cand
    return None


def resize_whole(s: ImageSample, cfg: PreprocessConfig) -> ImageSample:
    """Bilinear resample of pixels to train_size; nearest for the label."""
    h, w = s.shape
    tw, th = cfg.train_size
    if h < 2 or w < 2:
        raise ValueError(f"cannot resize degenerate image of shape {s.shape}")
    if (h, w) == (th, tw):
        return replace(s, pixels=s.pixels.copy(),
                       label=None if s.label is None else s.label.copy())
    pixels = _resize_pixels(s.pixels, (tw, th))
    label = None if s.label is None else resize_label(s.label, (tw, th))
    return replace(s, pixels=pixels, label=label)


def _resize_pixels(pixels: np.ndarray, size_wh: tuple[int, int]) -> np.ndarray:
    if pixels.ndim == 2:
        im = Image.fromarray(pixels.astype(np.float32), mode="F")
        return np.asarray(im.resize(size_wh, Image.BILINEAR)).astype(np.float64)
    chans = [
        np.asarray(Image.fromarray(pixels[..., c].astype(np.float32), mode="F")
                   .resize(size_wh, Image.BILINEAR))
        for c in range(pixels.shape[2])
    ]
    return np.stack(chans, axis=-1).astype(np.float64)


def resize_label(label: np.ndarray, size_wh: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resample of an integer class plane."""
    h, w = label.shape
    tw, th = size_wh
    if (h, w) == (th, tw):
        return label.copy()
    # center-aligned nearest sampling; exact for integer factors
    rows = np.minimum((np.arange(th) + 0.5) * h / th, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(tw) + 0.5) * w / tw, w - 1).astype(np.int64)
    return label[np.ix_(rows, cols)]


def random_crop(s: ImageSample, cfg: PreprocessConfig, rng: np.random.Generator) -> ImageSample:
    """Crop a train_size window at a uniformly random offset.

    Images smaller than the crop are reflect-padded first; label offsets
    are identical to pixel offsets.
    """
    tw, th = cfg.train_size
    pixels, label = s.pixels, s.label
    h, w = pixels.shape[:2]
    pad_h, pad_w = max(0, th - h), max(0, tw - w)
    if pad_h or pad_w:
        pad = ((0, pad_h), (0, pad_w)) + (((0, 0),) if pixels.ndim == 3 else ())
        pixels = np.pad(pixels, pad, mode="reflect")
        if label is not None:
            label = np.pad(label, ((0, pad_h), (0, pad_w)), mode="reflect")
        h, w = pixels.shape[:2]
    y0 = int(rng.integers(0, h - th + 1))
    x0 = int(rng.integers(0, w - tw + 1))
    pixels = pixels[y0:y0 + th, x0:x0 + tw].copy()
    label = None if label is None else label[y0:y0 + th, x0:x0 + tw].copy()
    return replace(s, pixels=pixels, label=label)


def to_grayscale(s: ImageSample, cfg: PreprocessConfig) -> ImageSample:
    """Weighted channel sum; single-channel inputs pass through."""
    if s.pixels.ndim == 2:
        return s
    weights = np.asarray(cfg.grayscale_weights, dtype=np.float64)
    pixels = np.clip(s.pixels @ weights, 0.0, 1.0)
    return replace(s, pixels=pixels)


def flip_horizontal(s: ImageSample) -> ImageSample:
    return replace(
        s,
        pixels=np.flip(s.pixels, axis=1).copy(),
        label=None if s.label is None else np.flip(s.label, axis=1).copy(),
    )


def flip_vertical(s: ImageSample) -> ImageSample:
    return replace(
        s,
        pixels=np.flip(s.pixels, axis=0).copy(),
        label=None if s.label is None else np.flip(s.label, axis=0).copy(),
    )


def augment(s: ImageSample, cfg: PreprocessConfig, rng: np.random.Generator) -> ImageSample:
    """Random flips (pixels and label together) then photometric jitter.

    Jitter rescales contrast about the image mean and shifts brightness,
    clamped to [0, 1]; the label is untouched by jitter.
    """
    if cfg.horizontal_flip and rng.random() < 0.5:
        s = flip_horizontal(s)
    if cfg.vertical_flip and rng.random() < 0.5:
        s = flip_vertical(s)
    if cfg.color_jitter:
        scale = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
        offset = rng.uniform(-cfg.brightness, cfg.brightness)
        mean = s.pixels.mean()
        pixels = np.clip((s.pixels - mean) * scale + mean + offset, 0.0, 1.0)
        s = replace(s, pixels=pixels)
    return s


def sample_quad(
    source: Sequence[ImageSample],
    target: Sequence[ImageSample],
    cfg: PreprocessConfig,
    rng: np.random.Generator,
    input_mode: str = "both",
) -> QuadBatch:
    """Draw {sr, sp, tr, tp} with replacement and preprocess each slot.

    input_mode "both" resizes the r-slots and crops the p-slots; "patch"
    crops all four, "whole" resizes all four.
    """
    if not source or not target:
        raise ValueError("sample_quad needs non-empty source and target lists")

    def pick(pool):
        return pool[int(rng.integers(0, len(pool)))]

    def whole(sample):
        return resize_whole(sample, cfg)

    def patch(sample):
        return random_crop(sample, cfg, rng)

    r_op, p_op = {
        "both": (whole, patch),
        "patch": (patch, patch),
        "whole": (whole, whole),
    }[input_mode]

    quad = QuadBatch(
        sr=r_op(pick(source)),
        sp=p_op(pick(source)),
        tr=r_op(pick(target)),
        tp=p_op(pick(target)),
    )
    return QuadBatch(
        sr=augment(to_grayscale(quad.sr, cfg), cfg, rng),
        sp=augment(to_grayscale(quad.sp, cfg), cfg, rng),
        tr=augment(to_grayscale(quad.tr, cfg), cfg, rng),
        tp=augment(to_grayscale(quad.tp, cfg), cfg, rng),
    )
