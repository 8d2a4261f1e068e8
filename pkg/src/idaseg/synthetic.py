"""Synthetic curvilinear-structure data for desk-scale experiments.

Vessel-like masks come from branching random walks stamped with discs.
An intensity style (background/foreground tone, noise, blur) turns each
mask into an image, so two styles sharing the generator produce a
matched pair of domains with a controllable appearance gap.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter


@dataclass
class DomainStyle:
    """Appearance parameters for rendering a vessel mask to an image."""

    background: float = 0.85
    foreground: float = 0.25
    noise_sigma: float = 0.03
    blur_sigma: float = 0.6
    vessel_radius: tuple[float, float] = (1.0, 2.5)
    density: float = 0.10  # target foreground fraction
    n_trees: int = 3

    def __post_init__(self):
        for name in ("background", "foreground"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise_sigma and blur_sigma must be >= 0")
        lo, hi = self.vessel_radius
        if not 0 < lo <= hi:
            raise ValueError(f"vessel_radius must satisfy 0 < lo <= hi, got {self.vessel_radius}")
        if not 0.0 < self.density < 1.0:
            raise ValueError(f"density must be in (0, 1), got {self.density}")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")


# Bright field with dark, crisp vessels (fundus-photography flavour).
RETINA_LIKE = DomainStyle(
    background=0.85,
    foreground=0.25,
    noise_sigma=0.03,
    blur_sigma=0.6,
    vessel_radius=(1.0, 2.5),
    density=0.10,
    n_trees=3,
)

# Flatter, low-contrast field with heavier blur and speckle
# (corrosion-cast microscopy flavour).
CAM_LIKE = DomainStyle(
    background=0.75,
    foreground=0.45,
    noise_sigma=0.06,
    blur_sigma=1.2,
    vessel_radius=(1.5, 3.5),
    density=0.14,
    n_trees=4,
)

STYLE_PRESETS = {"retina_like": RETINA_LIKE, "cam_like": CAM_LIKE}


def _disc_offsets(radius: float) -> tuple[np.ndarray, np.ndarray]:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = yy * yy + xx * xx <= radius * radius
    return yy[keep], xx[keep]


def _stamp(mask: np.ndarray, y: float, x: float, dy: np.ndarray, dx: np.ndarray):
    h, w = mask.shape
    ys = np.round(y + dy).astype(np.int64)
    xs = np.round(x + dx).astype(np.int64)
    keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    mask[ys[keep], xs[keep]] = 1


def generate_vessel_mask(
    size: tuple[int, int],
    style: DomainStyle,
    rng: np.random.Generator,
    max_steps: int = 200_000,
) -> np.ndarray:
    """Grow branching random-walk trees until the foreground fraction
    reaches ``style.density`` (or the step budget runs out).

    Returns an int64 plane in {0, 1}.
    """
    h, w = size
    mask = np.zeros((h, w), dtype=np.int64)
    target_px = style.density * h * w
    lo, hi = style.vessel_radius

    # walker state: (y, x, heading, radius)
    walkers = []
    for _ in range(style.n_trees):
        edge = rng.integers(0, 4)
        if edge == 0:
            y, x = 0.0, float(rng.uniform(0, w))
        elif edge == 1:
            y, x = float(h - 1), float(rng.uniform(0, w))
        elif edge == 2:
            y, x = float(rng.uniform(0, h)), 0.0
        else:
            y, x = float(rng.uniform(0, h)), float(w - 1)
        heading = float(np.arctan2(h / 2 - y, w / 2 - x)) + float(rng.uniform(-0.4, 0.4))
        walkers.append((y, x, heading, float(rng.uniform(lo, hi))))

    steps = 0
    while walkers and mask.sum() < target_px and steps < max_steps:
        y, x, heading, radius = walkers.pop(0)
        dy_off, dx_off = _disc_offsets(radius)
        # one segment: a run of stamps along a meandering heading
        seg_len = int(rng.integers(10, 30))
        alive = True
        for _ in range(seg_len):
            _stamp(mask, y, x, dy_off, dx_off)
            heading += float(rng.normal(0.0, 0.18))
            y += np.sin(heading)
            x += np.cos(heading)
            steps += 1
            if not (-radius <= y < h + radius and -radius <= x < w + radius):
                alive = False
                break
            if mask.sum() >= target_px or steps >= max_steps:
                alive = False
                break
        if not alive:
            continue
        # branch or continue; children taper toward the minimum radius
        if rng.random() < 0.25:
            spread = float(rng.uniform(0.35, 0.9))
            for sgn in (-1.0, 1.0):
                child_r = max(lo, radius * float(rng.uniform(0.7, 0.95)))
                walkers.append((y, x, heading + sgn * spread, child_r))
        else:
            walkers.append((y, x, heading, radius))
    return mask


def render_image(mask: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    """Two-tone fill, additive white noise, gaussian blur, clip to [0, 1].

    With noise_sigma=0 and blur_sigma=0 the output has exactly the two
    style tones.
    """
    img = np.where(mask > 0, style.foreground, style.background).astype(np.float64)
    if style.noise_sigma > 0:
        img = img + style.noise_sigma * rng.standard_normal(mask.shape)
    if style.blur_sigma > 0:
        img = gaussian_filter(img, style.blur_sigma)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_domain(
    n: int,
    size: tuple[int, int],
    style: DomainStyle,
    seed: int = 0,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Produce ``n`` (image, mask) pairs of the given pixel size."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        mask = generate_vessel_mask(size, style, rng)
        img = render_image(mask, style, rng)
        out.append((img, mask))
    return out


def write_synthetic_dataset(
    root: str | Path,
    n: int,
    size: tuple[int, int],
    style: DomainStyle | str,
    seed: int = 0,
) -> Path:
    """Write ``n`` rendered pairs under ``root/images`` and ``root/masks``
    as 8-bit PNGs (masks use {0, 255}). Returns the dataset root."""
    if isinstance(style, str):
        try:
            style = STYLE_PRESETS[style]
        except KeyError:
            raise ValueError(
                f"unknown style {style!r}; presets: {sorted(STYLE_PRESETS)}"
            ) from None
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, (img, mask) in enumerate(generate_synthetic_domain(n, size, style, seed)):
        name = f"{i:04d}.png"
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(root / "images" / name)
        Image.fromarray((mask * 255).astype(np.uint8)).save(root / "masks" / name)
    return root


def style_summary(style: DomainStyle) -> dict:
    return asdict(style)
