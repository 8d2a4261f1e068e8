"""Cascaded two-stage segmentation backbone with a feature tap.

Two encoder-decoder networks run in sequence: the second stage sees the
input image concatenated with the first stage's logits and produces the
final class probabilities. Contrastive features are tapped at the
second stage's bottleneck, so a (H, W) input yields an
(H / 2^(depth-1), W / 2^(depth-1)) feature map.

Everything runs in float64: the models are small, and the tight
equation tolerances plus finite-difference gradient checks want the
extra precision. No normalization layers anywhere; activations are
SiLU and resampling is average-pool down / bilinear up, keeping the
whole forward smooth in the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .config import NumericError
from .data import ImageSample, PreprocessConfig, _resize_pixels, to_grayscale

DTYPE = torch.float64


@dataclass
class NetworkConfig:
    depth: int = 4
    base_channels: int = 16
    num_classes: int = 2
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1 or self.num_classes < 2 or self.in_channels < 1:
            raise ValueError("channel and class counts must be positive (classes >= 2)")

    @property
    def feature_dim(self) -> int:
        return self.base_channels * 2 ** (self.depth - 1)

    @property
    def stride(self) -> int:
        return 2 ** (self.depth - 1)


@dataclass
class ForwardOutput:
    """Per-pixel class probabilities plus the bottleneck feature map."""

    probabilities: torch.Tensor  # (B, L, H, W), per-pixel simplex
    features: torch.Tensor  # (B, D, h, w)
    logits: torch.Tensor  # (B, L, H, W), second-stage pre-softmax
    stage1_logits: torch.Tensor = field(repr=False, default=None)


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.SiLU(),
        )

    def forward(self, x):
        return self.net(x)


class UNetStage(nn.Module):
    """Single encoder-decoder stage returning logits and its bottleneck."""

    def __init__(self, in_ch: int, base: int, depth: int, out_ch: int):
        super().__init__()
        self.depth = depth
        chans = [base * 2 ** i for i in range(depth)]
        self.encoders = nn.ModuleList()
        prev = in_ch
        for c in chans[:-1]:
            self.encoders.append(ConvBlock(prev, c))
            prev = c
        self.pool = nn.AvgPool2d(2)
        self.bottleneck = ConvBlock(prev, chans[-1])
        self.decoders = nn.ModuleList()
        prev = chans[-1]
        for c in reversed(chans[:-1]):
            self.decoders.append(ConvBlock(prev + c, c))
            prev = c
        self.head = nn.Conv2d(prev, out_ch, 1)

    def forward(self, x):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        bottleneck = x
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = nn.functional.interpolate(
                x, size=skip.shape[-2:], mode="bilinear", align_corners=False
            )
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x), bottleneck


class WNet(nn.Module):
    """Two cascaded stages; stage 2 consumes the image plus stage-1 logits."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.stage1 = UNetStage(cfg.in_channels, cfg.base_channels, cfg.depth, cfg.num_classes)
        self.stage2 = UNetStage(
            cfg.in_channels + cfg.num_classes, cfg.base_channels, cfg.depth, cfg.num_classes
        )
        self.iteration = 0
        self.to(DTYPE)

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
        s = self.cfg.stride
        if x.shape[-2] % s or x.shape[-1] % s:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} must be a multiple of {s} for depth {self.cfg.depth}"
            )
        logits1, _ = self.stage1(x)
        logits2, bottleneck = self.stage2(torch.cat([x, logits1], dim=1))
        probs = torch.softmax(logits2, dim=1)
        if not torch.isfinite(logits2).all():
            raise NumericError("non-finite activations in forward pass")
        return ForwardOutput(
            probabilities=probs, features=bottleneck, logits=logits2, stage1_logits=logits1
        )


def build_model(cfg: NetworkConfig, seed: int | None = None) -> WNet:
    if seed is not None:
        torch.manual_seed(seed)
    return WNet(cfg)


def clone_model(model: WNet) -> WNet:
    twin = WNet(model.cfg)
    twin.load_state_dict({k: v.clone() for k, v in model.state_dict().items()})
    twin.iteration = model.iteration
    return twin


def to_tensor(planes: np.ndarray) -> torch.Tensor:
    """(H, W) or (B, H, W) numpy image planes -> (B, 1, H, W) tensor."""
    arr = np.asarray(planes, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(arr).unsqueeze(1)


@torch.no_grad()
def ema_update(teacher: WNet, student: WNet, lam: float) -> WNet:
    """teacher <- lam * teacher + (1 - lam) * student, parameter-wise."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {lam}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter structures differ")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise ValueError(f"shape mismatch at {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}")
        tp.mul_(lam).add_(sp, alpha=1.0 - lam)
    teacher.iteration += 1
    return teacher


@torch.no_grad()
def pseudo_label(teacher: WNet, image: np.ndarray) -> np.ndarray:
    """Teacher argmax as an integer plane; ties go to the lowest class."""
    teacher.eval()
    out = teacher(to_tensor(image))
    probs = out.probabilities[0].numpy()  # (L, H, W)
    return np.argmax(probs, axis=0).astype(np.int64)


@torch.no_grad()
def predict_sample(
    model: WNet, sample: ImageSample, eval_size: tuple[int, int]
) -> np.ndarray:
    """Foreground-probability map at the sample's native resolution.

    The image is grayscaled, bilinearly resized to eval_size for the
    forward pass, and the probabilities are resized back and
    renormalized per pixel.
    """
    model.eval()
    h, w = sample.shape
    plane = to_grayscale(sample, PreprocessConfig(train_size=eval_size)).pixels
    tw, th = eval_size
    if (h, w) != (th, tw):
        plane = _resize_pixels(plane, eval_size)
    out = model(to_tensor(plane))
    probs = out.probabilities[0].numpy()  # (L, th, tw)
    if (h, w) != (th, tw):
        chans = [_resize_pixels(probs[c], (w, h)) for c in range(probs.shape[0])]
        probs = np.stack(chans, axis=0)
        probs = np.clip(probs, 0.0, None)
        probs = probs / np.maximum(probs.sum(axis=0, keepdims=True), 1e-12)
    return probs[1]


def predict_dataset(
    model: WNet, samples: list[ImageSample], eval_size: tuple[int, int]
) -> list[np.ndarray]:
    return [predict_sample(model, s, eval_size) for s in samples]
