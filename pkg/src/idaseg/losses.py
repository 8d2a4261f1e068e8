"""Region-masked training losses and their weighted combination.

Every supervised and consistency term is restricted to a binary region
plane before reduction, so each pixel of a mixed image is claimed by
exactly one loss family: the region holding ground-truth content gets
cross-entropy plus Dice, its complement gets the teacher-consistency
penalty. Masked reductions are means, keeping magnitudes independent
of the mixing square's size; an empty region contributes exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import NumericError

PROB_FLOOR = 1e-7
DICE_SMOOTH = 1.0


@dataclass
class LossWeights:
    beta1: float = 1.0  # t2s contrastive term
    beta2: float = 1.0  # s2t contrastive term
    gamma: float = 1.0  # consistency term

    def __post_init__(self):
        for name in ("beta1", "beta2", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    """One step's loss terms; tensors during training, floats after
    ``detached()``."""

    cls: torch.Tensor | float
    dice: torch.Tensor | float
    idcl_t2s: torch.Tensor | float
    idcl_s2t: torch.Tensor | float
    con: torch.Tensor | float
    total: torch.Tensor | float

    def detached(self) -> "LossReport":
        def to_float(v):
            return float(v.detach().item()) if torch.is_tensor(v) else float(v)

        return LossReport(*[to_float(getattr(self, f)) for f in
                            ("cls", "dice", "idcl_t2s", "idcl_s2t", "con", "total")])


def _as_batched(probs: torch.Tensor) -> torch.Tensor:
    if probs.ndim == 3:
        return probs.unsqueeze(0)
    if probs.ndim == 4:
        return probs
    raise ValueError(f"expected (L, H, W) or (B, L, H, W) probabilities, got {tuple(probs.shape)}")


def _plane_batch(plane, batch: int, spatial: tuple[int, int], dtype=torch.float64) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(plane)).to(dtype)
    if t.ndim == 2:
        t = t.unsqueeze(0).expand(batch, -1, -1)
    if t.shape != (batch, *spatial):
        raise ValueError(f"plane shape {tuple(t.shape)} != expected {(batch, *spatial)}")
    return t


def masked_cross_entropy(probs: torch.Tensor, target, region) -> torch.Tensor:
    """Mean of -log p[target] over region pixels; 0 on an empty region.

    Probabilities are floored at 1e-7 before the log.
    """
    p = _as_batched(probs)
    b, _, h, w = p.shape
    t = _plane_batch(target, b, (h, w), dtype=torch.long)
    r = _plane_batch(region, b, (h, w))
    n = r.sum()
    if n.item() == 0:
        return torch.zeros((), dtype=p.dtype)
    picked = p.clamp_min(PROB_FLOOR).gather(1, t.unsqueeze(1)).squeeze(1)
    return (-torch.log(picked) * r).sum() / n


def masked_dice(probs: torch.Tensor, target, region, foreground: int = 1) -> torch.Tensor:
    """Smoothed Dice loss on the foreground channel over region pixels;
    0 on an empty region."""
    p = _as_batched(probs)
    b, _, h, w = p.shape
    t = _plane_batch(target, b, (h, w), dtype=torch.long)
    r = _plane_batch(region, b, (h, w))
    if r.sum().item() == 0:
        return torch.zeros((), dtype=p.dtype)
    p_fg = p[:, foreground]
    t_fg = (t == foreground).to(p.dtype)
    inter = (p_fg * t_fg * r).sum()
    denom = (p_fg * r).sum() + (t_fg * r).sum()
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)


def masked_consistency(p_student: torch.Tensor, p_teacher: torch.Tensor, region) -> torch.Tensor:
    """Mean squared difference over region pixels and channels; the
    teacher map is a constant. 0 on an empty region."""
    ps = _as_batched(p_student)
    pt = _as_batched(p_teacher).detach()
    if ps.shape != pt.shape:
        raise ValueError(f"student {tuple(ps.shape)} vs teacher {tuple(pt.shape)} shape mismatch")
    b, l, h, w = ps.shape
    r = _plane_batch(region, b, (h, w))
    n = r.sum()
    if n.item() == 0:
        return torch.zeros((), dtype=ps.dtype)
    sq = ((ps - pt) ** 2 * r.unsqueeze(1)).sum()
    return sq / (n * l)


def total_loss(
    cls, dice, idcl_t2s, idcl_s2t, con, w: LossWeights
) -> LossReport:
    """Weighted sum of the five terms; exact linearity in each weight."""
    parts = dict(cls=cls, dice=dice, idcl_t2s=idcl_t2s, idcl_s2t=idcl_s2t, con=con)
    for name, v in parts.items():
        val = float(v.detach().item()) if torch.is_tensor(v) else float(v)
        if not np.isfinite(val):
            raise NumericError(f"non-finite loss term {name}: {val}")
    total = cls + dice + w.beta1 * idcl_t2s + w.beta2 * idcl_s2t + w.gamma * con
    return LossReport(cls=cls, dice=dice, idcl_t2s=idcl_t2s, idcl_s2t=idcl_s2t,
                      con=con, total=total)
