"""Class prototypes and the margin contrastive feature loss.

A prototype is a running class-mean feature vector. The bank starts
from source-image statistics and is nudged each step by batch means
computed on the mixed intermediate images, scaled by how confident the
student's predictions were on each half-batch. The contrastive loss
pulls pixel features toward their own-class prototype under an
additive angular margin and pushes them from the others.

Prototypes are constants inside the loss: gradients reach features
only. Bank vectors are raw (unnormalized) means; normalization happens
inside the cosine computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .config import NumericError
from .data import ImageSample, PreprocessConfig, resize_label, resize_whole, to_grayscale

# keeps sqrt(1 - x^2) differentiable at the clamp boundary
_COS_EPS = 1e-7


@dataclass
class ContrastConfig:
    delta: float = 0.1  # additive angle on the positive pair, radians
    tau: float = 1.0
    th_t2s: float = 0.9
    th_s2t: float = 0.7
    reduction: str = "mean"  # "mean" | "sum" over pixels

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.delta < math.pi / 2:
            raise ValueError(f"delta must be in [0, pi/2), got {self.delta}")
        for name in ("th_t2s", "th_s2t"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


@dataclass
class PrototypeBank:
    vectors: np.ndarray  # (L, D) float64, raw class means
    iteration: int = 0
    last_weights: tuple[float, float] = (0.0, 0.0)  # (w_t2s, w_s2t)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be (L, D), got shape {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise NumericError("non-finite prototype vectors")

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]


def init_prototypes(
    model,
    source: list[ImageSample],
    train_size: tuple[int, int],
    num_classes: int = 2,
) -> PrototypeBank:
    """Per-class mean of tap features over every source image.

    Labels are nearest-downsampled to the tap resolution. A class with
    no pixels anywhere falls back to the global feature mean.
    """
    from .models import to_tensor  # local import to avoid a cycle

    if not source:
        raise ValueError("init_prototypes needs at least one source sample")
    pre = PreprocessConfig(train_size=train_size)
    sums = None
    counts = np.zeros(num_classes, dtype=np.int64)
    total_sum = None
    total_count = 0
    model.eval()
    with torch.no_grad():
        for s in source:
            if s.label is None:
                raise ValueError(f"source sample {s.id} has no label")
            s = resize_whole(to_grayscale(s, pre), pre)
            out = model(to_tensor(s.pixels))
            feats = out.features[0].numpy()  # (D, h, w)
            d, fh, fw = feats.shape
            if sums is None:
                sums = np.zeros((num_classes, d), dtype=np.float64)
                total_sum = np.zeros(d, dtype=np.float64)
            lab = resize_label(s.label, (fw, fh))
            flat_f = feats.reshape(d, -1)
            flat_l = lab.reshape(-1)
            for r in range(num_classes):
                sel = flat_l == r
                n = int(sel.sum())
                if n:
                    sums[r] += flat_f[:, sel].sum(axis=1)
                    counts[r] += n
            total_sum += flat_f.sum(axis=1)
            total_count += flat_l.size
    global_mean = total_sum / total_count
    vectors = np.empty_like(sums)
    for r in range(num_classes):
        vectors[r] = sums[r] / counts[r] if counts[r] else global_mean
    return PrototypeBank(vectors=vectors)


def batch_class_prototype(
    features: torch.Tensor, labels_ds: torch.Tensor, r: int
) -> tuple[np.ndarray | None, int]:
    """Mean feature over pixels of class r across a half-batch.

    features: (B, D, h, w); labels_ds: (B, h, w) integer plane already at
    the tap resolution. Returns (vector, count); count 0 yields (None, 0).
    """
    if features.shape[0] != labels_ds.shape[0] or features.shape[-2:] != labels_ds.shape[-2:]:
        raise ValueError(
            f"features {tuple(features.shape)} and labels {tuple(labels_ds.shape)} misaligned"
        )
    with torch.no_grad():
        sel = labels_ds == r  # (B, h, w)
        count = int(sel.sum().item())
        if count == 0:
            return None, 0
        f = features.detach().permute(0, 2, 3, 1)  # (B, h, w, D)
        vec = f[sel].mean(dim=0)
    return vec.numpy().astype(np.float64), count


def confidence_weight(probs: torch.Tensor, th: float) -> float:
    """Fraction of pixels whose top-1 minus top-2 probability margin
    strictly exceeds th, over the whole half-batch."""
    if not 0.0 <= th <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {th}")
    with torch.no_grad():
        top2 = torch.topk(probs, k=2, dim=1).values  # (B, 2, H, W)
        margin = top2[:, 0] - top2[:, 1]
        return float((margin > th).double().mean().item())


def update_prototypes(
    bank: PrototypeBank,
    t2s_stats: list[tuple[np.ndarray | None, int]],
    s2t_stats: list[tuple[np.ndarray | None, int]],
    weights: tuple[float, float],
) -> PrototypeBank:
    """Two sequential convex steps per class: first toward the t2s batch
    mean with weight w_t2s, then toward the s2t batch mean with w_s2t.
    A direction that saw no pixels of a class skips that class's step."""
    w_t2s, w_s2t = weights
    for name, w in (("w_t2s", w_t2s), ("w_s2t", w_s2t)):
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {w}")
    L = bank.num_classes
    if len(t2s_stats) != L or len(s2t_stats) != L:
        raise ValueError("need one (vector, count) pair per class and direction")
    vectors = bank.vectors.copy()
    for r in range(L):
        vec_t2s, n_t2s = t2s_stats[r]
        vec_s2t, n_s2t = s2t_stats[r]
        c = vectors[r]
        if n_t2s > 0:
            c = (1.0 - w_t2s) * c + w_t2s * np.asarray(vec_t2s, dtype=np.float64)
        if n_s2t > 0:
            c = (1.0 - w_s2t) * c + w_s2t * np.asarray(vec_s2t, dtype=np.float64)
        vectors[r] = c
    return replace(bank, vectors=vectors, iteration=bank.iteration + 1,
                   last_weights=(float(w_t2s), float(w_s2t)))


def cosine_similarity(c: np.ndarray, f: np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1];
    zero-norm inputs get similarity 0 by convention."""
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    if c.shape != f.shape:
        raise ValueError(f"vector length mismatch: {c.shape} vs {f.shape}")
    if not (np.isfinite(c).all() and np.isfinite(f).all()):
        raise NumericError("non-finite input to cosine_similarity")
    nc, nf = np.linalg.norm(c), np.linalg.norm(f)
    if nc == 0.0 or nf == 0.0:
        return 0.0
    return float(np.clip(c @ f / (nc * nf), -1.0, 1.0))


def _margined_cosine(cos_pos: torch.Tensor, delta: float) -> torch.Tensor:
    """cos(theta + delta) from cos(theta), with theta + delta clamped to
    [0, pi]. Uses the angle-addition identity rather than arccos so the
    gradient stays finite at |cos| -> 1."""
    if delta == 0.0:
        return cos_pos
    cos_d, sin_d = math.cos(delta), math.sin(delta)
    x = cos_pos.clamp(-1.0 + _COS_EPS, 1.0 - _COS_EPS)
    shifted = x * cos_d - torch.sqrt(1.0 - x * x) * sin_d
    # theta + delta >= pi <=> cos(theta) <= -cos(delta)
    return torch.where(x <= -cos_d, torch.full_like(shifted, -1.0), shifted)


def prototype_similarities(features: torch.Tensor, bank: PrototypeBank) -> torch.Tensor:
    """(B, L, h, w) cosine similarities between pixel features and each
    prototype; zero-norm vectors on either side contribute 0."""
    protos = torch.from_numpy(bank.vectors)  # (L, D), constant
    f_norm = features.norm(dim=1, keepdim=True)  # (B, 1, h, w)
    f_unit = features / torch.where(f_norm == 0, torch.ones_like(f_norm), f_norm)
    p_norm = protos.norm(dim=1, keepdim=True)
    p_unit = protos / torch.where(p_norm == 0, torch.ones_like(p_norm), p_norm)
    sims = torch.einsum("bdhw,ld->blhw", f_unit, p_unit)
    return sims.clamp(-1.0, 1.0)


def contrastive_loss(
    features: torch.Tensor,
    labels_ds: torch.Tensor,
    bank: PrototypeBank,
    cfg: ContrastConfig,
) -> torch.Tensor:
    """Margin contrastive loss between pixel features and the bank.

    Per pixel with class y:
        -log exp(cos(theta_y + delta) / tau)
             / (exp(cos(theta_y + delta) / tau) + sum_{r != y} exp(cos(theta_r) / tau))
    reduced to a mean over pixels (or a raw sum under reduction="sum").
    """
    if features.ndim != 4 or labels_ds.ndim != 3:
        raise ValueError("expected features (B, D, h, w) and labels (B, h, w)")
    if features.shape[0] != labels_ds.shape[0] or features.shape[-2:] != labels_ds.shape[-2:]:
        raise ValueError("features and labels misaligned")
    if not torch.isfinite(features).all():
        raise NumericError("non-finite features in contrastive_loss")
    sims = prototype_similarities(features, bank)  # (B, L, h, w)
    labels = labels_ds.long().unsqueeze(1)  # (B, 1, h, w)
    cos_pos = sims.gather(1, labels).squeeze(1)  # (B, h, w)
    pos_term = _margined_cosine(cos_pos, cfg.delta) / cfg.tau

    # build the denominator's logit stack: margined own-class entry plus
    # the plain similarities of every other class
    logits = sims / cfg.tau  # (B, L, h, w)
    logits = logits.scatter(1, labels, pos_term.unsqueeze(1))
    per_pixel = torch.logsumexp(logits, dim=1) - pos_term
    if not torch.isfinite(per_pixel).all():
        raise NumericError("non-finite contrastive loss")
    if cfg.reduction == "sum":
        return per_pixel.sum()
    return per_pixel.mean()
