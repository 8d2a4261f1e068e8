"""Pixel and topology evaluation metrics plus report emission.

Pixel level: AUC (rank-based), accuracy, sensitivity, specificity, and
Dice at a 0.5 threshold. Topology level: centerline Dice computed from
morphological-thinning skeletons, and a patch-wise Betti-number
discrepancy (connected components and loops per 64x64 tile, averaged
over tiles) standing in for full persistent-homology matching.

Ratios with an empty denominator are reported as nan and skipped by the
aggregation; AUC needs both classes present in the ground truth.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata
from skimage.morphology import thin

METRIC_COLUMNS = ("auc", "acc", "se", "sp", "dice", "cl_dice", "bm")

BETTI_PATCH = 64

_EIGHT = np.ones((3, 3), dtype=np.int64)


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class EvalReport:
    ids: list[str]
    per_image: list[dict[str, float]]
    mean: dict[str, float]
    std: dict[str, float]


def _binarize(plane: np.ndarray) -> np.ndarray:
    plane = np.asarray(plane)
    if plane.dtype.kind == "f":
        return plane > 0.5
    return plane > 0


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Exact counts; float inputs are thresholded at 0.5."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p, g = _binarize(pred), _binarize(gt)
    return ConfusionCounts(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        tn=int(np.sum(~p & ~g)),
        fn=int(np.sum(~p & g)),
    )


def _ratio(num: int, den: int) -> float:
    return num / den if den else math.nan


def accuracy(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total)


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap Dice; two empty masks agree perfectly (1.0)."""
    c = confusion(pred, gt)
    if c.tp + c.fp + c.fn == 0:
        return 1.0
    return 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn)


def auc(probs: np.ndarray, gt: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUC with midrank tie handling; nan when
    the ground truth holds a single class."""
    if probs.shape != gt.shape:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs gt {gt.shape}")
    g = _binarize(gt).ravel()
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(np.asarray(probs, dtype=np.float64).ravel())
    r_pos = ranks[g].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def cl_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Centerline Dice: harmonic mean of skeleton-in-mask precision and
    sensitivity, skeletons by iterative morphological thinning."""
    p, g = _binarize(pred), _binarize(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    skel_p, skel_g = thin(p), thin(g)

    def term(skel: np.ndarray, mask: np.ndarray) -> float:
        n_skel = int(skel.sum())
        if n_skel == 0:
            return 1.0 if int(mask.sum()) == 0 else 0.0
        return int((skel & mask).sum()) / n_skel

    tprec = term(skel_p, g)
    tsens = term(skel_g, p)
    if tprec + tsens == 0.0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


def euler_number(mask: np.ndarray) -> int:
    """Euler characteristic of a binary image under 8-connected
    foreground, via 2x2 bit-quad counts."""
    m = _binarize(mask).astype(np.int64)
    m = np.pad(m, 1)
    a = m[:-1, :-1]
    b = m[:-1, 1:]
    c = m[1:, :-1]
    d = m[1:, 1:]
    s = a + b + c + d
    q1 = int(np.sum(s == 1))
    q3 = int(np.sum(s == 3))
    qd = int(np.sum((s == 2) & (a == d)))  # the two diagonal pairs
    quarter = q1 - q3 - 2 * qd
    assert quarter % 4 == 0
    return quarter // 4


def betti_numbers(mask: np.ndarray) -> tuple[int, int]:
    """(components, loops) of a binary patch: components by 8-connected
    labeling, loops from beta1 = beta0 - euler."""
    m = _binarize(mask)
    _, b0 = ndimage.label(m, structure=_EIGHT)
    b1 = b0 - euler_number(m)
    return int(b0), int(b1)


def betti_matching_error(pred: np.ndarray, gt: np.ndarray, patch: int = BETTI_PATCH) -> float:
    """Mean per-tile |delta beta0| + |delta beta1| over a fixed tiling
    (edge tiles may be smaller than ``patch``)."""
    p, g = _binarize(pred), _binarize(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if patch < 1:
        raise ValueError(f"patch must be >= 1, got {patch}")
    h, w = p.shape
    total = 0
    n_patches = 0
    for y in range(0, h, patch):
        for x in range(0, w, patch):
            tp0, tp1 = betti_numbers(p[y:y + patch, x:x + patch])
            tg0, tg1 = betti_numbers(g[y:y + patch, x:x + patch])
            total += abs(tp0 - tg0) + abs(tp1 - tg1)
            n_patches += 1
    return total / n_patches


def image_metrics(probs: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """All seven metrics for one foreground-probability map."""
    pred = probs > 0.5
    c = confusion(pred, gt)
    return {
        "auc": auc(probs, gt),
        "acc": accuracy(c),
        "se": sensitivity(c),
        "sp": specificity(c),
        "dice": dice(pred, gt),
        "cl_dice": cl_dice(pred, gt),
        "bm": betti_matching_error(pred, gt),
    }


def aggregate(ids: list[str], rows: list[dict[str, float]]) -> EvalReport:
    mean, std = {}, {}
    for col in METRIC_COLUMNS:
        vals = np.array([r[col] for r in rows], dtype=np.float64)
        finite = vals[np.isfinite(vals)]
        mean[col] = float(finite.mean()) if finite.size else math.nan
        std[col] = float(finite.std()) if finite.size else math.nan
    return EvalReport(ids=list(ids), per_image=rows, mean=mean, std=std)


def evaluate_dataset(model, samples, eval_size: tuple[int, int]) -> EvalReport:
    """Per-image metrics for every labeled sample, plus mean and std."""
    from .models import predict_sample  # deferred: metrics stays torch-free otherwise

    labeled = [s for s in samples if s.label is not None]
    if not labeled:
        raise ValueError("evaluate_dataset needs at least one labeled sample")
    ids, rows = [], []
    for s in labeled:
        probs = predict_sample(model, s, eval_size)
        ids.append(s.id)
        rows.append(image_metrics(probs, s.label))
    return aggregate(ids, rows)


def write_metrics_csv(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("image",) + METRIC_COLUMNS)
        for id_, row in zip(report.ids, report.per_image):
            writer.writerow([id_] + [f"{row[c]:.6f}" for c in METRIC_COLUMNS])
    return path


def _json_safe(value: float) -> float | None:
    return None if not math.isfinite(value) else value


def write_summary_json(report: EvalReport, path: str | Path, extra: dict | None = None) -> Path:
    """Mean and std per metric as strict JSON (undefined values -> null)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "n_images": len(report.per_image),
        "metrics": {
            col: {"mean": _json_safe(report.mean[col]), "std": _json_safe(report.std[col])}
            for col in METRIC_COLUMNS
        },
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
