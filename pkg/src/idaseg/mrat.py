"""Cross-domain mixing: square-mask and class-mask composition.

Builds intermediate images that carry a patch of one domain pasted into
the other, together with the matching synthetic labels. Two mask kinds:
a plain square ("cutmix") and the square intersected with a guiding
label's foreground ("classmix"). A translation strategy names which
directions get built and which mask kind each direction uses.

Arrays are numpy planes of shape (H, W); boxes are (x0, y0, m, m) with
x0 the column offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import QuadBatch

FOREGROUND = 1

CUTMIX = "cutmix"
CLASSMIX = "classmix"

# direction -> (mask kind) per named translation strategy; the t2s
# stream, when present, is always drawn first so placements replay
# deterministically from a seeded generator.
STRATEGY_STREAMS: dict[str, tuple[tuple[str, str], ...]] = {
    "s2t_cut": (("s2t", "cut"),),
    "t2s_cut": (("t2s", "cut"),),
    "s2t_class": (("s2t", "class"),),
    "t2s_class": (("t2s", "class"),),
    "bi_cut": (("t2s", "cut"), ("s2t", "cut")),
    "bi_class": (("t2s", "class"), ("s2t", "class")),
    # asymmetric pairs: name reads s2t-kind then t2s-kind
    "bat_cut_class": (("t2s", "class"), ("s2t", "cut")),
    "bat_class_cut": (("t2s", "cut"), ("s2t", "class")),
}


@dataclass
class MixMask:
    plane: np.ndarray  # (H, W), values in {0, 1}
    kind: str  # "cutmix" | "classmix"
    patch_box: tuple[int, int, int, int]  # (x0, y0, m, m)
    source_of_ones: str  # "sp" | "tp": which quad slot fills the ones

    def __post_init__(self):
        if self.kind not in (CUTMIX, CLASSMIX):
            raise ValueError(f"bad mask kind {self.kind!r}")
        if self.source_of_ones not in ("sp", "tp"):
            raise ValueError(f"bad source_of_ones {self.source_of_ones!r}")


@dataclass
class IntermediatePair:
    """Mixed images and synthetic labels for up to two directions.

    Unidirectional strategies leave the unused direction's fields None.
    """

    x_t2s: np.ndarray | None
    y_t2s: np.ndarray | None
    x_s2t: np.ndarray | None
    y_s2t: np.ndarray | None
    mask_t2s: MixMask | None
    mask_s2t: MixMask | None

    @property
    def masks(self) -> tuple[MixMask | None, MixMask | None]:
        return (self.mask_t2s, self.mask_s2t)


def make_cutmix_mask(
    w: int, h: int, m: int, rng: np.random.Generator, source_of_ones: str = "tp"
) -> MixMask:
    """One m-by-m square of ones placed uniformly, fully inside bounds."""
    if not 0 < m < min(w, h):
        raise ValueError(f"mini-patch size m={m} must satisfy 0 < m < min(W={w}, H={h})")
    x0 = int(rng.integers(0, w - m + 1))
    y0 = int(rng.integers(0, h - m + 1))
    plane = np.zeros((h, w), dtype=np.int64)
    plane[y0:y0 + m, x0:x0 + m] = 1
    return MixMask(plane=plane, kind=CUTMIX, patch_box=(x0, y0, m, m), source_of_ones=source_of_ones)


def make_classmix_mask(m_r: MixMask, guide_label: np.ndarray, foreground: int = FOREGROUND) -> MixMask:
    """Square mask intersected with the guiding label's foreground."""
    if m_r.kind != CUTMIX:
        raise ValueError("class mask must be derived from a cutmix mask")
    if guide_label.shape != m_r.plane.shape:
        raise ValueError(f"label shape {guide_label.shape} != mask shape {m_r.plane.shape}")
    plane = m_r.plane * (guide_label == foreground).astype(np.int64)
    return MixMask(plane=plane, kind=CLASSMIX, patch_box=m_r.patch_box,
                   source_of_ones=m_r.source_of_ones)


def compose_image(base: np.ndarray, patch: np.ndarray, mask: MixMask) -> np.ndarray:
    """patch where the mask is one, base elsewhere."""
    if base.shape != patch.shape or base.shape != mask.plane.shape:
        raise ValueError(
            f"shape mismatch: base {base.shape}, patch {patch.shape}, mask {mask.plane.shape}"
        )
    m = mask.plane.astype(base.dtype)
    return patch * m + base * (1 - m)


def compose_label(base_label: np.ndarray, patch_label: np.ndarray, mask: MixMask) -> np.ndarray:
    """Integer-plane selection with the same semantics as compose_image."""
    if base_label.shape != patch_label.shape or base_label.shape != mask.plane.shape:
        raise ValueError(
            f"shape mismatch: base {base_label.shape}, patch {patch_label.shape}, "
            f"mask {mask.plane.shape}"
        )
    return np.where(mask.plane == 1, patch_label, base_label).astype(np.int64)


def supervised_region(direction: str, mask: MixMask) -> np.ndarray:
    """Pixels whose synthetic label came from source ground truth.

    t2s mixes a target patch into a source image, so its supervised
    region is the mask complement; s2t pastes source content, so the
    mask itself.
    """
    if direction == "t2s":
        return 1 - mask.plane
    if direction == "s2t":
        return mask.plane.copy()
    raise ValueError(f"bad direction {direction!r}")


def consistency_region(direction: str, mask: MixMask) -> np.ndarray:
    """Complement of the supervised region: pixels carrying target
    content, matched against the teacher's view of the underlying
    target image."""
    return 1 - supervised_region(direction, mask)


def make_intermediate_batch(
    q: QuadBatch,
    pseudo_tr: np.ndarray,
    pseudo_tp: np.ndarray,
    m: int,
    strategy: str,
    rng: np.random.Generator,
) -> IntermediatePair:
    """Build the strategy's intermediate images from one quad draw.

    t2s pastes the target patch (with its pseudo-label) into the resized
    source image; s2t pastes the source patch (with its ground truth)
    into the resized target image. Class masks take their foreground
    from the pasted patch's label. Square placements are drawn
    independently per direction, t2s first.
    """
    try:
        streams = STRATEGY_STREAMS[strategy]
    except KeyError:
        raise ValueError(
            f"unknown translation strategy {strategy!r}; known: {sorted(STRATEGY_STREAMS)}"
        ) from None
    if q.sp.label is None:
        raise ValueError("source patch must carry a ground-truth label")
    if q.sr.label is None:
        raise ValueError("resized source image must carry a ground-truth label")
    if pseudo_tr.shape != q.tr.pixels.shape[:2] or pseudo_tp.shape != q.tp.pixels.shape[:2]:
        raise ValueError("pseudo-label shapes must match their target images")

    fields = dict(x_t2s=None, y_t2s=None, x_s2t=None, y_s2t=None,
                  mask_t2s=None, mask_s2t=None)
    for direction, kind in streams:
        if direction == "t2s":
            base_img, patch_img = q.sr.pixels, q.tp.pixels
            base_lab, patch_lab = q.sr.label, pseudo_tp
            source_of_ones = "tp"
        else:
            base_img, patch_img = q.tr.pixels, q.sp.pixels
            base_lab, patch_lab = pseudo_tr, q.sp.label
            source_of_ones = "sp"
        h, w = base_img.shape[:2]
        mask = make_cutmix_mask(w, h, m, rng, source_of_ones=source_of_ones)
        if kind == "class":
            mask = make_classmix_mask(mask, patch_lab)
        fields[f"x_{direction}"] = compose_image(base_img, patch_img, mask)
        fields[f"y_{direction}"] = compose_label(base_lab, patch_lab, mask)
        fields[f"mask_{direction}"] = mask
    return IntermediatePair(**fields)
