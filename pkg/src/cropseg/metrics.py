"""Confusion counts, mIoU, and boundary IoU for binary crop masks.

Ground truth may carry 255 as an ignore label; ignored pixels never enter
any count. Dataset-level numbers are pooled (counts summed before ratios),
not averaged per image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation

from .pseudolabel import BinaryMask
from .raster import Raster2D

IGNORE = 255


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel counts with foreground as the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int
    ignored: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            tn=self.tn + other.tn,
            ignored=self.ignored + other.ignored,
        )


@dataclass(frozen=True)
class EvalReport:
    """Dataset-level metric summary, all values in percent."""

    miou: float
    iou_fg: float
    iou_bg: float
    biou: float
    images: int
    biou_radius: int

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "iou_fg": self.iou_fg,
            "iou_bg": self.iou_bg,
            "biou": self.biou,
            "images": self.images,
            "biou_radius": self.biou_radius,
        }


def default_biou_radius(height: int, width: int) -> int:
    """2% of the image diagonal, at least one pixel."""
    return max(1, round(0.02 * float(np.hypot(height, width))))


def confusion(pred: BinaryMask, gt: Raster2D) -> ConfusionCounts:
    """Count tp/fp/fn/tn over non-ignored ground-truth pixels."""
    p = pred.raster.data
    g = gt.data
    if gt.kind != "byte8":
        raise ValueError("ground truth must be byte8")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    bad = np.setdiff1d(np.unique(g), (0, 1, IGNORE))
    if bad.size:
        raise ValueError(f"ground-truth values must be 0/1/255, got {bad}")
    valid = g != IGNORE
    pv = p[valid].astype(bool)
    gv = g[valid].astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(pv & gv)),
        fp=int(np.sum(pv & ~gv)),
        fn=int(np.sum(~pv & gv)),
        tn=int(np.sum(~pv & ~gv)),
        ignored=int(np.sum(~valid)),
    )


def _class_iou(inter: int, union: int) -> float:
    # a class absent from both pred and gt contributes IoU 1 by convention
    return inter / union if union > 0 else 1.0


def miou(c: ConfusionCounts) -> float:
    """Mean of foreground and background IoU, in percent."""
    if c.tp + c.fp + c.fn + c.tn == 0:
        raise ValueError("no non-ignored pixels to evaluate")
    iou_fg = _class_iou(c.tp, c.tp + c.fp + c.fn)
    iou_bg = _class_iou(c.tn, c.tn + c.fn + c.fp)
    return 100.0 * 0.5 * (iou_fg + iou_bg)


def boundary_region(m: BinaryMask, radius: int) -> BinaryMask:
    """Pixels within Chebyshev distance `radius` of a label boundary.

    A boundary pixel is one whose 4-neighborhood contains both labels;
    beyond the image frame everything counts as background, so foreground
    touching the frame is boundary.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    a = m.raster.data.astype(bool)
    padded = np.pad(a, 1, mode="constant", constant_values=False)
    center = padded[1:-1, 1:-1]
    differs = np.zeros_like(a)
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        shifted = padded[1 + di : padded.shape[0] - 1 + di, 1 + dj : padded.shape[1] - 1 + dj]
        differs |= shifted != center
    band = binary_dilation(differs, structure=np.ones((3, 3), dtype=bool), iterations=radius)
    return BinaryMask.from_bool(band)


def biou(pred: BinaryMask, gt: BinaryMask, radius: int) -> float:
    """IoU of the masks restricted to their boundary bands, in percent."""
    p = pred.raster.data.astype(bool)
    g = gt.raster.data.astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    inter, union = _biou_counts(pred, gt, radius)
    return 100.0 * inter / union if union > 0 else 100.0


def _biou_counts(pred: BinaryMask, gt: BinaryMask, radius: int) -> tuple[int, int]:
    p = pred.raster.data.astype(bool)
    g = gt.raster.data.astype(bool)
    pb = p & boundary_region(pred, radius).raster.data.astype(bool)
    gb = g & boundary_region(gt, radius).raster.data.astype(bool)
    return int(np.sum(pb & gb)), int(np.sum(pb | gb))


def aggregate(
    pairs: list[tuple[BinaryMask, Raster2D]], radius: int | None = None
) -> EvalReport:
    """Pool confusion and boundary counts over a dataset and report.

    The ignore label only applies to the plain IoU terms; boundary IoU is
    computed on the binary masks with 255 treated as background.
    """
    if not pairs:
        raise ValueError("nothing to aggregate")
    total = ConfusionCounts(0, 0, 0, 0, 0)
    inter_sum = 0
    union_sum = 0
    used_radius = radius
    for pred, gt in pairs:
        if used_radius is None:
            used_radius = default_biou_radius(*gt.data.shape)
        total = total + confusion(pred, gt)
        gt_mask = BinaryMask.from_bool(gt.data == 1)
        i, u = _biou_counts(pred, gt_mask, used_radius)
        inter_sum += i
        union_sum += u
    iou_fg = _class_iou(total.tp, total.tp + total.fp + total.fn)
    iou_bg = _class_iou(total.tn, total.tn + total.fn + total.fp)
    return EvalReport(
        miou=100.0 * 0.5 * (iou_fg + iou_bg),
        iou_fg=100.0 * iou_fg,
        iou_bg=100.0 * iou_bg,
        biou=100.0 * inter_sum / union_sum if union_sum > 0 else 100.0,
        images=len(pairs),
        biou_radius=int(used_radius),
    )
