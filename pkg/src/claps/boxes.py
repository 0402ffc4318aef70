"""Box geometry, prompt expansion, ordering and prediction/ground-truth matching.

Coordinates are ``(x_min, y_min, x_max, y_max)`` with the origin at the top
left.  Pixel boxes are inclusive-min, exclusive-max, so a box's width is
``x_max - x_min``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

# DETR-family sub-weights inside the bbox term
L1_SUBWEIGHT = 5.0
GIOU_SUBWEIGHT = 2.0


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    normalized: bool = False

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"invalid box {self.as_tuple()}: min must not exceed max")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, other: "BoundingBox") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and self.x_max >= other.x_max and self.y_max >= other.y_max)

    def normalize(self, image_w: float, image_h: float) -> "BoundingBox":
        return BoundingBox(self.x_min / image_w, self.y_min / image_h,
                           self.x_max / image_w, self.y_max / image_h, normalized=True)

    def clamp(self, image_w: float, image_h: float) -> "BoundingBox":
        x0 = min(max(self.x_min, 0.0), image_w)
        y0 = min(max(self.y_min, 0.0), image_h)
        x1 = min(max(self.x_max, 0.0), image_w)
        y1 = min(max(self.y_max, 0.0), image_h)
        return BoundingBox(x0, y0, x1, y1, self.normalized)


@dataclass(frozen=True)
class ScoredBox:
    box: BoundingBox
    confidence: float
    phrase: str = ""

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def _area(b: np.ndarray) -> np.ndarray:
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of box arrays (..., 4); zero when the union is empty."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = _area(a) + _area(b) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def giou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise generalized IoU in [-1, 1].

    Degenerate pairs: an empty union gives IoU 0, and an empty enclosing box
    contributes no penalty.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    iou = iou_array(a, b)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    union = _area(a) + _area(b) - iw * ih
    cw = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    ch = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    c_area = cw * ch
    with np.errstate(invalid="ignore", divide="ignore"):
        penalty = np.where(c_area > 0, (c_area - union) / np.where(c_area > 0, c_area, 1.0), 0.0)
    return iou - penalty


def iou(a: BoundingBox, b: BoundingBox) -> float:
    return float(iou_array(a.as_array(), b.as_array()))


def giou(a: BoundingBox, b: BoundingBox) -> float:
    return float(giou_array(a.as_array(), b.as_array()))


def expand_box(b: BoundingBox, image_w: float, image_h: float, rng: np.random.Generator,
               min_pct: float = 0.05, max_pct: float = 0.10) -> BoundingBox:
    """Grow width and height by independent random fractions about the center.

    The result is clamped to the image; a box larger than the image comes
    back as the full frame.
    """
    if min_pct > max_pct:
        raise ValueError(f"min_pct {min_pct} exceeds max_pct {max_pct}")
    fw = rng.uniform(min_pct, max_pct) if max_pct > min_pct else min_pct
    fh = rng.uniform(min_pct, max_pct) if max_pct > min_pct else min_pct
    cx = 0.5 * (b.x_min + b.x_max)
    cy = 0.5 * (b.y_min + b.y_max)
    hw = 0.5 * b.width * (1.0 + fw)
    hh = 0.5 * b.height * (1.0 + fh)
    return BoundingBox(cx - hw, cy - hh, cx + hw, cy + hh, b.normalized).clamp(image_w, image_h)


def filter_and_order(preds: Sequence[ScoredBox], conf_threshold: float) -> list[ScoredBox]:
    """Keep boxes at or above the threshold, highest confidence first.

    Python's sort is stable, so equal confidences keep their input order.
    """
    kept = [p for p in preds if p.confidence >= conf_threshold]
    return sorted(kept, key=lambda p: -p.confidence)


def match_cost(pred_boxes: np.ndarray, pred_conf: np.ndarray, gt_boxes: np.ndarray,
               lambda_cls: float = 1.0, lambda_bbox: float = 1.0) -> np.ndarray:
    """Pairwise matching cost, shape (n_pred, n_gt), on normalized boxes."""
    pb = np.asarray(pred_boxes, float).reshape(-1, 4)
    gb = np.asarray(gt_boxes, float).reshape(-1, 4)
    conf = np.asarray(pred_conf, float).reshape(-1)
    l1 = np.abs(pb[:, None, :] - gb[None, :, :]).mean(axis=-1)
    g = giou_array(pb[:, None, :], gb[None, :, :])
    box_cost = L1_SUBWEIGHT * l1 + GIOU_SUBWEIGHT * (1.0 - g)
    return lambda_cls * (1.0 - conf)[:, None] + lambda_bbox * box_cost


def assign(cost: np.ndarray) -> list[tuple[int, int]]:
    """Optimal one-to-one assignment as (pred, gt) pairs sorted by gt index."""
    cost = np.asarray(cost, float)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: rc[1])


def match(preds: Sequence[ScoredBox], gts: Sequence[BoundingBox], lambda_cls: float = 1.0,
          lambda_bbox: float = 1.0, image_size: tuple[float, float] | None = None
          ) -> list[tuple[int, int]]:
    """Minimum-cost pairing of scored predictions with ground-truth boxes.

    ``image_size`` (w, h) normalizes pixel boxes before costing.
    """
    if not preds or not gts:
        return []
    sw, sh = image_size or (1.0, 1.0)
    scale = np.array([sw, sh, sw, sh], float)
    pb = np.stack([p.box.as_array() for p in preds]) / scale
    gb = np.stack([g.as_array() for g in gts]) / scale
    conf = np.array([p.confidence for p in preds])
    return assign(match_cost(pb, conf, gb, lambda_cls, lambda_bbox))
