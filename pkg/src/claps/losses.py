"""Training objective: detection, segmentation, contrastive alignment and the
modality-reweighted total.

All differentiable terms take and return :class:`~claps.tensor.Tensor`
objects so they can sit on a :class:`~claps.tensor.GradTape`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .boxes import GIOU_SUBWEIGHT, L1_SUBWEIGHT
from .tensor import Tensor

DICE_EPS = 1e-6
BCE_CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_bbox: float = 1.0
    lambda_dice: float = 1.0
    lambda_bce: float = 1.0
    lambda_clip: float = 1.0
    tau: float = 0.07
    omega: dict[str, float] = field(default_factory=dict)
    l1_subweight: float = L1_SUBWEIGHT
    giou_subweight: float = GIOU_SUBWEIGHT
    symmetric_contrastive: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in ("lambda_cls", "lambda_bbox", "lambda_dice", "lambda_bce", "lambda_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        for m, w in self.omega.items():
            if not w > 0:
                raise ValueError(f"modality weight for {m!r} must be positive, got {w}")

    def weight_for(self, modality: str) -> float:
        return float(self.omega.get(modality, 1.0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossWeights":
        return cls(**dict(d))


@dataclass
class LossBreakdown:
    cls: float
    bbox_l1: float
    bbox_giou: float
    dice: float
    bce: float
    contrastive: float
    total: float
    modality: str
    omega: float = 1.0

    def recombine(self, w: LossWeights) -> float:
        det = w.lambda_cls * self.cls + w.lambda_bbox * (
            w.l1_subweight * self.bbox_l1 + w.giou_subweight * self.bbox_giou)
        seg = w.lambda_dice * self.dice + w.lambda_bce * self.bce
        return self.omega * (w.lambda_clip * self.contrastive + det + seg)

    def as_row(self) -> list:
        return [self.modality, self.cls, self.bbox_l1, self.bbox_giou, self.dice, self.bce,
                self.contrastive, self.total]


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

def l1_box_loss(pred, gt) -> Tensor:
    """Mean absolute coordinate difference of normalized boxes (..., 4)."""
    return T.tabs(T.sub(pred, gt)).mean()


def _iou_parts(a: Tensor, b: Tensor):
    ax0, ay0, ax1, ay1 = (a[..., i] for i in range(4))
    bx0, by0, bx1, by1 = (b[..., i] for i in range(4))
    area_a = T.relu(ax1 - ax0) * T.relu(ay1 - ay0)
    area_b = T.relu(bx1 - bx0) * T.relu(by1 - by0)
    iw = T.relu(T.minimum(ax1, bx1) - T.maximum(ax0, bx0))
    ih = T.relu(T.minimum(ay1, by1) - T.maximum(ay0, by0))
    inter = iw * ih
    union = area_a + area_b - inter
    c_area = (T.maximum(ax1, bx1) - T.minimum(ax0, bx0)) * (T.maximum(ay1, by1) - T.minimum(ay0, by0))
    return inter, union, c_area


def iou_tensor(a, b) -> Tensor:
    """Differentiable IoU of box tensors (..., 4) with positive union; broadcasts."""
    inter, union, _ = _iou_parts(T.as_tensor(a), T.as_tensor(b))
    return inter / union


def giou_tensor(a, b) -> Tensor:
    """Differentiable GIoU of box tensors (..., 4) with positive enclosing area."""
    inter, union, c_area = _iou_parts(T.as_tensor(a), T.as_tensor(b))
    return inter / union - (c_area - union) / c_area


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy computed from logits."""
    logits = T.as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    # -[y log s(z) + (1-y) log s(-z)]
    return -(T.log_sigmoid(logits) * y + T.log_sigmoid(-logits) * (1.0 - y)).mean()


def detection_loss(pred_boxes, conf_logits, gt_boxes: np.ndarray,
                   assignment: Sequence[tuple[int, int]], w: LossWeights):
    """Detection term for one image.

    ``pred_boxes`` (Q, 4) and ``gt_boxes`` (M, 4) are normalized corners,
    ``conf_logits`` (Q,) are phrase-alignment logits.  Matched queries are
    labeled 1 and every other query 0; box terms average over matches.

    Returns ``(loss, cls, l1, giou_loss)`` with the last three as Tensors.
    """
    pred_boxes, conf_logits = T.as_tensor(pred_boxes), T.as_tensor(conf_logits)
    n_q = conf_logits.shape[0]
    zero = Tensor(0.0)
    labels = np.zeros(n_q)
    for qi, _ in assignment:
        labels[qi] = 1.0
    cls = bce_with_logits(conf_logits, labels) if n_q else zero
    if assignment:
        qi = np.array([a for a, _ in assignment])
        gi = np.array([b for _, b in assignment])
        pb = pred_boxes[qi]
        gb = Tensor(np.asarray(gt_boxes, float).reshape(-1, 4)[gi])
        l1 = l1_box_loss(pb, gb)
        gl = (1.0 - giou_tensor(pb, gb)).mean()
    else:
        l1, gl = zero, zero
    loss = w.lambda_cls * cls + w.lambda_bbox * (w.l1_subweight * l1 + w.giou_subweight * gl)
    return loss, cls, l1, gl


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

def dice_loss(pred, gt) -> Tensor:
    pred = T.as_tensor(pred)
    g = np.asarray(gt, dtype=np.float64)
    if pred.shape != g.shape:
        raise ValueError(f"dice_loss shape mismatch {pred.shape} vs {g.shape}")
    inter = (pred * g).sum()
    return 1.0 - (2.0 * inter + DICE_EPS) / (pred.sum() + float(g.sum()) + DICE_EPS)


def bce_loss(pred, gt) -> Tensor:
    pred = T.clip(T.as_tensor(pred), BCE_CLAMP, 1.0 - BCE_CLAMP)
    g = np.asarray(gt, dtype=np.float64)
    if pred.shape != g.shape:
        raise ValueError(f"bce_loss shape mismatch {pred.shape} vs {g.shape}")
    return -(T.log(pred) * g + T.log(1.0 - pred) * (1.0 - g)).mean()


# ---------------------------------------------------------------------------
# contrastive alignment
# ---------------------------------------------------------------------------

def cosine_sim(a, b) -> float:
    a = np.asarray(a, float).reshape(-1)
    b = np.asarray(b, float).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine_sim is undefined for a zero vector")
    return float(a @ b / (na * nb))


def _row_normalize(x: Tensor) -> Tensor:
    norms = np.linalg.norm(x.data, axis=-1)
    if np.any(norms == 0):
        bad = int(np.argmin(norms))
        raise ValueError(f"zero vector at batch row {bad}; cosine similarity undefined")
    return x / T.sqrt((x * x).sum(axis=-1, keepdims=True))


def _log_softmax_rows(z: Tensor) -> Tensor:
    m = z.data.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - T.log(T.exp(shifted).sum(axis=-1, keepdims=True))


def clip_contrastive(image_vecs, text_vecs, tau: float, symmetric: bool = False) -> Tensor:
    """Image-to-text InfoNCE over cosine similarities.

    Row i's positive is text i; the other texts in the batch are negatives.
    ``symmetric`` averages in the text-to-image direction.
    """
    img = _row_normalize(T.as_tensor(image_vecs))
    txt = _row_normalize(T.as_tensor(text_vecs))
    n = img.shape[0]
    logits = (img @ T.transpose(txt)) * (1.0 / tau)
    idx = (np.arange(n), np.arange(n))
    loss = -_log_softmax_rows(logits)[idx].mean()
    if symmetric:
        loss = 0.5 * (loss - _log_softmax_rows(T.transpose(logits))[idx].mean())
    return loss


def pool_fused(fused) -> Tensor:
    """Global spatial mean: (N, C, H, W) -> (N, C)."""
    return T.as_tensor(fused).mean(axis=(2, 3))


# ---------------------------------------------------------------------------
# modality reweighting and the total
# ---------------------------------------------------------------------------

def modality_weights(frequencies: Mapping[str, int]) -> dict[str, float]:
    """Inverse-frequency weights scaled so the sample-weighted mean is one."""
    if not frequencies:
        return {}
    for m, c in frequencies.items():
        if not c > 0:
            raise ValueError(f"modality {m!r} has non-positive count {c}")
    # with w_j = c / f_j the count-weighted mean is c * K / total
    total = float(sum(frequencies.values()))
    c = total / len(frequencies)
    return {m: c / float(f) for m, f in frequencies.items()}


def total_loss(modality: str, batch_modalities: Sequence[str], contrastive, det_parts,
               seg_parts, w: LossWeights):
    """Combine the per-batch parts into the weighted total.

    ``det_parts`` is ``(cls, l1, giou_loss)`` and ``seg_parts`` is
    ``(dice, bce)``, each a scalar Tensor or float.  Returns
    ``(total_tensor, LossBreakdown)``.
    """
    if any(m != modality for m in batch_modalities):
        raise ValueError(f"mixed-modality batch: {sorted(set(batch_modalities))}")
    cls, l1, gl = (T.as_tensor(v) for v in det_parts)
    dice, bce = (T.as_tensor(v) for v in seg_parts)
    contrastive = T.as_tensor(contrastive)
    omega = w.weight_for(modality)
    det = w.lambda_cls * cls + w.lambda_bbox * (w.l1_subweight * l1 + w.giou_subweight * gl)
    seg = w.lambda_dice * dice + w.lambda_bce * bce
    total = omega * (w.lambda_clip * contrastive + det + seg)
    bd = LossBreakdown(cls=cls.item(), bbox_l1=l1.item(), bbox_giou=gl.item(), dice=dice.item(),
                       bce=bce.item(), contrastive=contrastive.item(), total=total.item(),
                       modality=modality, omega=omega)
    if not math.isfinite(bd.total):
        raise FloatingPointError(f"non-finite total loss ({bd})")
    return total, bd
