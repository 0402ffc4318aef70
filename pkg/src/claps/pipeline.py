"""Inference: image + prompt + modality -> scored boxes -> expanded box
prompts -> per-box masks -> merged mask, and Dice evaluation."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .boxes import ScoredBox, expand_box, filter_and_order
from .config import stream
from .data import Sample
from .mask import MaskParams, predict_mask
from .model import ClapsModel, box_from_normalized

MASK_THRESHOLD = 0.5


@dataclass
class SegmentationResult:
    per_box: list[tuple[ScoredBox, np.ndarray]]  # (prompt box, thresholded mask)
    merged: np.ndarray
    dice: float | None = None
    probabilities: list[np.ndarray] = field(default_factory=list, repr=False)


def detect_candidates(model: ClapsModel, image: np.ndarray, prompt: str, modality: str
                      ) -> list[ScoredBox]:
    """All Q head outputs in original image coordinates, unfiltered."""
    model.registry.index(modality)
    det, clip, t = model.encode(image)
    boxes, logits, _, _ = model.forward(det[None], clip[None], [prompt], [modality])
    conf = T.sigmoid(logits).data[0]
    return [ScoredBox(box_from_normalized(b, t), float(c), prompt) for b, c in zip(boxes.data[0], conf)]


def detect(model: ClapsModel, image: np.ndarray, prompt: str, modality: str,
           conf_threshold: float | None = None) -> list[ScoredBox]:
    thr = model.cfg.conf_threshold if conf_threshold is None else conf_threshold
    return filter_and_order(detect_candidates(model, image, prompt, modality), thr)


def segment(image: np.ndarray, boxes: Sequence[ScoredBox], predictor: MaskParams,
            rng: np.random.Generator, expansion=(0.05, 0.10), crop_size: int = 24,
            crop_margin: float = 0.25) -> SegmentationResult:
    """Expand each box, predict its mask, threshold at 0.5 and take the union."""
    img = np.asarray(image, float)
    if img.ndim == 3:
        img = img[..., :3].mean(axis=-1)
    h, w = img.shape
    merged = np.zeros((h, w), dtype=bool)
    per_box, probs = [], []
    for sb in boxes:
        prompt_box = expand_box(sb.box, w, h, rng, *expansion)
        p = predict_mask(img, prompt_box, predictor, crop_size, crop_margin)
        m = p >= MASK_THRESHOLD
        per_box.append((ScoredBox(prompt_box, sb.confidence, sb.phrase), m))
        probs.append(p)
        merged |= m
    return SegmentationResult(per_box=per_box, merged=merged, probabilities=probs)


def end_to_end(model: ClapsModel, image: np.ndarray, prompt: str, modality: str,
               seed: int | None = None) -> SegmentationResult:
    """Fully automatic: detect, then segment every kept box."""
    cfg = model.cfg
    boxes = detect(model, image, prompt, modality)
    rng = stream(cfg.seed if seed is None else seed, "expansion", 0)
    return segment(image, boxes, model.params.mask, rng, cfg.box_expansion, cfg.crop_size,
                   cfg.crop_margin)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """Binary Dice; two empty masks score 1.0."""
    p, g = np.asarray(pred, bool), np.asarray(gt, bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


EVAL_COLUMNS = ("category", "modality", "n_samples", "dice", "n_present", "dice_present",
                "n_empty", "dice_empty", "fp_rate_empty")


@dataclass
class EvalRow:
    category: str
    modality: str
    n_samples: int
    dice: float
    n_present: int
    dice_present: float
    n_empty: int
    dice_empty: float
    fp_rate_empty: float

    def as_row(self) -> list:
        return [getattr(self, c) for c in EVAL_COLUMNS]


def evaluate(samples: Iterable[Sample], predict: Callable[[Sample], np.ndarray]) -> list[EvalRow]:
    """Dice per (category, modality).

    Lesion-present and empty-ground-truth samples are also reported apart,
    the latter with their false-positive pixel rate.  Averages are sums
    divided by counts, so sample order does not matter.
    """
    groups: dict[tuple[str, str], list[tuple[float, bool, float]]] = defaultdict(list)
    for s in samples:
        pred = np.asarray(predict(s), bool)
        gt = s.merged_mask
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
        present = bool(gt.any())
        fp = 0.0 if present else float(pred.mean())
        groups[(s.category, s.modality)].append((dice_score(pred, gt), present, fp))
    rows = []
    for (cat, mod), vals in sorted(groups.items()):
        d = np.array([v[0] for v in vals])
        pres = np.array([v[1] for v in vals])
        fps = np.array([v[2] for v in vals])
        nan = float("nan")
        rows.append(EvalRow(
            category=cat, modality=mod, n_samples=len(vals), dice=float(d.mean()),
            n_present=int(pres.sum()), dice_present=float(d[pres].mean()) if pres.any() else nan,
            n_empty=int((~pres).sum()), dice_empty=float(d[~pres].mean()) if (~pres).any() else nan,
            fp_rate_empty=float(fps[~pres].mean()) if (~pres).any() else nan,
        ))
    return rows


def model_predictor(model: ClapsModel) -> Callable[[Sample], np.ndarray]:
    return lambda s: end_to_end(model, s.image, s.prompt, s.modality).merged
