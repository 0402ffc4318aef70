"""Model assembly: frozen encoders, fusion, modality-aware text features,
detection head and mask predictor, plus the joint training objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .affm import (AttnParams, FapBranch, FapParams, GateParams, cross_attention_fuse,
                   fap_forward, gate, to_tokens)
from .boxes import BoundingBox, assign, expand_box, match_cost
from .config import RunConfig, stream
from .data import Sample
from .encoders import ClipEncoder, DetectorEncoder
from .head import HeadParams, head_forward
from .imaging import Transform, preprocess
from .losses import (LossBreakdown, LossWeights, bce_loss, clip_contrastive, detection_loss,
                     dice_loss, pool_fused, total_loss)
from .mask import MaskParams, crop_inputs, crop_target, mask_logits
from .modality import (ModalityRegistry, ModalitySignatureParams, TextEncoderParams,
                       encode_text, modality_text_features)
from .tensor import ParamGroup, Tensor

VARIANTS = ("full", "no_affm", "no_ms")


def variant_flags(name: str) -> dict[str, bool]:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {VARIANTS}")
    return {"use_affm": name != "no_affm", "use_ms": name != "no_ms"}


@dataclass
class ClapsParams(ParamGroup):
    text: TextEncoderParams
    fap: FapParams
    head: HeadParams
    mask: MaskParams
    ms: ModalitySignatureParams | None = None
    gate: GateParams | None = None
    attn: AttnParams | None = None


@dataclass
class Prepared:
    """Cached, parameter-free per-image quantities."""

    det: np.ndarray  # (C_det, G, G)
    clip: np.ndarray  # (C_clip, g, g)
    transform: Transform
    gt_norm: np.ndarray  # (M, 4) corners in the preprocessed frame, normalized
    crops: np.ndarray | None = None  # (M, 3, n, n) mask inputs for gt boxes
    crop_targets: np.ndarray | None = None  # (M, n, n)


class ClapsModel:
    def __init__(self, cfg: RunConfig, registry: ModalityRegistry, params: ClapsParams | None = None):
        self.cfg = cfg
        self.registry = registry
        if cfg.input_size % cfg.det_grid or cfg.input_size % cfg.clip_grid:
            raise ValueError(f"input_size {cfg.input_size} must be divisible by det_grid "
                             f"{cfg.det_grid} and clip_grid {cfg.clip_grid}")
        self.det_encoder = DetectorEncoder(cfg.det_grid)
        self.clip_encoder = ClipEncoder(cfg.clip_grid)
        self.params = params if params is not None else self.init_params(stream(cfg.seed, "init"))
        self._cache: dict[int, tuple[Sample, Prepared]] = {}

    @property
    def variant(self) -> str:
        if not self.cfg.use_affm:
            return "no_affm"
        return "full" if self.cfg.use_ms else "no_ms"

    def init_params(self, rng: np.random.Generator) -> ClapsParams:
        c = self.cfg
        d = c.d_model
        text = TextEncoderParams.init(rng, d)
        det_branch = FapBranch.init(rng, self.det_encoder.channels, d, c.fap_hidden)
        clip_branch = FapBranch.init(rng, self.clip_encoder.channels, d, c.fap_hidden) if c.use_affm else None
        g = GateParams.init(rng, d) if c.use_affm else None
        attn = AttnParams.init(rng, d, c.d_k, c.heads) if c.use_affm else None
        ms = ModalitySignatureParams.init(rng, len(self.registry), d, c.ms_hidden, c.heads) if c.use_ms else None
        head = HeadParams.init(rng, d, c.queries)
        mask = MaskParams.init(rng, c.mask_hidden)
        return ClapsParams(text=text, fap=FapParams(det=det_branch, clip=clip_branch), head=head,
                           mask=mask, ms=ms, gate=g, attn=attn)

    def trainable(self) -> list[tuple[str, Tensor]]:
        named = list(self.params.named_parameters())
        if self.cfg.freeze_mask_predictor:
            named = [(n, p) for n, p in named if not n.startswith("mask.")]
        return named

    # -- per-image features -------------------------------------------------
    def encode(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray, Transform]:
        x, t = preprocess(image, self.cfg.input_size)
        return self.det_encoder(x), self.clip_encoder(x), t

    def prepare(self, sample: Sample) -> Prepared:
        hit = self._cache.get(id(sample))
        if hit is not None and hit[0] is sample:
            return hit[1]
        det, clip, t = self.encode(sample.image)
        s = float(t.size)
        gt = np.array([t.forward_box(b).as_array() / s for b in sample.gt_boxes]).reshape(-1, 4)
        prep = Prepared(det=det, clip=clip, transform=t, gt_norm=gt)
        if sample.gt_boxes:
            n, mg = self.cfg.crop_size, self.cfg.crop_margin
            img = sample.image.astype(np.float64)
            prep.crops = np.stack([crop_inputs(img, b, n, mg)[0] for b in sample.gt_boxes])
            prep.crop_targets = np.stack([crop_target(m, b, n, mg)
                                          for b, m in zip(sample.gt_boxes, sample.gt_masks)])
        self._cache[id(sample)] = (sample, prep)
        return prep

    def clear_cache(self) -> None:
        self._cache.clear()

    # -- differentiable forward ---------------------------------------------
    def fuse(self, det, clip) -> Tensor:
        p = self.params
        normalize = self.cfg.fap_normalize
        if p.attn is None:
            return fap_forward(det, p.fap.det, normalize)
        f_g = fap_forward(det, p.fap.det, normalize)
        f_c = fap_forward(clip, p.fap.clip, normalize)
        return cross_attention_fuse(f_g, gate(f_c, p.gate), p.attn)

    def text_features(self, prompt: str, modality: str) -> Tensor:
        """F_ST' (L+1, d), or raw F_T (L, d) for the no-MS variant."""
        if not prompt.strip():
            raise ValueError("prompt text is empty")
        return modality_text_features(prompt, modality, self.registry, self.params.text, self.params.ms)

    def forward(self, dets: np.ndarray, clips: np.ndarray, prompts: Sequence[str],
                modalities: Sequence[str]):
        """Returns ``(boxes (N,Q,4), logits (N,Q), fused, text_pooled (N,d))``."""
        fused = self.fuse(dets, clips)
        pooled = T.stack([self.text_features(pr, m).mean(axis=0) for pr, m in zip(prompts, modalities)])
        boxes, logits = head_forward(to_tokens(fused), pooled, self.cfg.det_grid, self.params.head)
        return boxes, logits, fused, pooled

    # -- objective ----------------------------------------------------------
    def assignments(self, boxes: np.ndarray, logits: np.ndarray, preps: Sequence[Prepared],
                    w: LossWeights) -> list[list[tuple[int, int]]]:
        out = []
        for i, prep in enumerate(preps):
            if not len(prep.gt_norm):
                out.append([])
                continue
            conf = 1.0 / (1.0 + np.exp(-logits[i]))
            out.append(assign(match_cost(boxes[i], conf, prep.gt_norm, w.lambda_cls, w.lambda_bbox)))
        return out

    def loss(self, batch: Sequence[Sample], w: LossWeights | None = None, step: int = 0,
             fixed_assignments=None):
        """Joint objective on one single-modality batch.

        Returns ``(total, breakdown, assignments)``.  Passing the returned
        assignments back in as ``fixed_assignments`` holds the matching
        constant, which finite-difference checks need.
        """
        w = w or self.cfg.loss
        if not batch:
            raise ValueError("empty batch")
        modality = batch[0].modality
        mods = [s.modality for s in batch]
        if any(m != modality for m in mods):
            raise ValueError(f"mixed-modality batch: {sorted(set(mods))}")
        preps = [self.prepare(s) for s in batch]
        dets = np.stack([p.det for p in preps])
        clips = np.stack([p.clip for p in preps])
        boxes, logits, fused, pooled = self.forward(dets, clips, [s.prompt for s in batch], mods)
        if not (np.all(np.isfinite(boxes.data)) and np.all(np.isfinite(logits.data))):
            raise FloatingPointError("non-finite detection head outputs")

        asg = fixed_assignments or self.assignments(boxes.data, logits.data, preps, w)
        cls_terms, l1_terms, g_terms = [], [], []
        for i, prep in enumerate(preps):
            _, c, l1, gl = detection_loss(boxes[i], logits[i], prep.gt_norm, asg[i], w)
            cls_terms.append(c)
            if asg[i]:
                l1_terms.append(l1)
                g_terms.append(gl)
        cls = T.stack(cls_terms).mean()
        l1 = T.stack(l1_terms).mean() if l1_terms else Tensor(0.0)
        gl = T.stack(g_terms).mean() if g_terms else Tensor(0.0)

        dice, bce = self._seg_loss(batch, preps, step)

        if self.cfg.contrastive_text == "raw":
            text_vecs = T.stack([encode_text(s.prompt, self.params.text).mean(axis=0) for s in batch])
        else:
            text_vecs = pooled
        con = clip_contrastive(pool_fused(fused), text_vecs, w.tau, w.symmetric_contrastive)
        total, bd = total_loss(modality, mods, con, (cls, l1, gl), (dice, bce), w)
        return total, bd, asg

    def _seg_loss(self, batch: Sequence[Sample], preps: Sequence[Prepared], step: int):
        cfg = self.cfg
        n, mg = cfg.crop_size, cfg.crop_margin
        if cfg.expand_in_training:
            rng = stream(cfg.seed, "expansion", 1, step)
            xs, ys = [], []
            for s in batch:
                h, wd = s.image.shape[:2]
                img = s.image.astype(np.float64)
                for b, m in zip(s.gt_boxes, s.gt_masks):
                    e = expand_box(b, wd, h, rng, *cfg.box_expansion)
                    xs.append(crop_inputs(img, e, n, mg)[0])
                    ys.append(crop_target(m, e, n, mg))
        else:
            xs = [p.crops for p in preps if p.crops is not None]
            ys = [p.crop_targets for p in preps if p.crop_targets is not None]
        if not xs:
            return Tensor(0.0), Tensor(0.0)
        x = np.concatenate(xs) if not cfg.expand_in_training else np.stack(xs)
        y = np.concatenate(ys) if not cfg.expand_in_training else np.stack(ys)
        probs = T.sigmoid(mask_logits(x, self.params.mask))
        dice = T.stack([dice_loss(probs[k], y[k]) for k in range(len(y))]).mean()
        return dice, bce_loss(probs, y)


def box_from_normalized(corners: np.ndarray, t: Transform) -> BoundingBox:
    """Normalized corners in the preprocessed frame -> clamped original-frame box."""
    c = np.asarray(corners, float) * t.size
    x0, x1 = sorted((c[0], c[2]))
    y0, y1 = sorted((c[1], c[3]))
    return t.restore_box(BoundingBox(x0, y0, x1, y1)).clamp(t.width, t.height)


__all__ = ["ClapsModel", "ClapsParams", "Prepared", "VARIANTS", "variant_flags",
           "box_from_normalized", "LossBreakdown"]
