"""Box-prompted mask predictor: a small encoder-decoder over a box crop.

The box plus a margin is resampled onto a fixed ``n`` x ``n`` grid.  The
network sees three channels: contrast-normalized intensity, the same with
its sign flipped so the box interior reads brighter than its surround, and
a box indicator.  Probabilities are pasted back onto the full image and are
exactly zero outside the crop region.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import BoundingBox
from .imaging import box_indicator, crop, crop_region, paste
from .tensor import ParamGroup, Tensor, uniform_param

IN_CHANNELS = 3


@dataclass
class MaskParams(ParamGroup):
    enc1_w: Tensor
    enc1_b: Tensor
    enc2_w: Tensor
    enc2_b: Tensor
    dec_w: Tensor
    dec_b: Tensor
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = 8):
        h = hidden
        return cls(
            enc1_w=uniform_param(rng, (h, IN_CHANNELS, 3, 3), IN_CHANNELS * 9),
            enc1_b=uniform_param(rng, (h,), IN_CHANNELS * 9),
            enc2_w=uniform_param(rng, (h, h, 3, 3), h * 9),
            enc2_b=uniform_param(rng, (h,), h * 9),
            dec_w=uniform_param(rng, (h, 2 * h, 3, 3), 2 * h * 9),
            dec_b=uniform_param(rng, (h,), 2 * h * 9),
            out_w=uniform_param(rng, (1, h, 1, 1), h),
            out_b=uniform_param(rng, (1,), h),
        )


def crop_inputs(image: np.ndarray, box: BoundingBox, n: int, margin: float):
    """Network input (3, n, n) for one box plus the crop region used."""
    img = np.asarray(image, float)
    region = crop_region(box, margin)
    c = crop(img, region, n)
    ind = box_indicator(region, box, n)
    z = (c - c.mean()) / max(c.std(), 1.0)
    sign = 1.0
    if 0 < ind.sum() < ind.size:
        sign = 1.0 if c[ind > 0].mean() >= c[ind == 0].mean() else -1.0
    return np.stack([z, sign * z, ind]), region


def _pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _up2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    x = T.broadcast_to(x.reshape(n, c, h, 1, w, 1), (n, c, h, 2, w, 2))
    return x.reshape(n, c, 2 * h, 2 * w)


def mask_logits(inputs, p: MaskParams) -> Tensor:
    """(N, 3, n, n) crop inputs -> (N, n, n) logits."""
    x = T.as_tensor(inputs)
    e1 = T.relu(T.conv2d(x, p.enc1_w, p.enc1_b))
    e2 = T.relu(T.conv2d(_pool2(e1), p.enc2_w, p.enc2_b))
    d = T.relu(T.conv2d(T.concat([e1, _up2(e2)], axis=1), p.dec_w, p.dec_b))
    out = T.conv2d(d, p.out_w, p.out_b)
    n, _, h, w = out.shape
    return out.reshape(n, h, w)


def predict_mask(image: np.ndarray, box: BoundingBox, p: MaskParams, n: int = 24,
                 margin: float = 0.25) -> np.ndarray:
    """Full-image probabilities in [0, 1] for one box prompt."""
    img = np.asarray(image, float)
    x, region = crop_inputs(img, box, n, margin)
    probs = T.sigmoid(mask_logits(x[None], p)).data[0]
    return np.clip(paste(probs, region, img.shape[0], img.shape[1]), 0.0, 1.0)


def crop_target(mask: np.ndarray, box: BoundingBox, n: int, margin: float) -> np.ndarray:
    """Ground-truth mask resampled onto the crop grid as soft targets."""
    return np.clip(crop(np.asarray(mask, float), crop_region(box, margin), n, mode="constant"), 0.0, 1.0)
