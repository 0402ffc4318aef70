"""Raster geometry: square padding + bilinear resize with an exact inverse for
boxes and masks, and box-aligned crop sampling for the mask predictor.

Pixel ``i`` covers the continuous interval ``[i, i+1)``; bilinear sampling
reads the value at pixel centers ``i + 0.5``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .boxes import BoundingBox


def to_gray(image: np.ndarray) -> np.ndarray:
    """(H, W) or (H, W, C) raster -> float64 (H, W) in [0, 255]."""
    a = np.asarray(image)
    if a.ndim == 3:
        a = a[..., :3].mean(axis=-1) if a.shape[-1] >= 3 else a[..., 0]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d grayscale or 3-d color raster, got shape {a.shape}")
    return a.astype(np.float64)


def sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, mode: str = "nearest",
                    cval: float = 0.0) -> np.ndarray:
    """Sample ``img`` at continuous coordinates (pixel centers at i + 0.5)."""
    coords = np.stack([np.asarray(ys, float) - 0.5, np.asarray(xs, float) - 0.5])
    return map_coordinates(img, coords, order=1, mode=mode, cval=cval)


@dataclass(frozen=True)
class Transform:
    """Original frame -> padded square -> ``size`` x ``size``."""

    height: int
    width: int
    size: int

    @property
    def side(self) -> int:
        return max(self.height, self.width)

    @property
    def pad_x(self) -> int:
        return (self.side - self.width) // 2

    @property
    def pad_y(self) -> int:
        return (self.side - self.height) // 2

    @property
    def scale(self) -> float:
        return self.size / self.side

    @property
    def is_identity(self) -> bool:
        return self.height == self.width == self.size

    def forward_box(self, b: BoundingBox) -> BoundingBox:
        s = self.scale
        return BoundingBox((b.x_min + self.pad_x) * s, (b.y_min + self.pad_y) * s,
                           (b.x_max + self.pad_x) * s, (b.y_max + self.pad_y) * s)

    def restore_box(self, b: BoundingBox) -> BoundingBox:
        s = self.scale
        return BoundingBox(b.x_min / s - self.pad_x, b.y_min / s - self.pad_y,
                           b.x_max / s - self.pad_x, b.y_max / s - self.pad_y)

    def restore_mask(self, m: np.ndarray) -> np.ndarray:
        """Resample a (size, size) map back onto the original raster."""
        if m.shape != (self.size, self.size):
            raise ValueError(f"mask shape {m.shape} does not match transform size {self.size}")
        if self.is_identity:
            return np.array(m, dtype=np.float64)
        ys, xs = np.mgrid[0:self.height, 0:self.width] + 0.5
        return sample_bilinear(np.asarray(m, float), (xs + self.pad_x) * self.scale,
                               (ys + self.pad_y) * self.scale)


def preprocess(image: np.ndarray, size: int = 224) -> tuple[np.ndarray, Transform]:
    """Zero-pad to a centered square, then bilinearly resize to ``size``."""
    g = to_gray(image)
    if g.size == 0:
        raise ValueError("cannot preprocess an empty image")
    t = Transform(g.shape[0], g.shape[1], size)
    if t.is_identity:
        return g.copy(), t
    square = np.zeros((t.side, t.side))
    square[t.pad_y:t.pad_y + t.height, t.pad_x:t.pad_x + t.width] = g
    c = (np.arange(size) + 0.5) / t.scale
    ys, xs = np.meshgrid(c, c, indexing="ij")
    return sample_bilinear(square, xs, ys), t


# ---------------------------------------------------------------------------
# box crops
# ---------------------------------------------------------------------------

def crop_region(b: BoundingBox, margin: float) -> tuple[float, float, float, float]:
    """Box grown by ``margin`` of its size on every side (not clamped)."""
    w = max(b.width, 1.0)
    h = max(b.height, 1.0)
    cx, cy = 0.5 * (b.x_min + b.x_max), 0.5 * (b.y_min + b.y_max)
    hw, hh = 0.5 * w * (1 + 2 * margin), 0.5 * h * (1 + 2 * margin)
    return cx - hw, cy - hh, cx + hw, cy + hh


def crop(img: np.ndarray, region, n: int, mode: str = "nearest") -> np.ndarray:
    """Resample ``region`` of ``img`` onto an n x n grid."""
    x0, y0, x1, y1 = region
    u = (np.arange(n) + 0.5) / n
    ys, xs = np.meshgrid(y0 + u * (y1 - y0), x0 + u * (x1 - x0), indexing="ij")
    return sample_bilinear(np.asarray(img, float), xs, ys, mode=mode)


def paste(crop_map: np.ndarray, region, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`crop`: spread an n x n map over the image, zero outside."""
    n = crop_map.shape[0]
    x0, y0, x1, y1 = region
    out = np.zeros((height, width))
    cx0, cy0 = max(int(np.floor(x0)), 0), max(int(np.floor(y0)), 0)
    cx1, cy1 = min(int(np.ceil(x1)), width), min(int(np.ceil(y1)), height)
    if cx1 <= cx0 or cy1 <= cy0:
        return out
    ys, xs = np.mgrid[cy0:cy1, cx0:cx1] + 0.5
    inside = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    gx = (xs - x0) / (x1 - x0) * n
    gy = (ys - y0) / (y1 - y0) * n
    vals = sample_bilinear(np.asarray(crop_map, float), gx, gy)
    out[cy0:cy1, cx0:cx1] = np.where(inside, vals, 0.0)
    return out


def box_indicator(region, b: BoundingBox, n: int) -> np.ndarray:
    """1 on crop cells whose centers fall inside ``b``."""
    x0, y0, x1, y1 = region
    u = (np.arange(n) + 0.5) / n
    xs = x0 + u * (x1 - x0)
    ys = y0 + u * (y1 - y0)
    inx = (xs >= b.x_min) & (xs < b.x_max)
    iny = (ys >= b.y_min) & (ys < b.y_max)
    return (iny[:, None] & inx[None, :]).astype(np.float64)
