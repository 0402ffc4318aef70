"""Frozen image encoder stand-ins.

Both encoders map a preprocessed ``(S, S)`` raster to a channel-first feature
map on a fixed grid and declare their channel count up front.  They have no
trainable weights: every filter is fixed, so features can be computed once
per image and cached.

* :class:`DetectorEncoder` has a local bias: small filters at full
  resolution, average-pooled to a fine grid.  Its responses are unsigned
  (contrast magnitude, edge energy, local spread), so it sees *where* things
  are and their shape but not whether they are brighter or darker than the
  surroundings.
* :class:`ClipEncoder` has a global bias: strided pooling to a coarse grid
  and wide filters.  Its responses are signed (bright vs dark relative to the
  image mean) plus whole-image statistics.

Each map also carries sinusoidal coordinate channels, ``sin`` and ``cos`` of
``pi * f * u`` and ``pi * f * v`` for a few frequencies ``f``, with ``u, v`` on
``[-1, 1]``.  A dot product of two such vectors is a sum of
``cos(pi * f * du)`` terms that peaks when the positions coincide, so
attention can learn to read co-located tokens across the two grids.  The
coordinates travel with their token, so attention stays invariant to how the
tokens are ordered.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import sobel, uniform_filter, uniform_filter1d

COORD_FREQS = (1.0, 2.0, 4.0)
COORD_CHANNELS = 4 * len(COORD_FREQS)


def block_mean(x: np.ndarray, grid: int) -> np.ndarray:
    """Average-pool the trailing two axes onto ``grid`` x ``grid`` cells."""
    s = x.shape[-1]
    if s % grid:
        raise ValueError(f"raster side {s} is not divisible by grid {grid}")
    k = s // grid
    return x.reshape(*x.shape[:-2], grid, k, grid, k).mean(axis=(-3, -1))


def coord_channels(grid: int) -> np.ndarray:
    c = (np.arange(grid) + 0.5) / grid * 2.0 - 1.0
    v, u = np.meshgrid(c, c, indexing="ij")
    out = []
    for f in COORD_FREQS:
        for a in (u, v):
            out += [np.sin(np.pi * f * a), np.cos(np.pi * f * a)]
    return np.stack(out)


class DetectorEncoder:
    channels = 4 + COORD_CHANNELS

    def __init__(self, grid: int = 16):
        self.grid = grid

    def __call__(self, image: np.ndarray) -> np.ndarray:
        x = np.asarray(image, float) / 255.0
        s = x.shape[-1]
        bg = uniform_filter(x, size=max(s // 8, 3), mode="nearest")
        contrast = np.abs(x - bg)
        gx = np.abs(sobel(x, axis=1, mode="nearest")) / 8.0
        gy = np.abs(sobel(x, axis=0, mode="nearest")) / 8.0
        m = uniform_filter(x, size=5, mode="nearest")
        spread = np.sqrt(np.maximum(uniform_filter(x * x, size=5, mode="nearest") - m * m, 0.0))
        feats = block_mean(np.stack([contrast, gx, gy, spread]), self.grid)
        feats *= np.array([4.0, 8.0, 8.0, 8.0])[:, None, None]
        return np.concatenate([feats, coord_channels(self.grid)])


class ClipEncoder:
    channels = 4 + COORD_CHANNELS

    def __init__(self, grid: int = 8):
        self.grid = grid

    def __call__(self, image: np.ndarray) -> np.ndarray:
        x = np.asarray(image, float) / 255.0
        s = x.shape[-1]
        mean = x.mean()
        d = x - mean
        span = max(s // 6, 3)
        # horizontal vs vertical elongation of the deviation energy
        a = np.abs(d)
        elong = uniform_filter1d(a, span, axis=1, mode="nearest") - uniform_filter1d(a, span, axis=0, mode="nearest")
        pooled = block_mean(np.stack([np.maximum(d, 0.0), np.maximum(-d, 0.0), elong]), self.grid)
        pooled *= 4.0
        glob = np.full((1, self.grid, self.grid), 2.0 * mean - 1.0)
        return np.concatenate([pooled, glob, coord_channels(self.grid)])
