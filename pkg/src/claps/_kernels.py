"""Convolution kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time from the ``CLAPS_KERNELS``
environment variable (``numba`` or ``numpy``).  ``numba`` is the default
when the package is importable.  ``set_backend`` switches at runtime, which
the benchmark and the backend-parity tests use.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

ENV_VAR = "CLAPS_KERNELS"


# --------------------------------------------------------------------------
# numpy fallback (im2col + tensordot)
# --------------------------------------------------------------------------

def _np_patches(x: np.ndarray, k: int) -> np.ndarray:
    p = (k - 1) // 2
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    # (N, C, H, W, k, k)
    return np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))


def _np_conv2d_forward(x, w, b):
    k = w.shape[-1]
    cols = _np_patches(x, k)
    out = np.einsum("nchwij,ocij->nohw", cols, w, optimize=True)
    return out + b[None, :, None, None]


def _np_conv2d_backward(x, w, gout):
    k = w.shape[-1]
    cols = _np_patches(x, k)
    gw = np.einsum("nohw,nchwij->ocij", gout, cols, optimize=True)
    gb = gout.sum(axis=(0, 2, 3))
    # input grad is a full correlation with the flipped kernel
    gcols = _np_patches(gout, k)
    wf = w[:, :, ::-1, ::-1]
    gx = np.einsum("nohwij,ocij->nchw", gcols, wf, optimize=True)
    return gx, gw, gb


# --------------------------------------------------------------------------
# numba im2col + BLAS
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_im2col(xn, k):
        c_in, h, wd = xn.shape
        p = (k - 1) // 2
        cols = np.zeros((c_in * k * k, h * wd))
        for c in range(c_in):
            for i in range(k):
                y0, y1 = max(0, p - i), min(h, h + p - i)
                for j in range(k):
                    x0, x1 = max(0, p - j), min(wd, wd + p - j)
                    r = (c * k + i) * k + j
                    for y in range(y0, y1):
                        sy = y + i - p
                        for xx in range(x0, x1):
                            cols[r, y * wd + xx] = xn[c, sy, xx + j - p]
        return cols

    @njit(cache=True)
    def _nb_col2im(cols, c_in, h, wd, k):
        p = (k - 1) // 2
        out = np.zeros((c_in, h, wd))
        for c in range(c_in):
            for i in range(k):
                y0, y1 = max(0, p - i), min(h, h + p - i)
                for j in range(k):
                    x0, x1 = max(0, p - j), min(wd, wd + p - j)
                    r = (c * k + i) * k + j
                    for y in range(y0, y1):
                        sy = y + i - p
                        for xx in range(x0, x1):
                            out[c, sy, xx + j - p] += cols[r, y * wd + xx]
        return out

    @njit(cache=True)
    def _nb_conv2d_forward(x, w, b):
        n_batch, c_in, h, wd = x.shape
        c_out, _, k, _ = w.shape
        w2 = w.reshape(c_out, c_in * k * k)
        out = np.empty((n_batch, c_out, h, wd))
        for n in range(n_batch):
            y = np.dot(w2, _nb_im2col(x[n], k))
            for o in range(c_out):
                out[n, o] = y[o].reshape(h, wd) + b[o]
        return out

    @njit(cache=True)
    def _nb_conv2d_backward(x, w, gout):
        n_batch, c_in, h, wd = x.shape
        c_out, _, k, _ = w.shape
        w2 = w.reshape(c_out, c_in * k * k)
        gx = np.empty_like(x)
        gw2 = np.zeros((c_out, c_in * k * k))
        gb = np.zeros(c_out)
        for n in range(n_batch):
            g = np.ascontiguousarray(gout[n]).reshape(c_out, h * wd)
            cols = _nb_im2col(x[n], k)
            gw2 += np.dot(g, cols.T)
            gx[n] = _nb_col2im(np.dot(w2.T, g), c_in, h, wd, k)
            for o in range(c_out):
                gb[o] += g[o].sum()
        return gx, gw2.reshape(w.shape), gb


_BACKENDS = {"numpy": (_np_conv2d_forward, _np_conv2d_backward)}
if HAVE_NUMBA:
    _BACKENDS["numba"] = (_nb_conv2d_forward, _nb_conv2d_backward)

_active = "numpy"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    _active = name


def get_backend() -> str:
    return _active


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    fwd, _ = _BACKENDS[_active]
    return fwd(np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(b))


def conv2d_backward(x: np.ndarray, w: np.ndarray, gout: np.ndarray):
    _, bwd = _BACKENDS[_active]
    return bwd(np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(gout))


_requested = os.environ.get(ENV_VAR, "numba" if HAVE_NUMBA else "numpy").strip().lower()
set_backend(_requested if _requested in _BACKENDS else "numpy")
