"""Adaptive feature fusion: per-branch alignment/projection, channel gating of
the CLIP-like branch, and residual cross-attention from detector features.

Feature maps are channel-first batches ``(N, C, H, W)``.  Spatial maps are
flattened row-major into token sequences for attention; with no positional
terms the result does not depend on that order.

The module works on one feature level.  A multi-scale variant applies
:func:`affm_forward` per level with separate parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamGroup, Tensor, uniform_param


@dataclass
class FapBranch(ParamGroup):
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    proj_w: Tensor
    proj_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, d_model: int, hidden: int | None = None):
        hidden = hidden or d_model
        f1, f2 = c_in * 9, hidden * 9
        return cls(
            conv1_w=uniform_param(rng, (hidden, c_in, 3, 3), f1),
            conv1_b=uniform_param(rng, (hidden,), f1),
            conv2_w=uniform_param(rng, (hidden, hidden, 3, 3), f2),
            conv2_b=uniform_param(rng, (hidden,), f2),
            proj_w=uniform_param(rng, (d_model, hidden, 1, 1), hidden),
            proj_b=uniform_param(rng, (d_model,), hidden),
        )

    @property
    def c_in(self) -> int:
        return self.conv1_w.shape[1]

    @property
    def d_model(self) -> int:
        return self.proj_w.shape[0]


@dataclass
class FapParams(ParamGroup):
    det: FapBranch
    clip: FapBranch | None = None

    def __post_init__(self):
        if self.clip is not None and self.clip.d_model != self.det.d_model:
            raise ValueError(
                f"FAP branches project to different widths: {self.clip.d_model} vs {self.det.d_model}")


@dataclass
class GateParams(ParamGroup):
    w_gate: Tensor  # (d_model,)

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int):
        return cls(w_gate=uniform_param(rng, (d_model,), 1))


@dataclass
class AttnParams(ParamGroup):
    """Single- or multi-head projection triple with biases."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    b_q: Tensor
    b_k: Tensor
    b_v: Tensor
    heads: int = 1

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_k: int | None = None, heads: int = 1,
             kv_in: int | None = None):
        d_k = d_k or d_in
        kv_in = kv_in or d_in
        if d_k % heads:
            raise ValueError(f"d_k={d_k} is not divisible by heads={heads}")
        return cls(
            w_q=uniform_param(rng, (d_in, d_k), d_in),
            w_k=uniform_param(rng, (kv_in, d_k), kv_in),
            w_v=uniform_param(rng, (kv_in, d_k), kv_in),
            b_q=uniform_param(rng, (d_k,), d_in),
            b_k=uniform_param(rng, (d_k,), kv_in),
            b_v=uniform_param(rng, (d_k,), kv_in),
            heads=heads,
        )

    @property
    def d_k(self) -> int:
        return self.w_k.shape[1]


CrossAttnParams = AttnParams


def attention(queries, keys_values, p: AttnParams, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_head)) V for token batches (N, L, d)."""
    q = T.matmul(queries, p.w_q) + p.b_q
    k = T.matmul(keys_values, p.w_k) + p.b_k
    v = T.matmul(keys_values, p.w_v) + p.b_v
    h = p.heads
    if h == 1:
        w = T.softmax_last(T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(p.d_k)))
        out = T.matmul(w, v)
    else:
        n, lq, dk = q.shape
        lk = k.shape[1]
        dh = dk // h
        qh = T.transpose(q.reshape(n, lq, h, dh), (0, 2, 1, 3))
        kh = T.transpose(k.reshape(n, lk, h, dh), (0, 2, 1, 3))
        vh = T.transpose(v.reshape(n, lk, h, dh), (0, 2, 1, 3))
        w = T.softmax_last(T.matmul(qh, T.swap_last(kh)) * (1.0 / math.sqrt(dh)))
        out = T.transpose(T.matmul(w, vh), (0, 2, 1, 3)).reshape(n, lq, dk)
    return (out, w) if return_weights else out


@dataclass
class AffmParams(ParamGroup):
    fap: FapParams
    gate: GateParams
    attn: AttnParams

    @classmethod
    def init(cls, rng: np.random.Generator, c_det: int, c_clip: int, d_model: int,
             d_k: int | None = None, heads: int = 1, hidden: int | None = None):
        d_k = d_k or d_model
        if d_k != d_model:
            raise ValueError(
                f"residual fusion adds the attention output to d_model={d_model} features; d_k={d_k} must match")
        return cls(
            fap=FapParams(det=FapBranch.init(rng, c_det, d_model, hidden),
                          clip=FapBranch.init(rng, c_clip, d_model, hidden)),
            gate=GateParams.init(rng, d_model),
            attn=AttnParams.init(rng, d_model, d_k, heads),
        )


def _instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    return xc / T.sqrt(var + eps)


def fap_forward(feature_map, branch: FapBranch, normalize: bool = False) -> Tensor:
    """conv3x3 -> ReLU -> conv3x3 -> conv1x1 to ``d_model`` channels."""
    f = T.as_tensor(feature_map)
    if f.ndim != 4 or f.shape[1] != branch.c_in:
        raise ValueError(f"FAP branch expects (N, {branch.c_in}, H, W), got {f.shape}")
    x = T.conv2d(f, branch.conv1_w, branch.conv1_b)
    if normalize:
        x = _instance_norm(x)
    x = T.conv2d(T.relu(x), branch.conv2_w, branch.conv2_b)
    if normalize:
        x = _instance_norm(x)
    return T.conv2d(x, branch.proj_w, branch.proj_b)


def gate(clip_map, g: GateParams) -> Tensor:
    """Scale channel c by sigmoid(w_gate[c])."""
    clip_map = T.as_tensor(clip_map)
    d = g.w_gate.shape[0]
    if clip_map.shape[1] != d:
        raise ValueError(f"gate has {d} channels, feature map has {clip_map.shape[1]}")
    return T.sigmoid(g.w_gate).reshape(1, d, 1, 1) * clip_map


def to_tokens(fmap: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, H*W, C), row-major over space."""
    n, c, h, w = fmap.shape
    return T.transpose(fmap.reshape(n, c, h * w), (0, 2, 1))


def from_tokens(tokens: Tensor, h: int, w: int) -> Tensor:
    n, _, c = tokens.shape
    return T.transpose(tokens, (0, 2, 1)).reshape(n, c, h, w)


def cross_attention_fuse(det_map, clip_gated, p: AttnParams) -> Tensor:
    """Detector features query the gated CLIP features; residual add."""
    det_map, clip_gated = T.as_tensor(det_map), T.as_tensor(clip_gated)
    if det_map.shape[1] != clip_gated.shape[1]:
        raise ValueError(
            f"d_model mismatch: detector map has {det_map.shape[1]} channels, CLIP map {clip_gated.shape[1]}")
    if p.d_k != det_map.shape[1]:
        raise ValueError(f"attention width {p.d_k} differs from d_model {det_map.shape[1]}")
    n, d, hg, wg = det_map.shape
    g_tok = to_tokens(det_map)
    readout = attention(g_tok, to_tokens(clip_gated), p)
    return from_tokens(g_tok + readout, hg, wg)


def affm_forward(clip_map, det_map, params: AffmParams, normalize: bool = False) -> Tensor:
    """Fused map with the detector branch's spatial extent."""
    f_g = fap_forward(det_map, params.fap.det, normalize)
    f_c = fap_forward(clip_map, params.fap.clip, normalize)
    return cross_attention_fuse(f_g, gate(f_c, params.gate), params.attn)
