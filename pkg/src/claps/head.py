"""Text-conditioned detection head.

A simplified stand-in for a grounded-detection decoder: ``Q`` learned queries
(shifted by a projection of the pooled prompt features) each attend once over
the fused feature tokens.  Each query also has a learnable reference point;
attention logits are penalized by squared distance to it, which spreads the
queries over the frame the way anchors do.

Box readout is geometric.  The center is the attention-weighted mean of the
grid cell centers, and the size comes from the attention spread
(``sqrt(12 var)`` is the width of a uniform distribution with variance
``var``) times a learned log-scale correction.  A plain linear readout of
``cx, cy, w, h`` cannot localize here because fused tokens carry no
absolute position after attention pooling.

Confidence starts from a phrase-alignment score: the query's pooled value
vector, projected, dotted with the pooled text features.  Overlapping
queries then compete (see :func:`compete`), a fixed stand-in for the query
self-attention a full decoder uses to suppress duplicate boxes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import iou_tensor
from .tensor import ParamGroup, Tensor, uniform_param


def grid_centers(grid: int) -> np.ndarray:
    """(grid*grid, 2) normalized (x, y) cell centers, row-major."""
    c = (np.arange(grid) + 0.5) / grid
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass
class HeadParams(ParamGroup):
    queries: Tensor  # (Q, d)
    w_text_q: Tensor  # (d, d)
    w_hq: Tensor
    w_hk: Tensor
    w_hv: Tensor
    ref_logit: Tensor  # (Q, 2)
    log_beta: Tensor  # (Q,)
    w_size: Tensor  # (d, 2)
    b_size: Tensor  # (2,)
    w_conf: Tensor  # (d, d)
    b_conf: Tensor  # (1,)

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, n_queries: int = 10):
        d = d_model
        ref = rng.uniform(0.15, 0.85, size=(n_queries, 2))
        return cls(
            queries=uniform_param(rng, (n_queries, d), d),
            w_text_q=uniform_param(rng, (d, d), d),
            w_hq=uniform_param(rng, (d, d), d),
            w_hk=uniform_param(rng, (d, d), d),
            w_hv=uniform_param(rng, (d, d), d),
            ref_logit=Tensor(np.log(ref / (1 - ref)), requires_grad=True),
            log_beta=Tensor(np.full(n_queries, math.log(20.0)), requires_grad=True),
            w_size=uniform_param(rng, (d, 2), d),
            b_size=Tensor(np.full(2, -0.5), requires_grad=True),
            w_conf=uniform_param(rng, (d, d), d),
            b_conf=Tensor(np.zeros(1), requires_grad=True),
        )

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]


def head_forward(tokens, text_pooled, grid: int, p: HeadParams):
    """Boxes and confidence logits for a batch.

    ``tokens`` is (N, L, d) fused features over a ``grid`` x ``grid`` map and
    ``text_pooled`` is (N, d).  Returns ``(boxes, logits)`` with boxes
    (N, Q, 4) as normalized corners and logits (N, Q).
    """
    tokens, text_pooled = T.as_tensor(tokens), T.as_tensor(text_pooled)
    n, l, d = tokens.shape
    if l != grid * grid:
        raise ValueError(f"{l} tokens do not form a {grid}x{grid} grid")
    q_n = p.n_queries
    pos = grid_centers(grid)  # (L, 2)
    q = p.queries.reshape(1, q_n, d) + T.matmul(text_pooled, p.w_text_q).reshape(n, 1, d)
    qp = T.matmul(q, p.w_hq)
    kp = T.matmul(tokens, p.w_hk)
    logits = T.matmul(qp, T.swap_last(kp)) * (1.0 / math.sqrt(d))  # (N, Q, L)
    ref = T.sigmoid(p.ref_logit)  # (Q, 2)
    dx = pos[None, :, 0] - ref[:, 0:1]  # (Q, L)
    dy = pos[None, :, 1] - ref[:, 1:2]
    prior = T.exp(p.log_beta).reshape(q_n, 1) * (dx * dx + dy * dy)
    att = T.softmax_last(logits - prior.reshape(1, q_n, l))
    center = T.matmul(att, Tensor(pos))  # (N, Q, 2)
    second = T.matmul(att, Tensor(pos * pos))
    var = T.relu(second - center * center)
    r = T.matmul(att, T.matmul(tokens, p.w_hv))  # (N, Q, d)
    size = T.sqrt(12.0 * var + 1e-6) * T.exp(T.matmul(r, p.w_size) + p.b_size)
    half = 0.5 * size
    boxes = T.concat([center - half, center + half], axis=-1)
    score = (T.matmul(r, p.w_conf) * text_pooled.reshape(n, 1, d)).sum(axis=-1) * (1.0 / math.sqrt(d))
    score = score + p.b_conf
    return boxes, compete(score, overlap_weights(boxes))


def overlap_weights(boxes: Tensor) -> Tensor:
    """(N, Q, Q) pairwise IoU of predicted boxes with a zero diagonal."""
    n, q, _ = boxes.shape
    w = iou_tensor(boxes.reshape(n, q, 1, 4), boxes.reshape(n, 1, q, 4))
    return w * (1.0 - np.eye(q))


def compete(score: Tensor, weights: Tensor) -> Tensor:
    """Local competition between overlapping queries.

    ``z_q = s_q - log(1 + sum_q' w_qq' exp(s_q'))``, so ``sigmoid(z_q)`` is
    query q's share of a softmax over itself, its overlapping neighbours and
    a background slot.  Queries that do not overlap do not interact.
    """
    shift = max(float(score.data.max()), 0.0)
    e = T.exp(score - shift)  # (N, Q)
    n, q = score.shape
    neigh = T.matmul(weights, e.reshape(n, q, 1)).reshape(n, q)
    return score - (T.log(neigh + math.exp(-shift)) + shift)
