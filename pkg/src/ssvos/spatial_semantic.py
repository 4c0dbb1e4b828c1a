"""Spatial-semantic block.

Two stages, applied in order:

* semantic embedding: a frame-level summary of the ViT output (cls token
  joined with globally average-pooled patch tokens) is projected to each
  pyramid scale and added at every position, followed by LayerNorm;
* spatial dependency modelling: every pyramid location cross-attends over the
  3x3 neighbourhood of patch tokens around it, residual add, LayerNorm.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from . import tensor as T
from .backbone import STRIDES, FramePyramid
from .nn import Weights, add_channel_bias, channel_norm, linear, norm
from .tensor import Tensor

MASKED = -1e9

SSFeatures = dict  # stride -> Tensor [C, h, w]


def semantic_summary(cls: Tensor, patches: Tensor, P: Weights) -> Tensor:
    """``LN(W_s [cls ; GAP(patches)])``; invariant to the order of ``patches``."""
    gap = T.canonical_mean(patches, axis=0)
    joined = T.reshape(T.concat([cls, gap], axis=0), (1, -1))
    return T.reshape(norm(linear(joined, P, "ss.sem"), P, "ss.sem.ln"), (cls.shape[0],))


def semantic_embed(pyr: FramePyramid, P: Weights, patches: Tensor | None = None) -> SSFeatures:
    """Inject the semantic summary into every pyramid scale. Shapes are preserved."""
    s = semantic_summary(pyr.cls_token, pyr.patch_tokens if patches is None else patches, P)
    out = {}
    for stride in STRIDES:
        inj = T.reshape(linear(T.reshape(s, (1, -1)), P, f"ss.inj{stride}"), (-1,))
        out[stride] = channel_norm(add_channel_bias(pyr.scales[stride], inj), P, f"ss.ln{stride}")
    return out


@lru_cache(maxsize=64)
def window_index(h: int, w: int, stride: int, grid: tuple[int, int], patch: int = 8):
    """Flat patch indices of the 3x3 window for each scale location, plus an additive mask.

    A scale location maps to the patch whose area contains its centre. Window
    cells outside the grid point at token 0 and carry a large negative logit.
    """
    gh, gw = grid
    ys = np.minimum(np.floor((np.arange(h) + 0.5) * stride / patch).astype(int), gh - 1)
    xs = np.minimum(np.floor((np.arange(w) + 0.5) * stride / patch).astype(int), gw - 1)
    cy = np.repeat(ys, w)
    cx = np.tile(xs, h)
    off = np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)])
    ny = cy[:, None] + off[None, :, 0]
    nx = cx[:, None] + off[None, :, 1]
    valid = (ny >= 0) & (ny < gh) & (nx >= 0) & (nx < gw)
    idx = np.where(valid, ny * gw + nx, 0)
    mask = np.where(valid, 0.0, MASKED)
    idx.setflags(write=False)
    mask.setflags(write=False)
    return idx, mask


def local_fuse(scale_feat: Tensor, patches: Tensor, P: Weights, stride: int,
               return_attn: bool = False):
    """Windowed single-head cross-attention from scale locations to patch tokens.

    ``patches`` is the ``[G_h, G_w, D]`` token grid of the same frame.
    """
    c, h, w = scale_feat.shape
    gh, gw, d = patches.shape
    idx, mask = window_index(h, w, stride, (gh, gw))
    name = f"ss.lf{stride}"
    tokens = T.reshape(patches, (gh * gw, d))
    feats = T.reshape(T.transpose(scale_feat, (1, 2, 0)), (h * w, c))
    q = linear(feats, P, f"{name}.q", bias=False)
    k = linear(tokens, P, f"{name}.k", bias=False)
    v = linear(tokens, P, f"{name}.v", bias=False)
    a = q.shape[1]
    kw = T.take(k, idx, axis=0)                                  # [hw, 9, a]
    vw = T.take(v, idx, axis=0)
    scores = T.matmul(T.reshape(q, (h * w, 1, a)), T.transpose(kw, (0, 2, 1)))
    scores = T.reshape(scores, (h * w, 9)) * (1.0 / math.sqrt(a)) + Tensor(mask)
    attn = T.softmax_lastdim(scores)
    fused = T.reshape(T.matmul(T.reshape(attn, (h * w, 1, 9)), vw), (h * w, a))
    upd = linear(fused, P, f"{name}.o")
    upd = T.reshape(T.transpose(upd, (1, 0)), (c, h, w))
    out = channel_norm(scale_feat + upd, P, f"{name}.ln")
    if return_attn:
        return out, attn
    return out


def ss_block_forward(pyr: FramePyramid, P: Weights) -> SSFeatures:
    enriched = semantic_embed(pyr, P)
    grid = pyr.patch_grid
    return {s: local_fuse(enriched[s], grid, P, s) for s in STRIDES}
