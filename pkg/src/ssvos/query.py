"""Per-object target queries refined from their most discriminative features.

For each object the correlated map ``R`` (``[C, h, w]``) is summarised into
one descriptor per channel: the feature vector pooled under that channel's
spatial softmax. The channel whose descriptor is most cosine-similar to the
current query is the discriminative one; the pixels where it fires strongest
feed a residual cross-attention update of the query.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import Weights, linear, norm
from .tensor import Tensor

COS_EPS = 1e-12
MIN_SUPPORT_PIXELS = 4


@dataclass
class TargetQuery:
    object_id: int
    q: Tensor                 # [C]
    last_update_frame: int = 0
    fallback: bool = False    # initialised from the global mean


def support_weights(mask: np.ndarray, object_id: int, factor: int = 16) -> np.ndarray:
    """Fraction of each stride-``factor`` cell covered by the object.

    Cells with fewer than ``MIN_SUPPORT_PIXELS`` object pixels do not count.
    """
    h, w = mask.shape
    cells = (mask == object_id).reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    cells = np.where(cells >= MIN_SUPPORT_PIXELS, cells, 0)
    return cells / float(factor * factor)


def init_queries(feat16: Tensor, mask: np.ndarray, object_ids, P: Weights,
                 frame_idx: int = 0) -> list[TargetQuery]:
    """Masked average of stride-16 features per object, linearly projected.

    Objects whose support vanishes at stride 16 fall back to the global mean.
    """
    if len(object_ids) == 0:
        raise ContractError("init_queries: the first mask contains no objects")
    c, h, w = feat16.shape
    flat = T.reshape(feat16, (c, h * w))
    queries = []
    for oid in object_ids:
        wts = support_weights(mask, oid).reshape(-1)
        fallback = wts.sum() == 0
        wts = np.full(h * w, 1.0 / (h * w)) if fallback else wts / wts.sum()
        pooled = T.matmul(flat, Tensor(wts[:, None]))                 # [c, 1]
        q = linear(T.reshape(pooled, (1, c)), P, "qry.init")
        queries.append(TargetQuery(int(oid), T.reshape(q, (-1,)), frame_idx, bool(fallback)))
    return queries


def channel_descriptors(R: Tensor) -> Tensor:
    """``[C, C]``; row ``c`` is ``sum_p softmax_p(R[c]) * R[:, p]``."""
    c = R.shape[0]
    flat = T.reshape(R, (c, -1))
    return T.matmul(T.softmax_lastdim(flat), T.transpose(flat, (1, 0)))


def cosine_scores(q: np.ndarray, D: np.ndarray) -> np.ndarray:
    # row-wise reductions rather than BLAS gemv: identical rows must score
    # bitwise-identically so that exact ties resolve to the lowest index
    D = np.ascontiguousarray(D)
    qn = np.sqrt(np.sum(q * q))
    dn = np.sqrt(np.sum(D * D, axis=1))
    ok = (dn >= COS_EPS) & (qn >= COS_EPS)
    out = np.zeros(D.shape[0])
    out[ok] = np.sum(D[ok] * q[None, :], axis=1) / (dn[ok] * qn)
    return out


def select_discriminative(q, D) -> tuple[int, np.ndarray]:
    """Channel whose descriptor is most cosine-similar to ``q`` (lowest index on ties)."""
    qd = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64)
    Dd = D.data if isinstance(D, Tensor) else np.asarray(D, dtype=np.float64)
    scores = cosine_scores(qd, Dd)
    c_star = int(np.argmax(scores))
    return c_star, Dd[c_star]


def salient_order(R: np.ndarray, c_star: int) -> np.ndarray:
    act = R[c_star].reshape(-1)
    pos = np.arange(act.size)
    return np.lexsort((pos, -act))


def salient_pixels(R: Tensor, c_star: int, k: int = 16) -> Tensor:
    """Feature vectors at the ``k`` positions where channel ``c_star`` is largest."""
    c = R.shape[0]
    flat = T.transpose(T.reshape(R, (c, -1)), (1, 0))                 # [hw, C]
    order = salient_order(R.data, c_star)[:min(k, flat.shape[0])]
    return T.take(flat, order, axis=0)


def query_update(q: Tensor, salient: Tensor, P: Weights, return_attn: bool = False):
    """Residual cross-attention of the query over the salient features, then LayerNorm."""
    if salient.shape[0] == 0:
        raise ContractError("query_update: no salient features")
    c = q.shape[0]
    qq = linear(T.reshape(q, (1, c)), P, "qry.upd.q", bias=False)
    k = linear(salient, P, "qry.upd.k", bias=False)
    v = linear(salient, P, "qry.upd.v", bias=False)
    attn = T.softmax_lastdim(T.matmul(qq, T.transpose(k, (1, 0))) * (1.0 / math.sqrt(c)))
    upd = linear(T.matmul(attn, v), P, "qry.upd.o")
    out = T.reshape(norm(T.reshape(q, (1, c)) + upd, P, "qry.upd.ln"), (c,))
    if return_attn:
        return out, attn
    return out


def refine_query(tq: TargetQuery, R: Tensor, P: Weights, frame_idx: int, k: int = 16) -> dict:
    """Full discriminative update of one query in place; returns a log record."""
    D = channel_descriptors(R)
    c_star, _ = select_discriminative(tq.q, D)
    top_cos = float(cosine_scores(tq.q.data, D.data)[c_star])
    tq.q = query_update(tq.q, salient_pixels(R, c_star, k), P)
    tq.last_update_frame = frame_idx
    return {"frame_idx": frame_idx, "object_id": tq.object_id, "c_star": c_star, "cosine": top_cos}
