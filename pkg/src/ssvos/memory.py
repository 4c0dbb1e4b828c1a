"""Pixel-level key/value memory with a write cadence and bounded capacity.

Each written frame contributes one element per stride-16 location. Elements
carry a usage accumulator (total affinity mass received from reads) and the
index of the frame they came from. When the bank grows past ``cap`` it is
consolidated: elements of the first written frame are pinned, the rest are
ranked by usage, and the losers are merged into their nearest-key survivor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .nn import Weights, conv
from .tensor import Tensor


@dataclass
class MemoryBank:
    cap: int
    n_objects: int
    key_blocks: list = field(default_factory=list)     # Tensor [C_k, n_i]
    value_blocks: list = field(default_factory=list)   # Tensor [n_obj, C_v, n_i]
    usage: np.ndarray = field(default_factory=lambda: np.zeros(0))
    provenance: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    write_log: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.usage.shape[0])

    @property
    def pinned_frame(self) -> int | None:
        return self.write_log[0] if self.write_log else None

    def keys(self) -> Tensor:
        blocks = self.key_blocks
        return blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=1)

    def values(self) -> Tensor:
        blocks = self.value_blocks
        return blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=2)


def area_max_downsample(binary: np.ndarray, factor: int = 16) -> np.ndarray:
    """``[..., H, W]`` boolean -> ``[..., H/f, W/f]`` float, 1 where any pixel is set."""
    h, w = binary.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"mask {h}x{w} not divisible by {factor}")
    r = binary.reshape(binary.shape[:-2] + (h // factor, factor, w // factor, factor))
    return r.max(axis=(-3, -1)).astype(np.float64)


def object_planes(mask: np.ndarray, object_ids) -> np.ndarray:
    return np.stack([mask == oid for oid in object_ids]).astype(bool)


def encode_key(feat16: Tensor, P: Weights) -> Tensor:
    return conv(feat16, P, "mem.key")


def encode_key_value(feat, mask: np.ndarray, object_ids, P: Weights) -> tuple[Tensor, Tensor]:
    """Key ``[C_k, h16, w16]`` and per-object values ``[n_obj, C_v, h16, w16]``.

    ``feat`` maps stride to feature map; ``mask`` is a label map at the
    feature frame's (padded) resolution.
    """
    f16 = feat[16]
    c16, h16, w16 = f16.shape
    if mask.shape != (16 * h16, 16 * w16):
        raise ShapeError(f"mask shape {mask.shape} does not match frame {(16 * h16, 16 * w16)}")
    key = encode_key(f16, P)
    planes = area_max_downsample(object_planes(mask, object_ids))      # [n, h16, w16]
    n = len(object_ids)
    x = T.concat([T.broadcast_to(T.reshape(f16, (1, c16, h16, w16)), (n, c16, h16, w16)),
                  Tensor(planes[:, None])], axis=1)
    value = conv(T.gelu(conv(x, P, "mem.val1")), P, "mem.val2")
    return key, value


def should_write(frame_idx: int, predicted_mask: np.ndarray, interval: int = 3) -> bool:
    """First frame always; afterwards every ``interval``-th frame that shows a target."""
    if frame_idx == 0:
        return True
    return frame_idx % interval == 0 and bool(np.any(predicted_mask > 0))


def memory_write(bank: MemoryBank, key: Tensor, values: Tensor, frame_idx: int) -> MemoryBank:
    if bank.write_log and frame_idx <= bank.write_log[-1]:
        raise ContractError(f"memory_write: frame {frame_idx} not after last write {bank.write_log[-1]}")
    ck = key.shape[0]
    n_new = key.shape[1] * key.shape[2]
    if values.shape[0] != bank.n_objects:
        raise ContractError(f"memory_write: {values.shape[0]} value maps for {bank.n_objects} objects")
    before = bank.size
    bank.key_blocks.append(T.reshape(key, (ck, n_new)))
    bank.value_blocks.append(T.reshape(values, values.shape[:2] + (n_new,)))
    bank.usage = np.concatenate([bank.usage, np.zeros(n_new)])
    bank.provenance = np.concatenate([bank.provenance, np.full(n_new, frame_idx, dtype=int)])
    bank.write_log.append(frame_idx)
    if bank.size > bank.cap:
        consolidate(bank, frame_idx)
    bank.events.append({"event": "write", "frame_idx": frame_idx, "n_before": before,
                        "n_after": bank.size})
    return bank


def read_affinity(bank: MemoryBank, query_key: Tensor) -> Tensor:
    """Softmax over memory elements for every query location: ``[hw, N]``."""
    ck = query_key.shape[0]
    q = T.reshape(query_key, (ck, -1))
    logits = T.matmul(T.transpose(q, (1, 0)), bank.keys()) * (1.0 / math.sqrt(ck))
    return T.softmax_lastdim(logits)


def memory_read(bank: MemoryBank, query_key: Tensor, query_feat: Tensor, P: Weights,
                update_usage: bool = True, return_affinity: bool = False):
    """Correlated maps ``[n_obj, C, h16, w16]`` for the query frame."""
    if bank.size == 0:
        raise ContractError("memory_read: bank is empty")
    _, h, w = query_key.shape
    aff = read_affinity(bank, query_key)                               # [hw, N]
    vals = bank.values()                                               # [n, C_v, N]
    n, cv, m = vals.shape
    aff_t = T.broadcast_to(T.reshape(T.transpose(aff, (1, 0)), (1, m, h * w)), (n, m, h * w))
    readout = T.reshape(T.matmul(vals, aff_t), (n, cv, h, w))
    c16 = query_feat.shape[0]
    qf = T.broadcast_to(T.reshape(query_feat, (1, c16, h, w)), (n, c16, h, w))
    corr = conv(T.concat([readout, qf], axis=1), P, "mem.fuse")
    if update_usage:
        bank.usage = bank.usage + aff.data.sum(axis=0)
    if return_affinity:
        return corr, aff
    return corr


def consolidate(bank: MemoryBank, frame_idx: int | None = None) -> MemoryBank:
    """Shrink the bank to ``cap`` elements. No-op when already within capacity."""
    n = bank.size
    if n <= bank.cap:
        return bank
    pinned = bank.provenance == bank.pinned_frame
    n_pinned = int(pinned.sum())
    if bank.cap < n_pinned:
        raise ConfigError(f"memory cap {bank.cap} smaller than the {n_pinned} pinned first-frame elements")
    keys = bank.keys().data
    vals = bank.values().data
    usage = bank.usage
    cand = np.flatnonzero(~pinned)
    order = cand[np.lexsort((cand, -usage[cand]))]
    n_keep = bank.cap - n_pinned
    keep, evict = order[:n_keep], order[n_keep:]

    new_vals = vals.copy()
    new_usage = usage.copy()
    if keep.size and evict.size:
        kk = keys[:, keep]
        ke = keys[:, evict]
        d2 = (ke * ke).sum(0)[:, None] - 2 * ke.T @ kk + (kk * kk).sum(0)[None, :]
        target = keep[np.argmin(d2, axis=1)]
        for s in np.unique(target):
            members = np.concatenate([[s], evict[target == s]])
            wts = usage[members]
            total = wts.sum()
            wts = wts / total if total > 0 else np.full(members.size, 1.0 / members.size)
            new_vals[:, :, s] = np.tensordot(vals[:, :, members], wts, axes=([2], [0]))
            new_usage[s] = usage[members].sum()

    survivors = np.sort(np.concatenate([np.flatnonzero(pinned), keep]))
    bank.key_blocks = [Tensor(keys[:, survivors])]
    bank.value_blocks = [Tensor(new_vals[:, :, survivors])]
    bank.usage = new_usage[survivors]
    bank.provenance = bank.provenance[survivors]
    bank.events.append({"event": "consolidate", "frame_idx": frame_idx, "n_before": n,
                        "n_after": bank.size})
    return bank
