"""End-to-end inference: decode, per-frame step, multi-scale/flip fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .backbone import encode_frame
from .errors import ConfigError, ContractError, ShapeError
from .memory import MemoryBank, encode_key, encode_key_value, memory_read, memory_write, should_write
from .nn import Weights, conv, linear
from .params import ModelConfig, Params, as_tensors
from .query import TargetQuery, init_queries, refine_query
from .spatial_semantic import ss_block_forward
from .tensor import Tensor


@dataclass
class EngineConfig:
    """Inference settings. ``mem_cap`` counts frames' worth of stride-16 elements."""

    mem_interval: int = 3
    mem_cap: int = 16
    scales: tuple = (1.0, 1.5)
    flip_fusion: bool = False
    point_count: int = 112
    seed: int = 0

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if self.mem_interval < 1:
            raise ConfigError(f"mem_interval must be >= 1, got {self.mem_interval}")
        if self.mem_cap < 1:
            raise ConfigError(f"mem_cap must be >= 1, got {self.mem_cap}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError(f"scales must be non-empty and positive, got {self.scales}")
        if self.point_count < 1:
            raise ConfigError("point_count must be >= 1")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class SegResult:
    probs: np.ndarray            # [n_obj + 1, h, w], background first
    label_mask: np.ndarray       # [h, w] object ids, 0 = background
    object_ids: tuple
    skipped_write: bool = False
    logits: Tensor | None = field(default=None, repr=False, compare=False)


@dataclass
class SequenceState:
    P: Weights
    model_cfg: ModelConfig
    cfg: EngineConfig
    object_ids: tuple
    bank: MemoryBank
    queries: list
    input_hw: tuple
    branch_hw: tuple
    scale: float = 1.0
    flip: bool = False
    frame_log: list = field(default_factory=list)
    query_log: list = field(default_factory=list)


# ---------------------------------------------------------------- geometry helpers

def branch_size(hw, scale: float) -> tuple[int, int]:
    return max(1, int(round(hw[0] * scale))), max(1, int(round(hw[1] * scale)))


def resize_nearest(mask: np.ndarray, out_hw) -> np.ndarray:
    h, w = mask.shape
    if (h, w) == tuple(out_hw):
        return mask.copy()
    rows = np.minimum(np.floor((np.arange(out_hw[0]) + 0.5) * h / out_hw[0]).astype(int), h - 1)
    cols = np.minimum(np.floor((np.arange(out_hw[1]) + 0.5) * w / out_hw[1]).astype(int), w - 1)
    return mask[rows[:, None], cols[None, :]]


def pad_mask(mask: np.ndarray, multiple: int = 16) -> np.ndarray:
    h, w = mask.shape
    return np.pad(mask, ((0, (-h) % multiple), (0, (-w) % multiple)), mode="reflect")


def to_branch_frame(frame, hw, flip: bool) -> Tensor:
    t = frame if isinstance(frame, Tensor) else Tensor(frame)
    t = T.resize_bilinear(t, *hw)
    return T.flip_last(t) if flip else t


def to_branch_mask(mask: np.ndarray, hw, flip: bool) -> np.ndarray:
    m = resize_nearest(mask, hw)
    return m[:, ::-1].copy() if flip else m


def labels_from_probs(probs: np.ndarray, object_ids) -> np.ndarray:
    lut = np.array((0,) + tuple(object_ids))
    return lut[np.argmax(probs, axis=0)]


def one_hot_result(mask: np.ndarray, object_ids) -> SegResult:
    probs = np.stack([mask == 0] + [mask == o for o in object_ids]).astype(np.float64)
    return SegResult(probs, mask.astype(np.int64).copy(), tuple(object_ids), skipped_write=False)


# ---------------------------------------------------------------- decoder

def _per_object(x: Tensor, n: int) -> Tensor:
    return T.broadcast_to(T.reshape(x, (1,) + x.shape), (n,) + x.shape)


def decode_logits(R: Tensor, queries: list[TargetQuery], feats, frame: Tensor, P: Weights,
                  logit_override: np.ndarray | None = None) -> Tensor:
    """Background-first logits ``[n_obj + 1, H, W]`` at the padded frame resolution.

    The stride-16 path sees the correlated map plus a query-response channel
    ``<q, W_m R[:, p]>``; upsampling stages take skips from the stride-8 and
    stride-4 features (the latter alongside a fine query-response channel),
    and a last full-resolution stage sees the frame pixels.
    """
    n, c, h16, w16 = R.shape
    if n != len(queries):
        raise ContractError(f"decode: {n} correlated maps for {len(queries)} queries")
    _, H, W = frame.shape
    Q = T.stack([tq.q for tq in queries])                                 # [n, C]

    u = T.matmul(Q, T.transpose(P["dec.m.w"], (1, 0)))                     # W_m^T-side projection
    resp = T.matmul(T.reshape(u, (n, 1, c)), T.reshape(R, (n, c, h16 * w16)))
    resp = T.reshape(resp, (n, 1, h16, w16)) * (1.0 / math.sqrt(c))
    x = T.gelu(conv(T.concat([R, resp], axis=1), P, "dec.d16"))

    f8 = feats[8]
    x = T.resize_bilinear(x, *f8.shape[1:])
    x = T.gelu(conv(T.concat([x, _per_object(f8, n)], axis=1), P, "dec.d8"))

    f4 = feats[4]
    c4, h4, w4 = f4.shape
    fq = linear(Q, P, "dec.fq", bias=False)                                # [n, F]
    ff = linear(T.transpose(T.reshape(f4, (c4, h4 * w4)), (1, 0)), P, "dec.ff", bias=False)
    fine = T.matmul(fq, T.transpose(ff, (1, 0))) * (1.0 / math.sqrt(fq.shape[1]))
    fine = T.reshape(fine, (n, 1, h4, w4))
    x = T.resize_bilinear(x, h4, w4)
    x = T.gelu(conv(T.concat([x, _per_object(f4, n), fine], axis=1), P, "dec.d4"))
    x = conv(x, P, "dec.sq")

    x = T.resize_bilinear(x, H, W)
    x = T.gelu(conv(T.concat([x, _per_object(frame, n)], axis=1), P, "dec.full1"))
    obj = T.reshape(conv(x, P, "dec.full2"), (n, H, W))
    if logit_override is not None:
        obj = Tensor(np.broadcast_to(logit_override, (n, H, W)))
    bg = T.broadcast_to(T.reshape(P["dec.bg"], (1, 1, 1)), (1, H, W))
    return T.concat([bg, obj], axis=0)


def decode_masks(R: Tensor, queries: list[TargetQuery], feats, frame: Tensor, P: Weights,
                 object_ids, out_hw=None, logit_override=None) -> SegResult:
    logits = decode_logits(R, queries, feats, frame, P, logit_override)
    if out_hw is not None:
        logits = logits[:, :out_hw[0], :out_hw[1]]
    probs = T.softmax(logits, axis=0)
    return SegResult(probs.data, labels_from_probs(probs.data, object_ids), tuple(object_ids),
                     logits=logits)


# ---------------------------------------------------------------- per-frame engine

def _weights(params) -> Weights:
    if isinstance(params, dict) and params and isinstance(next(iter(params.values())), np.ndarray):
        return as_tensors(params)
    return params


def init_state(params, frame0, mask0: np.ndarray, cfg: EngineConfig, model_cfg: ModelConfig = ModelConfig(),
               object_ids=None, scale: float = 1.0, flip: bool = False) -> tuple[SegResult, SequenceState]:
    """Encode the annotated first frame into a fresh branch state."""
    P = _weights(params)
    mask0 = np.asarray(mask0)
    if object_ids is None:
        object_ids = tuple(int(i) for i in np.unique(mask0) if i != 0)
    if not object_ids:
        raise ContractError("first mask contains no objects")
    input_hw = tuple(mask0.shape)
    if tuple(frame0.shape[-2:]) != input_hw:
        raise ShapeError(f"frame {frame0.shape} and mask {mask0.shape} disagree")
    hw = branch_size(input_hw, scale)
    frame_t = to_branch_frame(frame0, hw, flip)
    bmask = to_branch_mask(mask0, hw, flip)
    pyr = encode_frame(frame_t, P, model_cfg)
    feats = ss_block_forward(pyr, P)
    h16, w16 = feats[16].shape[1:]
    bank = MemoryBank(cap=cfg.mem_cap * h16 * w16, n_objects=len(object_ids))
    pm = pad_mask(bmask)
    key, values = encode_key_value(feats, pm, object_ids, P)
    memory_write(bank, key, values, 0)
    queries = init_queries(feats[16], pm, object_ids, P, frame_idx=0)
    state = SequenceState(P, model_cfg, cfg, tuple(object_ids), bank, queries, input_hw, hw, scale, flip)
    state.frame_log.append({"event": "frame", "frame_idx": 0, "size": bank.size, "cap": bank.cap,
                            "wrote": True, "fg_pixels": int(np.count_nonzero(bmask))})
    return one_hot_result(bmask, object_ids), state


def step(state: SequenceState, frame, frame_idx: int, logit_override=None) -> tuple[SegResult, SequenceState]:
    """Segment one frame in the branch's coordinates, then maybe write memory."""
    if tuple(frame.shape[-2:]) != state.input_hw:
        raise ShapeError(f"frame {tuple(frame.shape[-2:])} differs from first frame {state.input_hw}")
    P = state.P
    frame_t = to_branch_frame(frame, state.branch_hw, state.flip)
    pyr = encode_frame(frame_t, P, state.model_cfg)
    feats = ss_block_forward(pyr, P)
    qkey = encode_key(feats[16], P)
    R = memory_read(state.bank, qkey, feats[16], P)
    res = decode_masks(R, state.queries, feats, pyr.frame, P, state.object_ids,
                       out_hw=state.branch_hw, logit_override=logit_override)
    wrote = should_write(frame_idx, res.label_mask, state.cfg.mem_interval)
    if wrote:
        pm = pad_mask(res.label_mask)
        key, values = encode_key_value(feats, pm, state.object_ids, P)
        memory_write(state.bank, key, values, frame_idx)
        k = state.model_cfg.salient_k
        for i, tq in enumerate(state.queries):
            state.query_log.append(refine_query(tq, R[i], P, frame_idx, k))
    res.skipped_write = not wrote
    state.frame_log.append({"event": "frame", "frame_idx": frame_idx, "size": state.bank.size,
                            "cap": state.bank.cap, "wrote": wrote,
                            "fg_pixels": int(np.count_nonzero(res.label_mask))})
    return res, state


def to_input_coords(probs: np.ndarray, state: SequenceState) -> np.ndarray:
    p = probs[:, :, ::-1] if state.flip else probs
    return T.resize_bilinear(Tensor(p), *state.input_hw).data


def multiscale_flip_fuse(frame, states: list[SequenceState], frame_idx: int) -> SegResult:
    """Run every branch on ``frame`` and average their probabilities at input resolution."""
    maps = []
    wrote_any = False
    for st in states:
        res, _ = step(st, frame, frame_idx)
        wrote_any |= not res.skipped_write
        maps.append(to_input_coords(res.probs, st))
    if len(maps) == 1:
        fused = maps[0]
    else:
        fused = np.sum(maps, axis=0) / len(maps)
        fused = fused / fused.sum(axis=0, keepdims=True)
    ids = states[0].object_ids
    return SegResult(fused, labels_from_probs(fused, ids), ids, skipped_write=not wrote_any)


def branches(cfg: EngineConfig) -> list[tuple[float, bool]]:
    flips = (False, True) if cfg.flip_fusion else (False,)
    return [(s, f) for s in cfg.scales for f in flips]


def infer_sequence(frames, first_mask: np.ndarray, cfg: EngineConfig, params: Params,
                   model_cfg: ModelConfig = ModelConfig(), memlog: list | None = None,
                   query_log: list | None = None) -> list[SegResult]:
    """Segment every frame given the first-frame annotation.

    ``memlog`` / ``query_log``, when given, receive the per-branch memory and
    query-update records.
    """
    first_mask = np.asarray(first_mask)
    object_ids = tuple(int(i) for i in np.unique(first_mask) if i != 0)
    if not object_ids:
        raise ContractError("infer_sequence: first mask is empty")
    if len(frames) < 1:
        raise ContractError("infer_sequence: no frames")
    P = as_tensors(params) if isinstance(next(iter(params.values())), np.ndarray) else params
    states = [init_state(P, frames[0], first_mask, cfg, model_cfg, object_ids, s, f)[1]
              for s, f in branches(cfg)]
    results = [one_hot_result(first_mask, object_ids)]
    for t in range(1, len(frames)):
        results.append(multiscale_flip_fuse(frames[t], states, t))
    if memlog is not None:
        entries = []
        for b, st in enumerate(states):
            tag = {"branch": b, "scale": st.scale, "flip": st.flip}
            entries.extend({**e, **tag} for e in st.bank.events + st.frame_log)
        # chronological; within a frame: branch, then consolidate < write < frame summary
        rank = {"consolidate": 0, "write": 1, "frame": 2}
        memlog.extend(sorted(entries, key=lambda e: (e["frame_idx"], e["branch"], rank[e["event"]])))
    if query_log is not None:
        for b, st in enumerate(states):
            query_log.extend({**e, "branch": b} for e in st.query_log)
    return results
