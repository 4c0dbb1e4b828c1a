"""Point-supervised training on short clips of synthetic sequences."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError
from .params import ModelConfig, Params, as_tensors, init_params
from .pipeline import EngineConfig, init_state, resize_nearest, step
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

CLIP_FRAMES = 8
MATCHING_FRAMES = 3
MAX_TARGETS = 3


@dataclass
class TrainConfig:
    iters: int = 2000
    lr: float = 2e-3
    lr_min_frac: float = 0.05
    optimizer: str = "adam"       # "sgd" (plain gradient descent) or "adam"
    clip_norm: float = 1.0
    max_span: int = 24            # largest frame distance covered by one clip
    matching_weight: float = 2.0
    scale_aug: tuple = (1.0,)     # per-clip input scales to draw from
    seed: int = 0
    log_every: int = 50


@dataclass
class TrainResult:
    params: Params
    losses: list = field(default_factory=list)
    targets_used: list = field(default_factory=list)
    seconds: float = 0.0


def sample_points(probs: np.ndarray, gt_mask: np.ndarray | None = None, n: int = 112,
                  seed=None) -> np.ndarray:
    """Pixel coordinates ``[m, 2]`` (row, col) for the point loss.

    Three quarters of the points are the most uncertain pixels (smallest
    margin between the two most probable classes), chosen from a pool of the
    ``3n`` most uncertain with random tie-breaking; the rest are uniform over
    the remaining pixels. ``m = min(n, pixels)``; points are distinct.
    """
    if n < 1:
        raise ContractError("sample_points: n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    _, h, w = probs.shape
    total = h * w
    n = min(n, total)
    top2 = np.sort(probs.reshape(probs.shape[0], -1), axis=0)[-2:]
    margin = top2[1] - top2[0]
    tiebreak = rng.random(total)
    pool = np.lexsort((tiebreak, margin))[:min(3 * n, total)]
    n_imp = int(round(0.75 * n))
    chosen = pool[:n_imp]
    rest = np.setdiff1d(np.arange(total), chosen, assume_unique=True)
    uniform = rng.choice(rest, size=n - n_imp, replace=False)
    flat = np.concatenate([chosen, uniform])
    return np.stack([flat // w, flat % w], axis=1)


def point_loss(logits: Tensor, gt: np.ndarray, points: np.ndarray) -> Tensor:
    """Mean cross-entropy over ``points``; ``gt`` holds class indices (0 = background)."""
    k, h, w = logits.shape
    flat_idx = points[:, 0] * w + points[:, 1]
    logp = T.log_softmax(T.reshape(logits, (k, h * w)), axis=0)
    picked = T.take(logp, flat_idx, axis=1)                                # [k, m]
    onehot = np.zeros((k, len(flat_idx)))
    onehot[gt.reshape(-1)[flat_idx], np.arange(len(flat_idx))] = 1.0
    return -T.sum(picked * Tensor(onehot)) * (1.0 / len(flat_idx))


def choose_targets(present_ids, rng: np.random.Generator, max_targets: int = MAX_TARGETS) -> list[int]:
    ids = sorted(int(i) for i in present_ids)
    if len(ids) <= max_targets:
        return ids
    return sorted(int(i) for i in rng.choice(ids, size=max_targets, replace=False))


def sample_clip(num_frames: int, rng: np.random.Generator, max_span: int) -> np.ndarray:
    """Eight sorted frame indices within a window of ``max_span`` frames (repeats if too short)."""
    if num_frames < CLIP_FRAMES:
        idx = np.sort(rng.integers(0, num_frames, size=CLIP_FRAMES))
        idx[0] = 0
        return idx
    span = min(max(max_span, CLIP_FRAMES), num_frames)
    start = int(rng.integers(0, num_frames - span + 1))
    rest = np.sort(rng.choice(np.arange(start + 1, start + span), size=CLIP_FRAMES - 1, replace=False))
    return np.concatenate([[start], rest])


def remap_labels(mask: np.ndarray, targets: list[int]) -> np.ndarray:
    out = np.zeros_like(mask)
    for k, oid in enumerate(targets, start=1):
        out[mask == oid] = k
    return out


def clip_loss(P, frames, masks, cfg: EngineConfig, model_cfg: ModelConfig, matching: set,
              rng: np.random.Generator, matching_weight: float = 2.0, scale: float = 1.0) -> Tensor:
    """Propagate from the first clip frame's ground truth through the rest.

    Frames use clip-local indices, so the memory cadence matches inference.
    ``matching`` frames weigh ``matching_weight`` in the loss.
    """
    ids = tuple(range(1, int(masks[0].max()) + 1))
    _, state = init_state(P, frames[0], masks[0], cfg, model_cfg, ids, scale=scale)
    terms, weights = [], []
    for t in range(1, len(frames)):
        res, state = step(state, frames[t], t)
        gt = masks[t] if scale == 1.0 else resize_nearest(masks[t], res.label_mask.shape)
        pts = sample_points(res.probs, gt, cfg.point_count, rng)
        wt = matching_weight if t in matching else 1.0
        terms.append(point_loss(res.logits, gt, pts) * wt)
        weights.append(wt)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / sum(weights))


class _Adam:
    def __init__(self, params: Params, b1=0.9, b2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.b1, self.b2, self.eps, self.t = b1, b2, eps, 0

    def update(self, params: Params, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def cosine_lr(it: int, iters: int, lr: float, min_frac: float) -> float:
    return lr * (min_frac + (1 - min_frac) * 0.5 * (1 + math.cos(math.pi * it / max(iters, 1))))


def train_step(params: Params, frames, masks, cfg: EngineConfig, model_cfg: ModelConfig,
               matching: set, rng: np.random.Generator, matching_weight: float = 2.0,
               scale: float = 1.0) -> tuple[float, dict]:
    """One taped forward/backward on a clip; returns ``(loss, grads)``."""
    P = as_tensors(params, requires_grad=True)
    with Tape() as tape:
        loss = clip_loss(P, frames, masks, cfg, model_cfg, matching, rng, matching_weight, scale)
        names = list(P)
        grads = tape.gradient(loss, [P[k] for k in names])
    return float(loss.data), dict(zip(names, grads))


def train_toy(dataset, iters: int | None = None, cfg: EngineConfig | None = None,
              train_cfg: TrainConfig | None = None, model_cfg: ModelConfig = ModelConfig(),
              params: Params | None = None, progress=None) -> TrainResult:
    """Train on ``dataset``: a list of ``(frames [T,3,h,w], masks [T,h,w])``.

    Each iteration draws a sequence and eight frames from it, keeps at most
    three of the objects visible in the first drawn frame, and marks three of
    the seven propagated frames as matching frames.
    """
    if not dataset:
        raise ContractError("train_toy: dataset is empty")
    cfg = cfg or EngineConfig(scales=(1.0,))
    train_cfg = train_cfg or TrainConfig()
    iters = train_cfg.iters if iters is None else iters
    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(model_cfg, seed=train_cfg.seed) if params is None else \
        {k: v.copy() for k, v in params.items()}
    adam = _Adam(params) if train_cfg.optimizer == "adam" else None
    result = TrainResult(params)
    t0 = time.time()
    for it in range(iters):
        for _ in range(100):
            frames, masks = dataset[int(rng.integers(len(dataset)))]
            idx = sample_clip(len(frames), rng, train_cfg.max_span)
            present = [i for i in np.unique(masks[idx[0]]) if i != 0]
            if present:
                break
        else:
            raise ContractError("train_toy: no sequence has a visible object")
        targets = choose_targets(present, rng)
        clip_masks = np.stack([remap_labels(masks[i], targets) for i in idx])
        matching = set(int(i) for i in rng.choice(np.arange(1, CLIP_FRAMES), MATCHING_FRAMES, replace=False))
        scale = float(rng.choice(train_cfg.scale_aug))
        loss, grads = train_step(params, frames[idx], clip_masks, cfg, model_cfg, matching, rng,
                                 train_cfg.matching_weight, scale)
        if train_cfg.clip_norm:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > train_cfg.clip_norm:
                grads = {k: g * (train_cfg.clip_norm / norm) for k, g in grads.items()}
        lr = cosine_lr(it, iters, train_cfg.lr, train_cfg.lr_min_frac)
        if adam is not None:
            adam.update(params, grads, lr)
        else:
            for k, g in grads.items():
                params[k] -= lr * g
        result.losses.append(loss)
        result.targets_used.append(len(targets))
        if progress is not None:
            progress(it, loss)
        if train_cfg.log_every and it % train_cfg.log_every == 0:
            log.info("iter %d loss %.4f lr %.2e (%.1fs)", it, loss, lr, time.time() - t0)
    result.seconds = time.time() - t0
    return result
