"""Mini ViT (cls + patch tokens) and a convolutional multi-scale stem."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import Weights, conv, linear, norm
from .params import ModelConfig
from .tensor import Tensor

STRIDES = (4, 8, 16)


@dataclass
class FramePyramid:
    """Everything the later stages need from one frame.

    ``frame_hw`` is the padded size the features were computed at; ``orig_hw``
    is the caller's frame size, used to crop outputs back.
    """

    cls_token: Tensor          # [D]
    patch_tokens: Tensor       # [G_h * G_w, D], row-major
    grid: tuple[int, int]
    scales: dict[int, Tensor]  # stride -> [C, h / stride, w / stride]
    frame_hw: tuple[int, int]
    orig_hw: tuple[int, int]
    frame: Tensor              # padded input frame [3, h, w]

    @property
    def patch_grid(self) -> Tensor:
        return T.reshape(self.patch_tokens, self.grid + (self.patch_tokens.shape[1],))


def pad_to_multiple(frame: Tensor, multiple: int = 16) -> Tensor:
    h, w = frame.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    return T.pad2d(frame, (0, ph), (0, pw), mode="reflect")


def patchify(frame: Tensor, P: Weights, patch: int = 8) -> tuple[Tensor, tuple[int, int]]:
    """Split ``[3,h,w]`` into non-overlapping patches and project each to D."""
    c, h, w = frame.shape
    if h < patch or w < patch:
        raise ShapeError(f"patchify: frame {h}x{w} smaller than one {patch}x{patch} patch")
    frame = pad_to_multiple(frame, patch)
    gh, gw = frame.shape[1] // patch, frame.shape[2] // patch
    x = T.reshape(frame, (c, gh, patch, gw, patch))
    x = T.transpose(x, (1, 3, 0, 2, 4))
    x = T.reshape(x, (gh * gw, c * patch * patch))
    return linear(x, P, "vit.patch"), (gh, gw)


def positional(P: Weights, grid: tuple[int, int]) -> Tensor:
    """Learned positional grid resized to the token grid, as ``[N, D]``."""
    pos = T.resize_bilinear(P["vit.pos"], *grid)
    d = pos.shape[0]
    return T.transpose(T.reshape(pos, (d, grid[0] * grid[1])), (1, 0))


def _attention(x: Tensor, P: Weights, prefix: str, heads: int) -> tuple[Tensor, Tensor]:
    n, d = x.shape
    dh = d // heads
    qkv = T.reshape(linear(x, P, f"{prefix}.qkv"), (n, 3, heads, dh))
    qkv = T.transpose(qkv, (1, 2, 0, 3))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    attn = T.softmax_lastdim(scores)
    out = T.reshape(T.transpose(T.matmul(attn, v), (1, 0, 2)), (n, d))
    return linear(out, P, f"{prefix}.proj"), attn


def vit_forward(tokens: Tensor, P: Weights, cfg: ModelConfig, grid: tuple[int, int] | None = None,
                pos: Tensor | None = None, return_attn: bool = False):
    """Pre-norm transformer over ``[cls] + tokens``.

    Positional embeddings come from ``pos`` when given, otherwise from the
    learned grid resized to ``grid``. Returns ``(cls [D], patches [N, D])``,
    plus the per-layer attention maps when ``return_attn`` is set.
    """
    n, d = tokens.shape
    if pos is None:
        if grid is None:
            side = int(round(math.sqrt(n)))
            grid = (side, n // side)
        pos = positional(P, grid)
    cls = T.reshape(P["vit.cls"] + P["vit.pos_cls"], (1, d))
    x = T.concat([cls, tokens + pos], axis=0)
    maps = []
    for i in range(cfg.depth):
        a, attn = _attention(norm(x, P, f"vit.{i}.ln1"), P, f"vit.{i}", cfg.heads)
        maps.append(attn)
        x = x + a
        h = T.gelu(linear(norm(x, P, f"vit.{i}.ln2"), P, f"vit.{i}.fc1"))
        x = x + linear(h, P, f"vit.{i}.fc2")
    x = norm(x, P, "vit.ln_f")
    cls_out = T.reshape(x[0:1], (d,))
    patches = x[1:]
    if return_attn:
        return cls_out, patches, maps
    return cls_out, patches


def pyramid_forward(frame: Tensor, P: Weights) -> dict[int, Tensor]:
    """Stride-4 stem followed by two stride-2 stages: features at strides 4, 8, 16."""
    h, w = frame.shape[-2:]
    if h % 16 or w % 16:
        raise ShapeError(f"pyramid_forward: {h}x{w} is not a multiple of 16; pad first")
    f4 = T.gelu(conv(frame, P, "pyr.stem", stride=4, pad=0))
    f4 = T.gelu(conv(f4, P, "pyr.stem2"))
    f8 = T.gelu(conv(f4, P, "pyr.s8", stride=2, pad=1))
    f16 = T.gelu(conv(f8, P, "pyr.s16", stride=2, pad=1))
    return {4: f4, 8: f8, 16: f16}


def encode_frame(frame, P: Weights, cfg: ModelConfig) -> FramePyramid:
    frame = frame if isinstance(frame, Tensor) else Tensor(frame)
    orig = tuple(frame.shape[-2:])
    padded = pad_to_multiple(frame, 16)
    tokens, grid = patchify(padded, P, cfg.patch)
    cls, patches = vit_forward(tokens, P, cfg, grid=grid)
    scales = pyramid_forward(padded, P)
    return FramePyramid(cls, patches, grid, scales, tuple(padded.shape[-2:]), orig, padded)


def check_pyramid(pyr: FramePyramid) -> None:
    """Assert the structural invariants of a pyramid (used by tests)."""
    h, w = pyr.frame_hw
    assert pyr.grid == (math.ceil(h / 8), math.ceil(w / 8))
    assert pyr.patch_tokens.shape[0] == pyr.grid[0] * pyr.grid[1]
    for s in STRIDES:
        assert pyr.scales[s].shape[1:] == (h // s, w // s)
    assert np.all(np.isfinite(pyr.cls_token.data))
