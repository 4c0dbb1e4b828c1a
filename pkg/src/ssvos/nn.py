"""Small layer helpers over named parameters."""

from __future__ import annotations

from typing import Mapping

from . import tensor as T
from .tensor import Tensor

Weights = Mapping[str, Tensor]


def linear(x: Tensor, P: Weights, name: str, bias: bool = True) -> Tensor:
    """``x @ W (+ b)`` over the last axis of ``x``, any leading shape."""
    w = P[f"{name}.w"]
    lead = x.shape[:-1]
    x2 = x if x.ndim == 2 else T.reshape(x, (-1, x.shape[-1]))
    y = T.matmul(x2, w)
    if bias:
        y = y + T.broadcast_to(P[f"{name}.b"], y.shape)
    return y if x.ndim == 2 else T.reshape(y, lead + (w.shape[1],))


def norm(x: Tensor, P: Weights, name: str) -> Tensor:
    return T.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])


def channel_norm(x: Tensor, P: Weights, name: str) -> Tensor:
    """LayerNorm over the channel axis of a ``[c, h, w]`` map."""
    y = norm(T.transpose(x, (1, 2, 0)), P, name)
    return T.transpose(y, (2, 0, 1))


def conv(x: Tensor, P: Weights, name: str, stride: int = 1, pad: int | None = None) -> Tensor:
    k = P[f"{name}.w"]
    if pad is None:
        pad = k.shape[-1] // 2
    return T.conv2d(x, k, stride=stride, pad=pad, bias=P[f"{name}.b"])


def add_channel_bias(x: Tensor, v: Tensor) -> Tensor:
    """Add a ``[c]`` vector to every spatial position of a ``[c, h, w]`` map."""
    return x + T.broadcast_to(T.reshape(v, (v.shape[0], 1, 1)), x.shape)
