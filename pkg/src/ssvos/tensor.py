"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Operations are plain functions over :class:`Tensor`. When a :class:`Tape` is
active and at least one operand requires a gradient, the operation appends a
node to the tape; ``Tape.gradient`` then walks the nodes backwards.

There is no implicit broadcasting. Elementwise binary operations require equal
shapes; use :func:`broadcast_to` to make intent explicit. Python scalars are
the one exception.

Example::

    x = Tensor(np.arange(3.0), requires_grad=True)
    with Tape() as tape:
        y = sum(x * x)
    (gx,) = tape.gradient(y, [x])   # 2 * x
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor", "Tape", "no_grad_tensor", "add", "sub", "mul", "div", "neg",
    "scale", "add_scalar", "matmul", "transpose", "reshape", "broadcast_to",
    "sum", "mean", "exp", "log", "tanh", "gelu", "sigmoid", "softmax",
    "softmax_lastdim", "log_softmax", "layer_norm", "conv2d", "resize_bilinear",
    "pad2d", "flip_last", "concat", "stack", "take", "getitem", "canonical_mean",
    "fd_gradcheck",
]

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable float64 array that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)


def no_grad_tensor(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records operations for one backward pass.

    A tape is single-threaded and is meant to live for one training step.
    Tapes nest; the innermost active tape receives new nodes.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def clear(self) -> None:
        self.nodes.clear()

    def gradient(self, target: Tensor, sources: Sequence[Tensor],
                 seed: np.ndarray | None = None) -> list[np.ndarray]:
        """Gradients of ``target`` with respect to each of ``sources``.

        ``target`` must be scalar unless ``seed`` (the upstream gradient) is
        given. Sources the target does not depend on get zero arrays.
        """
        if seed is None:
            if target.size != 1:
                raise ContractError(f"gradient target must be scalar, got shape {target.shape}")
            seed = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=np.float64)}
        wanted = {id(s) for s in sources}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            # intermediate tensors may also be requested as sources
            if id(node.out) in wanted:
                grads[id(node.out)] = g
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        tape.nodes.append(_Node(out, inputs, backward))
        return out
    return Tensor(out_data)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    return _record(a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _record(a.data + s, (a,), lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (smooth everywhere, which keeps gradchecks clean)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return _record(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from None
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _record(out, (a,), backward)


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/int) or integer-array indexing."""
    src = a.shape
    out = a.data[key]

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, key, g) if _is_advanced(key) else full.__setitem__(key, g)
        return (full,)

    return _record(np.array(out), (a,), backward)


def _is_advanced(key) -> bool:
    if isinstance(key, tuple):
        return any(isinstance(k, (np.ndarray, list)) for k in key)
    return isinstance(key, (np.ndarray, list))


def take(a: Tensor, idx: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.intp)
    axis = axis % a.ndim
    src = a.shape
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        # move gathered axes to the front, then scatter-add rows
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        gm = gm.reshape(idx.size, -1)
        n = src[axis]
        if idx.size > 4 * n:
            onehot = np.zeros((n, idx.size))
            onehot[idx.reshape(-1), np.arange(idx.size)] = 1.0
            acc = onehot @ gm
        else:
            acc = np.zeros((n, gm.shape[1]))
            np.add.at(acc, idx.reshape(-1), gm)
        rest = src[:axis] + src[axis + 1:]
        acc = acc.reshape((n,) + rest)
        return (np.moveaxis(acc, 0, axis),)

    return _record(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in tensors]} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _record(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tensors, backward)


def flip_last(a: Tensor) -> Tensor:
    """Reverse the last axis (horizontal flip for ``[..., h, w]`` images)."""
    return _record(a.data[..., ::-1].copy(), (a,), lambda g: (g[..., ::-1],))


def pad2d(a: Tensor, pad_h: tuple[int, int], pad_w: tuple[int, int], mode: str = "reflect") -> Tensor:
    """Pad the last two axes. ``mode`` is ``"reflect"`` or ``"constant"`` (zeros)."""
    if not any(pad_h) and not any(pad_w):
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [tuple(pad_h), tuple(pad_w)]
    h, w = a.shape[-2:]
    if mode == "reflect":
        # reflect padding is linear; build index maps so the adjoint is a scatter-add.
        # Pads wider than the input keep reflecting back and forth.
        rows = np.pad(np.arange(h), pad_h, mode="reflect")
        cols = np.pad(np.arange(w), pad_w, mode="reflect")
        out = a.data[..., rows[:, None], cols[None, :]]

        def backward(g):
            gr = _scatter_axis(g, rows, h, axis=-2)
            return (_scatter_axis(gr, cols, w, axis=-1),)

        return _record(out, (a,), backward)
    if mode != "constant":
        raise ValueError(f"unknown pad mode {mode!r}")
    out = np.pad(a.data, widths)
    sl = (Ellipsis, slice(pad_h[0], pad_h[0] + h), slice(pad_w[0], pad_w[0] + w))
    return _record(out, (a,), lambda g: (g[sl],))


def _scatter_axis(g: np.ndarray, index: np.ndarray, n: int, axis: int) -> np.ndarray:
    onehot = np.zeros((n, index.size))
    onehot[index, np.arange(index.size)] = 1.0
    gm = np.moveaxis(g, axis, -1)
    return np.moveaxis(gm @ onehot.T, -1, axis)


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def canonical_mean(a: Tensor, axis: int = 0) -> Tensor:
    """Mean along ``axis`` that is bitwise invariant to permutations along it.

    Values are sorted along the axis before summation, so the floating-point
    accumulation order does not depend on the input order.
    """
    axis = axis % a.ndim
    n = a.shape[axis]
    out = np.sort(a.data, axis=axis).sum(axis=axis) / n
    src = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, src).copy(),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands, or batched with identical leading extents."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _record(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------- normalisation / softmax

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-subtracted softmax over the last axis."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim: needs a non-empty last axis, got {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), backward)


LN_EPS = 1e-5


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs channels {c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- convolution / resampling

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of ``[c_in,h,w]`` (or ``[n,c_in,h,w]``) with ``[c_out,c_in,kh,kw]``.

    Zero padding. Raises :class:`ShapeError` when the output extent is not
    integral, instead of silently flooring.
    """
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks x{x.shape} kernel{kernel.shape}")
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    num_h, num_w = h + 2 * pad - kh, w + 2 * pad - kw
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ShapeError(f"conv2d: output extent not integral for input {h}x{w}, "
                         f"kernel {kh}x{kw}, stride {stride}, pad {pad}")
    ho, wo = num_h // stride + 1, num_w // stride + 1
    # channel-major layout so the batch folds into one GEMM
    xt = xd.transpose(1, 0, 2, 3)
    xp = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xt
    if kh == kw == 1 and stride == 1:
        cols = np.ascontiguousarray(xp).reshape(cin, n * ho * wo)
    else:
        cols = np.empty((cin, kh, kw, n, ho, wo))
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(cin * kh * kw, n * ho * wo)
    wmat = kernel.data.reshape(cout, -1)
    out = wmat @ cols                                             # [cout, n*ho*wo]
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias {bias.shape} vs {cout} output channels")
        out += bias.data[:, None]
    out = out.reshape(cout, n, ho, wo)
    out = out[:, 0] if not batched else np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = (g[:, None] if not batched else g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        dw = (g2 @ cols.T).reshape(kernel.shape)
        dx = None
        if x.requires_grad and stride == 1 and kh - 1 >= pad and kw - 1 >= pad:
            # full correlation of g with the flipped kernel, again as one GEMM
            gt = g2.reshape(cout, n, ho, wo)
            ph, pw = kh - 1 - pad, kw - 1 - pad
            gp = np.pad(gt, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else gt
            gcols = np.empty((cout, kh, kw, n, h, w))
            for i in range(kh):
                for j in range(kw):
                    gcols[:, i, j] = gp[:, :, i:i + h, j:j + w]
            wflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            dx = (wflip @ gcols.reshape(cout * kh * kw, n * h * w)).reshape(cin, n, h, w)
            dx = dx[:, 0] if not batched else dx.transpose(1, 0, 2, 3)
        elif x.requires_grad:
            dcols = (wmat.T @ g2).reshape(cin, kh, kw, n, ho, wo)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
            dx = dx[:, 0] if not batched else dx.transpose(1, 0, 2, 3)
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=1)

    return _record(out, inputs, backward)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D interpolation matrix (``n_out x n_in``), half-pixel centres, edge clamped."""
    if n_in == n_out:
        return np.eye(n_in)
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes (align_corners=False). Same size is an exact copy."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear: output size {out_h}x{out_w} must be positive")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return _record(x.data.copy(), (x,), lambda g: (g,))
    ry = bilinear_matrix(h, out_h)
    rx = bilinear_matrix(w, out_w)
    out = ry @ x.data @ rx.T
    return _record(out, (x,), lambda g: (ry.T @ g @ rx,))


# ---------------------------------------------------------------- gradient check

def fd_gradcheck(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
                 coords: Sequence[int] | None = None) -> float:
    """Largest relative error between taped and central-difference gradients.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``coords`` optionally restricts the check to a subset of flat indices.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"fd_gradcheck: eps {eps} outside [1e-7, 1e-3]")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
        if not isinstance(y, Tensor) or y.size != 1:
            raise ContractError("fd_gradcheck: f must return a scalar Tensor")
        (analytic,) = tape.gradient(y, [xt])
    analytic = analytic.reshape(-1)
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(base)).data)
        flat[i] = orig
        numeric = (fp - fm) / (2 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
