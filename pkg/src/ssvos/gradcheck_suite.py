"""Finite-difference checks of every differentiable op, each module and the composed model.

Each case builder takes a generator and returns ``(f, x)`` for
:func:`~ssvos.tensor.fd_gradcheck`; shapes are drawn per trial. Scalar losses
are random weighted sums so no gradient path is trivially symmetric.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import encode_frame, vit_forward
from .memory import MemoryBank, encode_key, encode_key_value, memory_read, memory_write
from .params import ModelConfig, as_tensors, init_params
from .pipeline import EngineConfig, decode_logits, init_state, pad_mask, step
from .query import TargetQuery, query_update
from .spatial_semantic import ss_block_forward
from .tensor import Tensor, fd_gradcheck
from .training import point_loss

TOL = 1e-4
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    max_error: float
    trials: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_error < TOL


def _wsum(y: Tensor, seed: int = 0) -> Tensor:
    w = np.random.default_rng(seed).normal(size=y.shape)
    return T.sum(y * Tensor(w))


def _dims(rng, lo=1, hi=5, n=2):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))


# ---------------------------------------------------------------- op cases

def _unary(op, positive=False):
    def build(rng):
        x = rng.normal(size=_dims(rng, n=int(rng.integers(1, 4))))
        if positive:
            x = np.abs(x) + 0.5
        return (lambda t: _wsum(op(t))), x
    return build


def _binary(op, which):
    def build(rng):
        shape = _dims(rng, n=2)
        other = rng.normal(size=shape)
        if op is T.div:
            other = np.abs(other) + 0.5
        x = rng.normal(size=shape)
        if which == 0:
            return (lambda t: _wsum(op(t, Tensor(other)))), x
        x = np.abs(x) + 0.5 if op is T.div else x
        return (lambda t: _wsum(op(Tensor(other), t))), x
    return build


def _matmul(which, batched):
    def build(rng):
        m, k, n = _dims(rng, n=3)
        lead = (int(rng.integers(1, 4)),) if batched else ()
        a, b = rng.normal(size=lead + (m, k)), rng.normal(size=lead + (k, n))
        if which == 0:
            return (lambda t: _wsum(T.matmul(t, Tensor(b)))), a
        return (lambda t: _wsum(T.matmul(Tensor(a), t))), b
    return build


def _softmax(fn):
    def build(rng):
        shape = _dims(rng, n=2)
        axis = int(rng.integers(0, 2))
        return (lambda t: _wsum(fn(t, axis=axis))), rng.normal(size=shape)
    return build


def _layer_norm(which):
    def build(rng):
        shape = _dims(rng, 1, 4, 1) + (int(rng.integers(2, 7)),)
        x, g, b = rng.normal(size=shape), rng.normal(size=shape[-1]), rng.normal(size=shape[-1])
        args = [x, g, b]
        def f(t):
            ins = [Tensor(a) for a in args]
            ins[which] = t
            return _wsum(T.layer_norm(*ins))
        return f, args[which]
    return build


def _conv(which):
    def build(rng):
        cin, cout = _dims(rng, 1, 3)
        while True:
            k = int(rng.choice([1, 2, 3]))
            stride = int(rng.choice([1, 2]))
            pad = int(rng.integers(0, 2))
            ho, wo = _dims(rng, 1, 3)
            h, w = (ho - 1) * stride + k - 2 * pad, (wo - 1) * stride + k - 2 * pad
            if h >= 1 and w >= 1:
                break
        batch = (int(rng.integers(1, 3)),) if rng.random() < 0.5 else ()
        x = rng.normal(size=batch + (cin, h, w))
        w = rng.normal(size=(cout, cin, k, k))
        b = rng.normal(size=cout)
        args = [x, w, b]
        def f(t):
            ins = [Tensor(a) for a in args]
            ins[which] = t
            return _wsum(T.conv2d(ins[0], ins[1], stride=stride, pad=pad, bias=ins[2]))
        return f, args[which]
    return build


def _resize(rng):
    c, h, w = _dims(rng, 1, 5, 3)
    oh, ow = _dims(rng, 1, 8)
    return (lambda t: _wsum(T.resize_bilinear(t, oh, ow))), rng.normal(size=(c, h, w))


def _pad(mode):
    def build(rng):
        c, h, w = int(rng.integers(1, 3)), int(rng.integers(3, 6)), int(rng.integers(3, 6))
        ph = tuple(int(v) for v in rng.integers(0, 3, size=2))
        pw = tuple(int(v) for v in rng.integers(0, 3, size=2))
        return (lambda t: _wsum(T.pad2d(t, ph, pw, mode=mode))), rng.normal(size=(c, h, w))
    return build


def _take(rng):
    shape = _dims(rng, 1, 4, 3)
    axis = int(rng.integers(0, 3))
    idx = rng.integers(0, shape[axis], size=_dims(rng, 1, 3, int(rng.integers(1, 3))))
    return (lambda t: _wsum(T.take(t, idx, axis=axis))), rng.normal(size=shape)


def _getitem(rng):
    shape = (int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    if rng.random() < 0.5:
        key = (slice(1, None), slice(None, None, 2))
    else:
        key = (rng.integers(0, shape[0], size=4), slice(None))
    return (lambda t: _wsum(t[key])), rng.normal(size=shape)


def _reduce(fn, keep):
    def build(rng):
        shape = _dims(rng, 1, 4, 3)
        axis = int(rng.integers(0, 3))
        return (lambda t: _wsum(fn(t, axis=axis, keepdims=keep))), rng.normal(size=shape)
    return build


def _shape_ops(rng):
    a, b, c = _dims(rng, 1, 4, 3)
    def f(t):
        u = T.transpose(T.reshape(t, (b, a, c)), (2, 0, 1))
        v = T.broadcast_to(T.reshape(T.flip_last(u), (1, c, b, a)), (2, c, b, a))
        w = T.stack([T.concat([u, u * u], axis=1), T.concat([T.exp(u), u], axis=1)])
        return _wsum(v) + _wsum(w, 1)
    return f, rng.normal(size=(a, b, c))


def _canonical_mean(rng):
    shape = _dims(rng, 1, 6, 2)
    return (lambda t: _wsum(T.canonical_mean(t, axis=0))), rng.normal(size=shape)


def _scalar_ops(rng):
    s = float(rng.normal())
    return (lambda t: _wsum(T.add_scalar(T.scale(-t, s), 0.3) - t * 2.0 + 1.0)), rng.normal(size=_dims(rng))


OP_CASES = {
    "add": _binary(T.add, 0),
    "sub": _binary(T.sub, 1),
    "mul.lhs": _binary(T.mul, 0),
    "mul.rhs": _binary(T.mul, 1),
    "div.num": _binary(T.div, 0),
    "div.den": _binary(T.div, 1),
    "scalar_ops": _scalar_ops,
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "tanh": _unary(T.tanh),
    "sigmoid": _unary(T.sigmoid),
    "gelu": _unary(T.gelu),
    "shape_ops": _shape_ops,
    "getitem": _getitem,
    "take": _take,
    "pad2d.reflect": _pad("reflect"),
    "pad2d.constant": _pad("constant"),
    "sum": _reduce(T.sum, False),
    "mean": _reduce(T.mean, True),
    "canonical_mean": _canonical_mean,
    "matmul.lhs": _matmul(0, False),
    "matmul.rhs": _matmul(1, False),
    "matmul.batched": _matmul(0, True),
    "softmax": _softmax(T.softmax),
    "log_softmax": _softmax(T.log_softmax),
    "softmax_lastdim": lambda rng: ((lambda t: _wsum(T.softmax_lastdim(t))), rng.normal(size=_dims(rng))),
    "layer_norm.x": _layer_norm(0),
    "layer_norm.gamma": _layer_norm(1),
    "layer_norm.beta": _layer_norm(2),
    "conv2d.x": _conv(0),
    "conv2d.kernel": _conv(1),
    "conv2d.bias": _conv(2),
    "resize_bilinear": _resize,
}


# Which case exercises each differentiable op of the tensor module.
OP_COVERAGE = {
    "add": "add", "sub": "sub", "mul": "mul.lhs", "div": "div.den", "neg": "scalar_ops",
    "scale": "scalar_ops", "add_scalar": "scalar_ops", "exp": "exp", "log": "log", "tanh": "tanh",
    "sigmoid": "sigmoid", "gelu": "gelu", "reshape": "shape_ops", "transpose": "shape_ops",
    "broadcast_to": "shape_ops", "flip_last": "shape_ops", "concat": "shape_ops", "stack": "shape_ops",
    "getitem": "getitem", "take": "take", "pad2d": "pad2d.reflect", "sum": "sum", "mean": "mean",
    "canonical_mean": "canonical_mean", "matmul": "matmul.batched", "softmax": "softmax",
    "softmax_lastdim": "softmax_lastdim", "log_softmax": "log_softmax", "layer_norm": "layer_norm.x",
    "conv2d": "conv2d.x", "resize_bilinear": "resize_bilinear",
}

# ---------------------------------------------------------------- module cases

def _model(seed: int = 0):
    cfg = ModelConfig()
    return cfg, init_params(cfg, seed=seed, zero_heads=False)


def _coords(rng, n_total: int, n: int) -> np.ndarray:
    return np.sort(rng.choice(n_total, size=min(n, n_total), replace=False))


def _frame(rng, hw=(32, 32)) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(3,) + hw)


def _blob_mask(hw, n_obj: int, rng) -> np.ndarray:
    m = np.zeros(hw, dtype=np.int64)
    h, w = hw
    for k in range(1, n_obj + 1):
        y, x = int(rng.integers(0, h - 10)), int(rng.integers(0, w - 10))
        m[y:y + 10, x:x + 10] = k
    return m


def module_cases(n_coords: int = 24):
    """``{name: build(rng) -> (f, x, coords)}`` for the model's building blocks."""
    cfg, params = _model()
    P = as_tensors(params)

    def pyramid(rng):
        def f(t):
            pyr = encode_frame(t, P, cfg)
            return _wsum(pyr.scales[4]) + _wsum(pyr.scales[16], 1) + _wsum(pyr.patch_tokens, 2)
        x = _frame(rng)
        return f, x, _coords(rng, x.size, n_coords)

    def vit_cls(rng):
        tokens = rng.normal(size=(6, cfg.dim))
        def f(t):
            P2 = dict(P)
            P2["vit.cls"] = t
            cls, patches = vit_forward(Tensor(tokens), P2, cfg, grid=(2, 3))
            return _wsum(cls) + _wsum(patches, 1)
        return f, params["vit.cls"], None

    def ss_block(rng):
        def f(t):
            feats = ss_block_forward(encode_frame(t, P, cfg), P)
            return sum((_wsum(feats[s], s) for s in (4, 8, 16)), Tensor(0.0))
        x = _frame(rng)
        return f, x, _coords(rng, x.size, n_coords)

    def value_head(rng):
        frame = _frame(rng)
        mask = pad_mask(_blob_mask((32, 32), 2, rng))
        feats = ss_block_forward(encode_frame(Tensor(frame), P, cfg), P)
        def f(t):
            key, values = encode_key_value({**feats, 16: t}, mask, (1, 2), P)
            return _wsum(key) + _wsum(values, 1)
        x = feats[16].data
        return f, x, _coords(rng, x.size, n_coords)

    def memory_readout(rng):
        frame0, frame1 = _frame(rng), _frame(rng)
        mask = pad_mask(_blob_mask((32, 32), 2, rng))
        f0 = ss_block_forward(encode_frame(Tensor(frame0), P, cfg), P)
        f1 = ss_block_forward(encode_frame(Tensor(frame1), P, cfg), P)
        key, values = encode_key_value(f0, mask, (1, 2), P)
        def f(t):
            bank = MemoryBank(cap=64, n_objects=2)
            memory_write(bank, key, values, 0)
            return _wsum(memory_read(bank, encode_key(t, P), t, P, update_usage=False))
        x = f1[16].data
        return f, x, _coords(rng, x.size, n_coords)

    def query_refine(rng):
        c, k = cfg.corr_dim, cfg.salient_k
        salient = rng.normal(size=(k, c))
        def f(t):
            q = query_update(t, Tensor(salient), P)
            return T.sum(q * q)
        return f, rng.normal(size=c), None

    def query_salient(rng):
        c, k = cfg.corr_dim, cfg.salient_k
        q = rng.normal(size=c)
        def f(t):
            out = query_update(Tensor(q), t, P)
            return T.sum(out * out)
        x = rng.normal(size=(k, c))
        return f, x, _coords(rng, x.size, n_coords)

    def decode_point_loss(rng):
        frame = _frame(rng)
        feats = ss_block_forward(encode_frame(Tensor(frame), P, cfg), P)
        h16, w16 = feats[16].shape[1:]
        R0 = rng.normal(size=(2, cfg.corr_dim, h16, w16))
        queries = [TargetQuery(i + 1, Tensor(rng.normal(size=cfg.corr_dim)), 0) for i in range(2)]
        gt = _blob_mask((32, 32), 2, rng)
        pts = np.stack([rng.integers(0, 32, size=40), rng.integers(0, 32, size=40)], axis=1)
        def f(t):
            logits = decode_logits(t, queries, feats, Tensor(frame), P)
            return point_loss(logits, gt, pts)
        return f, R0, _coords(rng, R0.size, n_coords)

    return {
        "module.pyramid": pyramid,
        "module.vit_cls": vit_cls,
        "module.spatial_semantic": ss_block,
        "module.value_head": value_head,
        "module.memory_read": memory_readout,
        "module.query_update.q": query_refine,
        "module.query_update.salient": query_salient,
        "module.decode_point_loss": decode_point_loss,
    }


# ---------------------------------------------------------------- composed model

def composed_fixture(seed: int = 0, hw=(32, 32), frames: int = 5):
    """Frames, first mask and fixed loss points for the end-to-end check.

    The clip spans a memory write with query refinement (frame 3), so the
    gradient of the last frame's loss runs through every stage.
    """
    rng = np.random.default_rng(seed)
    base = _frame(rng, hw) * 0.5
    mask0 = _blob_mask(hw, 2, rng)
    clip = np.stack([np.clip(base + 0.4 * (np.roll(mask0, t, axis=1) > 0)[None]
                             + rng.normal(0, 0.05, size=(3,) + hw), 0, 1) for t in range(frames)])
    pts = np.stack([rng.integers(0, hw[0], size=48), rng.integers(0, hw[1], size=48)], axis=1)
    gts = [np.roll(mask0, t, axis=1) for t in range(frames)]
    return clip, mask0, gts, pts


def composed_loss(P, clip, mask0, gts, pts, cfg: EngineConfig, model_cfg: ModelConfig, frame_override=None):
    """Point loss summed over frames 1..T-1; ``frame_override = (t, Tensor)`` swaps one frame."""
    frames = list(clip)
    if frame_override is not None:
        frames[frame_override[0]] = frame_override[1]
    first = frames[0] if isinstance(frames[0], Tensor) else Tensor(frames[0])
    _, state = init_state(P, first, mask0, cfg, model_cfg, (1, 2))
    total = Tensor(0.0)
    for t in range(1, len(frames)):
        fr = frames[t] if isinstance(frames[t], Tensor) else Tensor(frames[t])
        res, state = step(state, fr, t)
        total = total + point_loss(res.logits, gts[t], pts)
    return total


def composed_cases(n_coords: int = 48):
    model_cfg, params = _model(seed=1)
    cfg = EngineConfig(scales=(1.0,))
    clip, mask0, gts, pts = composed_fixture()

    def frame_pixels(t):
        def build(rng):
            P = as_tensors(params)
            f = lambda x: composed_loss(P, clip, mask0, gts, pts, cfg, model_cfg, (t, x))
            return f, clip[t], _coords(rng, clip[t].size, n_coords)
        return build

    def every_weight(rng):
        # one random entry of every named weight, checked jointly through a flat vector
        names = sorted(params)
        picks = [(n, int(rng.integers(params[n].size))) for n in names]
        base = np.array([params[n].reshape(-1)[i] for n, i in picks])

        def f(t):
            P = as_tensors(params)
            for j, (n, i) in enumerate(picks):
                flat = T.reshape(P[n], (-1,))
                onehot = np.zeros(params[n].size)
                onehot[i] = 1.0
                entry = T.add_scalar(t[j:j + 1], -float(params[n].reshape(-1)[i]))
                delta = T.broadcast_to(entry, (params[n].size,)) * Tensor(onehot)
                P[n] = T.reshape(flat + delta, params[n].shape)
            return composed_loss(P, clip, mask0, gts, pts, cfg, model_cfg)
        return f, base, None

    return {
        "model.frame0_pixels": frame_pixels(0),
        "model.frame3_pixels": frame_pixels(3),
        "model.frame4_pixels": frame_pixels(4),
        "model.every_weight": every_weight,
    }


# ---------------------------------------------------------------- runner

def _run(name, build, trials, seed, eps) -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        out = build(rng)
        f, x = out[0], out[1]
        coords = out[2] if len(out) > 2 else None
        worst = max(worst, fd_gradcheck(f, x, eps=eps, coords=coords))
    return CheckResult(name, worst, trials, time.time() - t0)


def run_suite(op_trials: int = 10, module_trials: int = 2, model_trials: int = 1, seed: int = 0,
              eps: float = EPS, include=("ops", "modules", "model"), progress=None) -> list[CheckResult]:
    groups = []
    if "ops" in include:
        groups.append((OP_CASES, op_trials))
    if "modules" in include:
        groups.append((module_cases(), module_trials))
    if "model" in include:
        groups.append((composed_cases(), model_trials))
    results = []
    for k, (cases, trials) in enumerate(groups):
        for j, (name, build) in enumerate(cases.items()):
            res = _run(name, build, trials, seed + 1000 * k + j, eps)
            results.append(res)
            if progress is not None:
                progress(res)
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'check':<30} {'max rel err':>12} {'trials':>6} {'time':>7}"]
    for r in results:
        lines.append(f"{r.name:<30} {r.max_error:12.3e} {r.trials:6d} {r.seconds:6.1f}s"
                     f"{'' if r.ok else '  FAIL'}")
    return "\n".join(lines)
