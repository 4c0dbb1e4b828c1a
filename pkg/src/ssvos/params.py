"""Model dimensions, weight initialisation and the flat checkpoint format.

Weights live in a plain ``dict[str, np.ndarray]``. Forward code receives a
mapping of the same names to :class:`~ssvos.tensor.Tensor` (see
:func:`as_tensors`), so the identical code path serves inference and training.

Checkpoint layout (little endian)::

    8 bytes   magic  b"SSVOSCK1"
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON: {"dtype": "<f8", "arrays": {name: {"shape": [...], "offset": int}}}
    rest      concatenated float64 buffers; ``offset`` counts bytes from the
              start of this region, arrays are C-ordered
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .tensor import Tensor

MAGIC = b"SSVOSCK1"

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64              # ViT width
    depth: int = 4
    heads: int = 4
    patch: int = 8
    mlp_hidden: int = 128
    pos_grid: int = 8          # learned positional grid, resized to the token grid
    c4: int = 32
    c8: int = 64
    c16: int = 128
    fuse_dim: int = 32         # local-fusion attention width
    key_dim: int = 32
    value_dim: int = 64
    corr_dim: int = 64         # correlated-map / query width
    salient_k: int = 16
    dec16: int = 48
    dec8: int = 32
    dec4: int = 16
    dec_squeeze: int = 4
    dec_full: int = 8
    fine_dim: int = 16

    @property
    def scale_channels(self) -> dict[int, int]:
        return {4: self.c4, 8: self.c8, 16: self.c16}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Init:
    rng: np.random.Generator
    params: Params = field(default_factory=dict)

    def normal(self, name: str, shape, std: float) -> None:
        self.params[name] = self.rng.normal(0.0, std, size=shape)

    def dense(self, name: str, n_in: int, n_out: int, gain: float = 1.0, bias: bool = True) -> None:
        self.normal(f"{name}.w", (n_in, n_out), gain / np.sqrt(n_in))
        if bias:
            self.params[f"{name}.b"] = np.zeros(n_out)

    def conv(self, name: str, c_in: int, c_out: int, k: int, gain: float = 1.0) -> None:
        self.normal(f"{name}.w", (c_out, c_in, k, k), gain / np.sqrt(c_in * k * k))
        self.params[f"{name}.b"] = np.zeros(c_out)

    def norm(self, name: str, c: int) -> None:
        self.params[f"{name}.g"] = np.ones(c)
        self.params[f"{name}.b"] = np.zeros(c)

    def zeros(self, name: str, shape) -> None:
        self.params[name] = np.zeros(shape)


def init_params(cfg: ModelConfig = ModelConfig(), seed: int = 0, zero_heads: bool = True) -> Params:
    """Random weights for the whole model.

    ``zero_heads`` zeroes the query-update output projection and the last
    decoder layer, so queries start as pure LayerNorms and predictions start
    uniform. Gradient checks pass ``zero_heads=False`` to exercise every path.
    """
    it = _Init(np.random.default_rng(seed))
    d, p = cfg.dim, cfg.patch

    it.dense("vit.patch", 3 * p * p, d)
    it.normal("vit.cls", (d,), 0.1)
    it.normal("vit.pos", (d, cfg.pos_grid, cfg.pos_grid), 0.1)
    it.normal("vit.pos_cls", (d,), 0.1)
    for i in range(cfg.depth):
        it.norm(f"vit.{i}.ln1", d)
        it.dense(f"vit.{i}.qkv", d, 3 * d)
        it.dense(f"vit.{i}.proj", d, d, gain=0.5)
        it.norm(f"vit.{i}.ln2", d)
        it.dense(f"vit.{i}.fc1", d, cfg.mlp_hidden)
        it.dense(f"vit.{i}.fc2", cfg.mlp_hidden, d, gain=0.5)
    it.norm("vit.ln_f", d)

    it.conv("pyr.stem", 3, cfg.c4, 4)
    it.conv("pyr.stem2", cfg.c4, cfg.c4, 3)
    it.conv("pyr.s8", cfg.c4, cfg.c8, 4)
    it.conv("pyr.s16", cfg.c8, cfg.c16, 4)

    it.dense("ss.sem", 2 * d, d)
    it.norm("ss.sem.ln", d)
    for s, c in cfg.scale_channels.items():
        it.dense(f"ss.inj{s}", d, c)
        it.norm(f"ss.ln{s}", c)
        it.dense(f"ss.lf{s}.q", c, cfg.fuse_dim, bias=False)
        it.dense(f"ss.lf{s}.k", d, cfg.fuse_dim, bias=False)
        it.dense(f"ss.lf{s}.v", d, cfg.fuse_dim, bias=False)
        it.dense(f"ss.lf{s}.o", cfg.fuse_dim, c)
        it.norm(f"ss.lf{s}.ln", c)

    it.conv("mem.key", cfg.c16, cfg.key_dim, 1)
    it.conv("mem.val1", cfg.c16 + 1, cfg.value_dim, 3)
    it.conv("mem.val2", cfg.value_dim, cfg.value_dim, 1)
    it.conv("mem.fuse", cfg.value_dim + cfg.c16, cfg.corr_dim, 3)

    c = cfg.corr_dim
    it.dense("qry.init", cfg.c16, c)
    it.dense("qry.upd.q", c, c, bias=False)
    it.dense("qry.upd.k", c, c, bias=False)
    it.dense("qry.upd.v", c, c, bias=False)
    if zero_heads:
        it.zeros("qry.upd.o.w", (c, c))
        it.zeros("qry.upd.o.b", (c,))
    else:
        it.dense("qry.upd.o", c, c)
    it.norm("qry.upd.ln", c)

    it.dense("dec.m", c, c, bias=False)
    it.conv("dec.d16", c + 1, cfg.dec16, 3)
    it.conv("dec.d8", cfg.dec16 + cfg.c8, cfg.dec8, 3)
    it.dense("dec.fq", c, cfg.fine_dim, bias=False)
    it.dense("dec.ff", cfg.c4, cfg.fine_dim, bias=False)
    it.conv("dec.d4", cfg.dec8 + cfg.c4 + 1, cfg.dec4, 3)
    it.conv("dec.sq", cfg.dec4, cfg.dec_squeeze, 1)
    it.conv("dec.full1", cfg.dec_squeeze + 3, cfg.dec_full, 3)
    if zero_heads:
        it.zeros("dec.full2.w", (1, cfg.dec_full, 1, 1))
        it.zeros("dec.full2.b", (1,))
    else:
        it.conv("dec.full2", cfg.dec_full, 1, 1)
    it.zeros("dec.bg", (1,))
    return it.params


def as_tensors(params: Params, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def save_checkpoint(path, params: Params, meta: dict | None = None) -> None:
    header = {"dtype": "<f8", "arrays": {}, "meta": meta or {}}
    offset = 0
    blobs = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        header["arrays"][name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[Params, dict]:
    """Read a checkpoint; returns ``(params, meta)``."""
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise InputError(f"{path}: {e.strerror or e}") from None
    if buf[:8] != MAGIC or len(buf) < 16:
        raise InputError(f"{path}: not an ssvos checkpoint")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    try:
        header = json.loads(buf[16:16 + hlen])
        body = memoryview(buf)[16 + hlen:]
        params = {}
        for name, info in header["arrays"].items():
            n = int(np.prod(info["shape"])) if info["shape"] else 1
            arr = np.frombuffer(body, dtype="<f8", count=n, offset=info["offset"])
            params[name] = arr.reshape(info["shape"]).astype(np.float64)
    except (ValueError, KeyError, TypeError) as e:
        raise InputError(f"{path}: corrupt checkpoint ({e})") from None
    return params, header.get("meta", {})
