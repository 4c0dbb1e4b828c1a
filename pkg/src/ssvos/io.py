"""Sequence directories, PPM/PGM images, outputs and the ``key=value`` config file.

Layout of a sequence directory::

    frames/00000.ppm ...      binary P6, 8 bit
    annotation/00000.pgm      binary P5, pixel value = object id
    gt/00000.pgm ...          optional ground truth, same encoding

Outputs: ``masks/%05d.pgm``, ``overlays/%05d.ppm``, ``metrics.json`` and
``memlog.jsonl`` (plus ``querylog.jsonl`` when query records are given).
"""

from __future__ import annotations

import json
import os
import re
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .pipeline import EngineConfig

SEED_ENV = "SSVOS_SEED"

_TOKEN = re.compile(rb"#[^\n]*\n?|\S+")


def _parse_header(buf: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Magic, width, height, maxval and the byte offset of the raster."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = _TOKEN.search(buf, pos)
        if m is None:
            raise InputError(f"{path}: truncated image header")
        pos = m.end()
        if not m.group().startswith(b"#"):
            tokens.append(m.group())
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise InputError(f"{path}: malformed image header")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise InputError(f"{path}: non-numeric image header") from None
    if w < 1 or h < 1 or not 1 <= maxval <= 65535:
        raise InputError(f"{path}: bad header values {w}x{h} maxval {maxval}")
    return tokens[0], w, h, maxval, pos + 1


def _read_netpbm(path, magic: bytes, channels: int) -> tuple[np.ndarray, int]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise InputError(f"{path}: {e.strerror or e}") from None
    got, w, h, maxval, off = _parse_header(buf, path)
    if got != magic:
        raise InputError(f"{path}: expected {magic.decode()} image, found {got[:2].decode(errors='replace')}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = w * h * channels
    if len(buf) - off < n * dtype.itemsize:
        raise InputError(f"{path}: raster shorter than {w}x{h}x{channels}")
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off)
    return arr.reshape(h, w, channels), maxval


def read_ppm(path) -> np.ndarray:
    """RGB frame ``[3, h, w]`` as float64 in [0, 1]."""
    arr, maxval = _read_netpbm(path, b"P6", 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / maxval


def read_pgm(path) -> np.ndarray:
    """Label mask ``[h, w]`` as int64 (raw pixel values)."""
    arr, _ = _read_netpbm(path, b"P5", 1)
    return arr[..., 0].astype(np.int64)


def to_u8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _write(path, data: bytes) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as e:
        raise InputError(f"{path}: {e.strerror or e}") from None


def write_ppm(path, frame: np.ndarray) -> None:
    """``frame`` is ``[3, h, w]`` float in [0, 1] or uint8."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise InputError(f"{path}: frame must be [3, h, w], got {frame.shape}")
    u8 = frame if frame.dtype == np.uint8 else to_u8(frame)
    _, h, w = u8.shape
    _write(path, b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(u8.transpose(1, 2, 0)).tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InputError(f"{path}: mask must be 2-D, got {mask.shape}")
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise InputError(f"{path}: mask values must fit in 8 bits")
    h, w = mask.shape
    _write(path, b"P5\n%d %d\n255\n" % (w, h) + mask.astype(np.uint8).tobytes())


# ---------------------------------------------------------------- sequences

@dataclass
class Sequence:
    frames: np.ndarray                  # [T, 3, h, w]
    first_mask: np.ndarray              # [h, w], contiguous ids 1..n
    gt: np.ndarray | None = None        # [T, h, w] with the same ids, or None
    id_map: dict = field(default_factory=dict)   # contiguous id -> id on disk
    warnings: list = field(default_factory=list)
    name: str = ""

    @property
    def object_ids(self) -> tuple:
        return tuple(sorted(self.id_map))


def _sorted_files(d: Path, suffix: str) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix == suffix and p.stem.isdigit())


def remap_ids(mask: np.ndarray, id_map: dict) -> np.ndarray:
    """Apply ``{new: old}`` inverted; ids not in the map become background."""
    lut = np.zeros(int(max(mask.max(initial=0), max(id_map.values(), default=0))) + 1, dtype=np.int64)
    for new, old in id_map.items():
        lut[old] = new
    return lut[mask]


def restore_ids(mask: np.ndarray, id_map: dict) -> np.ndarray:
    lut = np.zeros(max(id_map, default=0) + 1, dtype=np.int64)
    for new, old in id_map.items():
        lut[new] = old
    return lut[mask]


def load_sequence(path) -> Sequence:
    """Read a sequence directory.

    Object ids in the annotation are remapped to ``1..n`` when they are not
    already contiguous; the mapping is kept in ``id_map`` and a warning is
    recorded (and emitted through :mod:`warnings`).
    """
    root = Path(path)
    fdir = root / "frames"
    if not fdir.is_dir():
        raise InputError(f"{root}: missing frames/ directory")
    files = _sorted_files(fdir, ".ppm")
    if not files:
        raise InputError(f"{fdir}: no .ppm frames")
    ann = root / "annotation" / "00000.pgm"
    if not ann.is_file():
        raise InputError(f"{root}: missing annotation/00000.pgm")
    frames = np.stack([read_ppm(f) for f in files])
    first = read_pgm(ann)
    if first.shape != frames.shape[2:]:
        raise InputError(f"{ann}: mask {first.shape} does not match frames {frames.shape[2:]}")

    ids = [int(i) for i in np.unique(first) if i != 0]
    id_map = {k: oid for k, oid in enumerate(ids, start=1)}
    notes = []
    if ids != list(range(1, len(ids) + 1)):
        notes.append(f"object ids {ids} remapped to {list(id_map)}")
        first = remap_ids(first, id_map)

    gt = None
    gdir = root / "gt"
    if gdir.is_dir():
        gfiles = _sorted_files(gdir, ".pgm")
        if [f.stem for f in gfiles] != [f.stem for f in files]:
            raise InputError(f"{gdir}: ground-truth files do not match frames")
        gt = np.stack([read_pgm(f) for f in gfiles])
        if gt.shape[1:] != first.shape:
            raise InputError(f"{gdir}: mask size {gt.shape[1:]} does not match frames")
        extra = sorted(set(np.unique(gt).tolist()) - {0} - set(ids))
        if extra:
            notes.append(f"ground-truth ids {extra} absent from the annotation are ignored")
        gt = remap_ids(gt, id_map)
    for msg in notes:
        warnings.warn(f"{root}: {msg}", stacklevel=2)
    return Sequence(frames, first, gt, id_map, notes, root.name)


def save_sequence(path, frames: np.ndarray, masks: np.ndarray, with_gt: bool = True) -> None:
    """Write frames plus the first mask (and optionally every mask as ground truth)."""
    root = Path(path)
    for t, f in enumerate(frames):
        write_ppm(root / "frames" / f"{t:05d}.ppm", f)
    write_pgm(root / "annotation" / "00000.pgm", masks[0])
    if with_gt:
        for t, m in enumerate(masks):
            write_pgm(root / "gt" / f"{t:05d}.pgm", m)


# ---------------------------------------------------------------- outputs

def palette(n: int) -> np.ndarray:
    """Fixed colours ``[n + 1, 3]`` in [0, 1]; row 0 (background) is unused."""
    base = np.array([[0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
                     [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230]], dtype=np.float64)
    reps = -(-(n + 1) // len(base))
    return np.tile(base, (reps, 1))[:n + 1] / 255.0


def overlay(frame: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """8-bit ``[3, h, w]`` blend of object colours over the frame; background untouched."""
    u8 = to_u8(frame)
    if not mask.any():
        return u8
    colors = palette(int(mask.max()))[mask].transpose(2, 0, 1)
    blend = to_u8((1 - alpha) * (u8 / 255.0) + alpha * colors)
    return np.where(mask[None] > 0, blend, u8)


def save_outputs(path, results, report=None, frames=None, memlog=None, query_log=None,
                 id_map: dict | None = None) -> None:
    """Write masks, overlays (when ``frames`` is given), ``metrics.json`` and logs.

    ``id_map`` (contiguous id -> id on disk) restores the annotation's ids.
    """
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"{root}: {e.strerror or e}") from None
    for t, res in enumerate(results):
        mask = res.label_mask if hasattr(res, "label_mask") else np.asarray(res)
        disk = restore_ids(mask, id_map) if id_map else mask
        write_pgm(root / "masks" / f"{t:05d}.pgm", disk)
        if frames is not None:
            write_ppm(root / "overlays" / f"{t:05d}.ppm", overlay(frames[t], mask))
    if report is not None:
        _write(root / "metrics.json", report.to_json().encode())
    if memlog is not None:
        _write(root / "memlog.jsonl", "".join(json.dumps(e, sort_keys=True) + "\n" for e in memlog).encode())
    if query_log is not None:
        _write(root / "querylog.jsonl", "".join(json.dumps(e, sort_keys=True) + "\n" for e in query_log).encode())


def read_jsonl(path) -> list[dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise InputError(f"{path}: {e.strerror or e}") from None
    return [json.loads(line) for line in lines if line.strip()]


def load_masks(path) -> np.ndarray:
    """All ``%05d.pgm`` files in a directory, stacked ``[T, h, w]``."""
    d = Path(path)
    if not d.is_dir():
        raise InputError(f"{d}: not a directory")
    files = _sorted_files(d, ".pgm")
    if not files:
        raise InputError(f"{d}: no .pgm masks")
    masks = [read_pgm(f) for f in files]
    if len({m.shape for m in masks}) != 1:
        raise InputError(f"{d}: masks differ in size")
    return np.stack(masks)


# ---------------------------------------------------------------- config

def _convert(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.replace(" ", "").strip("()[]").split(",") if v)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> dict:
    """``key=value`` lines; ``#`` starts a comment. Unknown keys are an error."""
    defaults = {f.name: f.default for f in fields(EngineConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value, defaults[key])
    return out


def engine_config(path=None, overrides: dict | None = None, env=None) -> EngineConfig:
    """Config file, then ``SSVOS_SEED``, then explicit overrides (later wins)."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise InputError(f"{path}: {e.strerror or e}") from None
        values.update(parse_config(text, str(path)))
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        values["seed"] = _convert(SEED_ENV, env[SEED_ENV], 0)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return EngineConfig(**values)
