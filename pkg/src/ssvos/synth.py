"""Synthetic moving-shape sequences with occlusion and exit/re-entry.

Objects are flat-coloured rectangles, disks or L-shapes moving with constant
velocity plus a sinusoidal wobble, bouncing off the frame border. Depth order
decides occlusion. An object can be hidden for a frame interval, during which
its mask is empty, and reappear afterwards.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import SpecError

SHAPES = ("rectangle", "disk", "lshape")
MAX_OBJECTS = 5
NOISE_SIGMA = 0.02


@dataclass
class ObjectSpec:
    shape: str
    size: tuple              # (half-height, half-width) in pixels
    color: tuple             # RGB in [0, 1]
    start: tuple             # centre (y, x) at frame 0
    velocity: tuple          # pixels / frame
    jitter_amp: float = 1.0
    jitter_freq: float = 0.3
    jitter_phase: float = 0.0
    depth: int = 0           # larger draws on top
    hidden: tuple = ()       # ((first, last), ...) inclusive frame intervals


@dataclass
class SyntheticSpec:
    objects: list
    frame_count: int = 24
    frame_hw: tuple = (64, 64)
    background: tuple = (0.2, 0.2, 0.2)
    background_texture: float = 0.05
    seed: int = 0

    @property
    def num_objects(self) -> int:
        return len(self.objects)


def _shape_mask(shape: str, size, cy: float, cx: float, hw) -> np.ndarray:
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w]
    yy = yy + 0.5
    xx = xx + 0.5
    ry, rx = size
    if shape == "rectangle":
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    if shape == "disk":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if shape == "lshape":
        box = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        notch = (yy < cy) & (xx > cx)
        return box & ~notch
    raise SpecError(f"unknown shape {shape!r}")


def _centre(obj: ObjectSpec, t: int, hw) -> tuple[float, float]:
    """Position at frame ``t``: linear motion reflected at the borders, plus wobble."""
    out = []
    for axis in range(2):
        lo = obj.size[axis] * 0.5
        hi = hw[axis] - obj.size[axis] * 0.5
        span = max(hi - lo, 1e-6)
        p = obj.start[axis] - lo + obj.velocity[axis] * t
        p = np.mod(p, 2 * span)
        p = p if p <= span else 2 * span - p
        wobble = obj.jitter_amp * np.sin(obj.jitter_freq * t + obj.jitter_phase + axis * 1.3)
        out.append(lo + p + wobble)
    return out[0], out[1]


def _is_hidden(obj: ObjectSpec, t: int) -> bool:
    return any(a <= t <= b for a, b in obj.hidden)


def validate(spec: SyntheticSpec) -> None:
    if not 1 <= spec.num_objects <= MAX_OBJECTS:
        raise SpecError(f"need 1..{MAX_OBJECTS} objects, got {spec.num_objects}")
    if spec.frame_count < 1:
        raise SpecError("frame_count must be positive")
    for i, obj in enumerate(spec.objects):
        if obj.shape not in SHAPES:
            raise SpecError(f"object {i}: unknown shape {obj.shape!r}")
        if _is_hidden(obj, 0):
            raise SpecError(f"object {i} is hidden in frame 0")


def render_masks(spec: SyntheticSpec) -> np.ndarray:
    """Label masks ``[T, h, w]`` (object ``i`` has id ``i + 1``)."""
    validate(spec)
    order = sorted(range(spec.num_objects), key=lambda i: (spec.objects[i].depth, i))
    masks = np.zeros((spec.frame_count,) + tuple(spec.frame_hw), dtype=np.int64)
    for t in range(spec.frame_count):
        for i in order:
            obj = spec.objects[i]
            if _is_hidden(obj, t):
                continue
            cy, cx = _centre(obj, t, spec.frame_hw)
            masks[t][_shape_mask(obj.shape, obj.size, cy, cx, spec.frame_hw)] = i + 1
    return masks


def synth_generate(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Frames ``[T, 3, h, w]`` in [0, 1] and label masks ``[T, h, w]``."""
    masks = render_masks(spec)
    for i in range(spec.num_objects):
        if not np.any(masks[0] == i + 1):
            raise SpecError(f"object {i} is not visible in frame 0")
    rng = np.random.default_rng(spec.seed)
    h, w = spec.frame_hw
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    tex = spec.background_texture * np.sin(6.0 * xx + 4.0 * yy)
    bg = np.asarray(spec.background, dtype=np.float64)[:, None, None] + tex[None]
    palette = np.asarray([bg] + [np.broadcast_to(np.asarray(o.color, dtype=np.float64)[:, None, None], (3, h, w))
                                 for o in spec.objects])
    frames = np.empty((spec.frame_count, 3, h, w))
    for t in range(spec.frame_count):
        frames[t] = np.take_along_axis(palette, masks[t][None, None].repeat(3, axis=1), axis=0)[0]
        frames[t] += rng.normal(0.0, NOISE_SIGMA, size=(3, h, w))
    return np.clip(frames, 0.0, 1.0), masks


def _distinct_colors(rng: np.random.Generator, n: int, background) -> list[tuple]:
    colors = []
    bg = np.asarray(background)
    while len(colors) < n:
        c = rng.uniform(0.05, 0.95, size=3)
        if np.linalg.norm(c - bg) < 0.45:
            continue
        if any(np.linalg.norm(c - np.asarray(o)) < 0.35 for o in colors):
            continue
        colors.append(tuple(float(v) for v in c))
    return colors


def random_spec(seed: int, num_objects: int | None = None, frame_count: int = 24, frame_hw=(64, 64),
                occlusion: bool = True, reentry: bool = True, max_tries: int = 200) -> SyntheticSpec:
    """A random but reproducible spec; every object is clearly visible in frame 0.

    With ``occlusion`` two objects are sent on crossing paths; with ``reentry``
    one object is hidden for a short interval in the middle of the sequence.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4)) if num_objects is None else num_objects
    if not 1 <= n <= MAX_OBJECTS:
        raise SpecError(f"need 1..{MAX_OBJECTS} objects, got {n}")
    h, w = frame_hw
    unit = min(h, w) / 64.0
    for _ in range(max_tries):
        background = tuple(float(v) for v in rng.uniform(0.0, 0.5, size=3))
        colors = _distinct_colors(rng, n, background)
        objects = []
        for i in range(n):
            size = tuple(float(v) for v in rng.uniform(4.0, 10.0, size=2) * unit)
            start = (float(rng.uniform(size[0], h - size[0])), float(rng.uniform(size[1], w - size[1])))
            vel = tuple(float(v) for v in rng.uniform(-1.5, 1.5, size=2) * unit)
            objects.append(ObjectSpec(
                shape=SHAPES[int(rng.integers(len(SHAPES)))], size=size, color=colors[i], start=start,
                velocity=vel, jitter_amp=float(rng.uniform(0.0, 1.5) * unit),
                jitter_freq=float(rng.uniform(0.1, 0.6)), jitter_phase=float(rng.uniform(0, 2 * np.pi)),
                depth=i))
        if occlusion and n >= 2 and frame_count > 2:
            # aim object 1 at object 0's position near mid-sequence
            a, b = objects[0], objects[1]
            tm = frame_count // 2
            ay, ax = _centre(a, tm, frame_hw)
            b.velocity = ((ay - b.start[0]) / tm, (ax - b.start[1]) / tm)
            b.jitter_amp = 0.0
        if reentry and frame_count >= 8:
            i = n - 1
            first = int(rng.integers(frame_count // 3, frame_count // 2 + 1))
            objects[i].hidden = ((first, min(first + max(2, frame_count // 6), frame_count - 2)),)
        spec = SyntheticSpec(objects=objects, frame_count=frame_count, frame_hw=tuple(frame_hw),
                             background=background, seed=seed)
        m0 = render_masks(spec)[0]
        if all(np.count_nonzero(m0 == k + 1) >= 12 * unit * unit for k in range(n)):
            return spec
    raise SpecError(f"could not place {n} visible objects for seed {seed}")


def spec_to_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)


def spec_from_dict(d: dict) -> SyntheticSpec:
    """Explicit spec (has ``objects``) or random-spec arguments (``seed``, ``num_objects``, ...)."""
    if not isinstance(d, dict):
        raise SpecError("spec must be a JSON object")
    if "objects" not in d:
        allowed = {"seed", "num_objects", "frame_count", "frame_hw", "occlusion", "reentry"}
        unknown = set(d) - allowed
        if unknown:
            raise SpecError(f"unknown spec keys {sorted(unknown)}")
        if "seed" not in d:
            raise SpecError("spec needs either 'objects' or 'seed'")
        kw = dict(d)
        if "frame_hw" in kw:
            kw["frame_hw"] = tuple(kw["frame_hw"])
        return random_spec(**kw)
    try:
        objects = [ObjectSpec(**{k: tuple(tuple(i) for i in v) if k == "hidden" else
                                 (tuple(v) if isinstance(v, list) else v) for k, v in o.items()})
                   for o in d["objects"]]
        rest = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k != "objects"}
        spec = SyntheticSpec(objects=objects, **rest)
    except TypeError as e:
        raise SpecError(f"bad spec: {e}") from None
    validate(spec)
    return spec
