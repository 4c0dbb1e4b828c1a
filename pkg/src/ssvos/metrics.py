"""Region (Jaccard) and boundary (F-measure) accuracy for label-mask sequences."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
from scipy import ndimage

from .errors import ShapeError

BOUND_TH = 0.008


def _check(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def jaccard(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour that is background or off-image."""
    m = np.pad(mask.astype(bool), 1, constant_values=False)
    interior = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return mask.astype(bool) & ~interior


def tolerance_radius(shape) -> int:
    return int(math.ceil(BOUND_TH * math.hypot(*shape)))


def _within(src: np.ndarray, dst: np.ndarray, r: float) -> int:
    """Number of ``src`` pixels within Euclidean distance ``r`` of some ``dst`` pixel."""
    if not src.any() or not dst.any():
        return 0
    dist = ndimage.distance_transform_edt(~dst)
    return int(np.count_nonzero(src & (dist <= r)))


def boundary_f(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    if not pred.any() and not gt.any():
        return 1.0
    if not pred.any() or not gt.any():
        return 0.0
    bp, bg = boundary(pred), boundary(gt)
    r = tolerance_radius(pred.shape)
    precision = _within(bp, bg, r) / np.count_nonzero(bp)
    recall = _within(bg, bp, r) / np.count_nonzero(bg)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def round_half_up(x: float, places: int = 2) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class MetricReport:
    """Scores in percent. ``per_object[oid] = {"J": [...], "F": [...]}`` holds per-frame values."""

    J: float
    F: float
    JF: float
    per_object: dict = field(default_factory=dict)
    object_J: dict = field(default_factory=dict)
    object_F: dict = field(default_factory=dict)
    name: str = ""

    @classmethod
    def from_scores(cls, J: float, F: float, **kw) -> "MetricReport":
        return cls(J=J, F=F, JF=(J + F) / 2, **kw)

    def display(self) -> dict:
        return {"J&F": round_half_up(self.JF), "J": round_half_up(self.J), "F": round_half_up(self.F)}

    def to_json(self) -> str:
        d = asdict(self)
        d["display"] = self.display()
        return json.dumps(d, indent=2, sort_keys=True, default=float)


def evaluate_sequence(preds, gts, object_ids=None, name: str = "") -> MetricReport:
    """Mean J and F over objects, each averaged over frames 1..T-1.

    Objects listed in ``object_ids`` but missing from ``gts`` are scored
    against empty ground truth. A single-frame sequence scores its only frame.
    """
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predicted frames vs {len(gts)} ground-truth frames")
    if object_ids is None:
        object_ids = sorted({int(i) for g in gts for i in np.unique(g) if i != 0})
    frames = range(1, len(gts)) if len(gts) > 1 else range(len(gts))
    per_object, oj, of = {}, {}, {}
    for oid in object_ids:
        js = [jaccard(preds[t] == oid, gts[t] == oid) for t in frames]
        fs = [boundary_f(preds[t] == oid, gts[t] == oid) for t in frames]
        per_object[int(oid)] = {"J": js, "F": fs}
        oj[int(oid)] = 100.0 * float(np.mean(js))
        of[int(oid)] = 100.0 * float(np.mean(fs))
    J = float(np.mean(list(oj.values()))) if oj else 100.0
    F = float(np.mean(list(of.values()))) if of else 100.0
    return MetricReport.from_scores(J, F, per_object=per_object, object_J=oj, object_F=of, name=name)


def aggregate(reports: list[MetricReport], name: str = "all") -> MetricReport:
    """Dataset-level scores: plain mean over sequences."""
    J = float(np.mean([r.J for r in reports]))
    F = float(np.mean([r.F for r in reports]))
    return MetricReport.from_scores(J, F, name=name)


def format_table(rows: list[tuple[str, MetricReport]]) -> str:
    lines = [f"{'Name':<16} | {'J&F':>6}  {'J':>6}  {'F':>6}", "-" * 42]
    for label, rep in rows:
        d = rep.display()
        lines.append(f"{label:<16} | {d['J&F']:6.2f}  {d['J']:6.2f}  {d['F']:6.2f}")
    return "\n".join(lines)


# Leaderboard rows (team, J&F, J, F) used as a self-check of the aggregation.
LEADERBOARD = (
    ("Ours", 80.90, 76.16, 85.63),
    ("yuanjie", 80.84, 76.42, 85.26),
    ("Sch89.89", 76.35, 71.94, 80.76),
    ("MVP-TIME", 75.79, 71.25, 80.33),
)


def selftest_rows() -> list[tuple[str, float, float, bool]]:
    """Recompute each leaderboard J&F from its J and F; ``(team, expected, got, ok)``."""
    out = []
    for team, jf, j, f in LEADERBOARD:
        got = MetricReport.from_scores(j, f).display()["J&F"]
        out.append((team, jf, got, abs(got - jf) <= 0.005))
    return out
