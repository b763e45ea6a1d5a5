"""Overlap success, centre-error precision and failure rate, overall and split
by the occlusion flag."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..geometry import BoundingBox, iou

THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_PX = 20.0
# IoU of two equal boxes can miss 1.0 by rounding
FULL_OVERLAP = 1.0 - 1e-9


@dataclass
class MetricReport:
    thresholds: list[float]
    success: list[float]
    auc: float
    precision: float
    mean_iou: float
    failure_rate: float
    frames: int
    attributes: dict[str, "MetricReport | None"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attributes"] = {k: (v.to_dict() if v is not None else None) for k, v in self.attributes.items()}
        return d


def success_curve(ious: np.ndarray, thresholds: np.ndarray = THRESHOLDS) -> np.ndarray:
    """Fraction of frames with IoU > theta; at theta = 1 only full overlap counts."""
    ious = np.asarray(ious, dtype=np.float64)
    return np.array([np.mean(ious >= FULL_OVERLAP) if t >= 1.0 else np.mean(ious > t) for t in thresholds])


def trapezoid_auc(curve: np.ndarray, thresholds: np.ndarray = THRESHOLDS) -> float:
    return float(np.trapezoid(curve, thresholds))


def _report(ious: np.ndarray, errors: np.ndarray) -> MetricReport:
    curve = success_curve(ious)
    return MetricReport(
        thresholds=[float(t) for t in THRESHOLDS],
        success=[float(s) for s in curve],
        auc=float(curve.mean()),
        precision=float(np.mean(errors <= PRECISION_PX)),
        mean_iou=float(ious.mean()),
        failure_rate=float(np.mean(ious == 0.0)),
        frames=int(len(ious)),
    )


def _boxes(results) -> list[BoundingBox]:
    return [r if isinstance(r, BoundingBox) else r.box for r in results]


def frame_scores(results, gt) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame IoU, centre error and occlusion flag for one sequence."""
    boxes = _boxes(results)
    if len(boxes) != len(gt.boxes):
        raise ValueError(f"{len(boxes)} results for a sequence of {len(gt.boxes)} frames")
    ious = np.array([iou(b, g) for b, g in zip(boxes, gt.boxes)])
    errs = np.array([b.center.distance(g.center) for b, g in zip(boxes, gt.boxes)])
    return ious, errs, np.asarray(gt.occluded, dtype=bool)


def evaluate(results: Sequence, gt) -> MetricReport:
    """Metrics of one sequence; ``results`` are FrameResults or boxes."""
    return evaluate_suite([(results, gt)])


def evaluate_suite(pairs: Sequence[tuple[Sequence, object]]) -> MetricReport:
    """Metrics pooled over the frames of several (results, ground truth) pairs."""
    if not pairs:
        raise ValueError("nothing to evaluate")
    parts = [frame_scores(r, g) for r, g in pairs]
    ious = np.concatenate([p[0] for p in parts])
    errs = np.concatenate([p[1] for p in parts])
    occ = np.concatenate([p[2] for p in parts])
    rep = _report(ious, errs)
    rep.attributes = {
        "occluded": _report(ious[occ], errs[occ]) if occ.any() else None,
        "visible": _report(ious[~occ], errs[~occ]) if (~occ).any() else None,
    }
    return rep
