"""Camera motion between adjacent frames by masked background matching.

The search patch from the current frame is resampled under each rotation and
each scale hypothesis of a small pyramid and matched against the centre of
the previous frame. The two sets are searched one after the other (2n - 1
patches, not n^2): rotations at unit scale, then scales at the winning
rotation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import (
    BoundingBox,
    Point2,
    SimilarityTransform,
    accumulate_motion,
    frame_center,
    refine_peak,
    sample_patch,
    to_gray,
)
from .tracker import Embedding, crop_patch, normalized_cross_correlate

log = logging.getLogger(__name__)

# peaks closer than this are treated as ties
TIE_TOL = 1e-9
# below this heatmap spread the match is considered degenerate
FLAT_TOL = 1e-6


@dataclass(frozen=True)
class PyramidConfig:
    scale_factors: tuple[float, ...] = (0.95, 1.0, 1.05)
    rotation_factors: tuple[float, ...] = (-math.radians(5), 0.0, math.radians(5))
    template_size: int | None = None
    search_size: int | None = None
    # parabolic sub-pixel refinement of the translation peak
    subpixel: bool = True
    refine_iters: int = 2

    def __post_init__(self):
        for name, vals, ident in (("scale", self.scale_factors, 1.0), ("rotation", self.rotation_factors, 0.0)):
            if not vals:
                raise ValueError(f"{name} factors must be non-empty")
            if ident not in vals:
                raise ValueError(f"{name} factors must contain the identity {ident}")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} factors must be strictly increasing")
        if self.template_size and self.search_size and self.search_size <= self.template_size:
            raise ValueError("search_size must exceed template_size")

    def sizes(self, shape: tuple[int, ...]) -> tuple[int, int]:
        side = min(shape[:2])
        ts = self.template_size or side // 2
        ss = self.search_size or ts + 2 * max(2, side // 8)
        return ts, ss


@dataclass
class MotionEstimate:
    transform: SimilarityTransform
    peak_response: float
    heatmaps: dict = field(default_factory=dict, repr=False)
    degenerate: bool = False


def mask_target(frame: np.ndarray, box: BoundingBox | Sequence[BoundingBox]) -> np.ndarray:
    """Replace pixels whose centres fall inside ``box`` with the whole-frame mean."""
    img = to_gray(frame).copy()
    mean = img.mean()
    boxes = [box] if isinstance(box, BoundingBox) else list(box)
    h, w = img.shape
    for b in boxes:
        j0, j1 = max(0, math.ceil(b.x0)), min(w, math.ceil(b.x1))
        i0, i1 = max(0, math.ceil(b.y0)), min(h, math.ceil(b.y1))
        if j1 > j0 and i1 > i0:
            img[i0:i1, j0:j1] = mean
    return img


def match_background(template: np.ndarray, search: np.ndarray, embedding: Embedding | None = None) -> np.ndarray:
    """Normalised cross-correlation heatmap of the embedded template over the embedded search."""
    emb = embedding or Embedding()
    ft, fs = emb(template), emb(search)
    if ft.shape[1] > fs.shape[1] or ft.shape[2] > fs.shape[2]:
        raise ValueError(f"embedded template {ft.shape[1:]} does not fit in search {fs.shape[1:]}")
    return normalized_cross_correlate(fs, ft)


def _preference(c: float, r: float) -> tuple:
    # lower sorts first: identity, then small |scale-1|, then small |rotation|
    return (not (c == 1.0 and r == 0.0), abs(c - 1.0), abs(r))


def _best(cands: list[tuple[float, float, float]]) -> tuple[float, float, float]:
    top = max(p for p, _, _ in cands)
    tied = [x for x in cands if x[0] >= top - TIE_TOL]
    return min(tied, key=lambda x: _preference(x[1], x[2]))


def estimate_transform(
    prev: np.ndarray,
    cur: np.ndarray,
    target_box: BoundingBox | Sequence[BoundingBox] | None,
    cfg: PyramidConfig | None = None,
    embedding: Embedding | None = None,
) -> MotionEstimate:
    cfg = cfg or PyramidConfig()
    emb = embedding or Embedding()
    a, b = to_gray(prev), to_gray(cur)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if target_box is not None:
        a, b = mask_target(a, target_box), mask_target(b, target_box)
    ts, ss = cfg.sizes(a.shape)
    ctr = frame_center(a.shape)
    template = crop_patch(a, ctr, ts)

    heatmaps = {}

    def run(c: float, r: float) -> float:
        if (c, r) not in heatmaps:
            search = sample_patch(b, ctr, ss, rotation=-r, scale=1.0 / c)
            heatmaps[(c, r)] = match_background(template, search, emb)
        g = heatmaps[(c, r)]
        return _interpolated_peak(g) if cfg.subpixel else float(g.max())

    # rotation set at unit scale, then the scale set at the chosen rotation
    _, _, r_best = _best([(run(1.0, r), 1.0, r) for r in cfg.rotation_factors])
    _, c_best, _ = _best([(run(c, r_best), c, r_best) for c in cfg.scale_factors])

    spread = max(float(g.max() - g.min()) for g in heatmaps.values())
    if spread < FLAT_TOL:
        log.debug("flat background heatmaps; returning identity")
        return MotionEstimate(SimilarityTransform.identity(), 0.0, heatmaps, degenerate=True)
    g = heatmaps[(c_best, r_best)]
    peak = float(g.max())
    p = _peak_offset(g, refine=False) * emb.stride
    # a perfect match is an exact integer alignment; leave it unrefined
    if cfg.subpixel and peak < 1.0 - TIE_TOL:
        p = _peak_offset(g, refine=True) * emb.stride
        back = SimilarityTransform(-r_best, 1.0 / c_best).linear
        for _ in range(cfg.refine_iters):
            # re-centre the search on the estimate and measure the residual,
            # which sits near zero where the parabola fit is unbiased
            shifted = Point2(ctr.x + back[0] @ p, ctr.y + back[1] @ p)
            search = sample_patch(b, shifted, ss, rotation=-r_best, scale=1.0 / c_best)
            p = p + _peak_offset(match_background(template, search, emb), refine=True) * emb.stride
    # the template reappears at -v in the resampled search
    v = (-float(p[0]), -float(p[1]))
    return MotionEstimate(SimilarityTransform(r_best, c_best, v), peak, heatmaps)


def _interpolated_peak(g: np.ndarray) -> float:
    """Height of the parabolic fits through the maximum, so hypotheses are
    compared at their sub-pixel optimum rather than on the integer grid.

    Capped at 1, the largest possible correlation, so an exact match still ties.
    """
    i, j = np.unravel_index(int(np.argmax(g)), g.shape)
    g0 = float(g[i, j])
    out = g0
    pairs = []
    if 0 < i < g.shape[0] - 1:
        pairs.append((g[i - 1, j], g[i + 1, j]))
    if 0 < j < g.shape[1] - 1:
        pairs.append((g[i, j - 1], g[i, j + 1]))
    for gm, gp in pairs:
        den = gm - 2.0 * g0 + gp
        if den < 0:
            out += float(-((gm - gp) ** 2) / (8.0 * den))
    return min(out, 1.0)


def _peak_offset(g: np.ndarray, refine: bool) -> np.ndarray:
    """(x, y) position of the heatmap maximum relative to the heatmap centre, in cells."""
    i, j = np.unravel_index(int(np.argmax(g)), g.shape)
    if refine:
        i, j = refine_peak(g, int(i), int(j))
    return np.array([j - (g.shape[1] - 1) / 2.0, i - (g.shape[0] - 1) / 2.0])


def estimate_steps(
    frames: Sequence[np.ndarray],
    boxes: Sequence[BoundingBox] | None,
    cfg: PyramidConfig | None = None,
    embedding: Embedding | None = None,
) -> list[MotionEstimate]:
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    if boxes is not None and len(boxes) != len(frames):
        raise ValueError("one box per frame required")
    out = []
    for k in range(1, len(frames)):
        mask = None if boxes is None else [boxes[k - 1], boxes[k]]
        out.append(estimate_transform(frames[k - 1], frames[k], mask, cfg, embedding))
    return out


def background_motion_sequence(
    frames: Sequence[np.ndarray],
    boxes: Sequence[BoundingBox] | None,
    cfg: PyramidConfig | None = None,
    embedding: Embedding | None = None,
    strict: bool = False,
) -> list[np.ndarray]:
    """Accumulated background motion for frames 1..n-1 relative to frame 0."""
    steps = estimate_steps(frames, boxes, cfg, embedding)
    return accumulate_motion([s.transform for s in steps], strict=strict)
