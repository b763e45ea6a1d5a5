"""Points, boxes, similarity transforms and dense score maps.

Coordinate convention: pixel ``(row i, col j)`` is centred at ``x = j, y = i``.
Boxes are continuous rectangles given by centre and size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Point2":
        return cls(float(a[0]), float(a[1]))

    def __add__(self, other: "Point2") -> "Point2":
        return Point2(self.x + other.x, self.y + other.y)

    def __sub__(self, other: "Point2") -> "Point2":
        return Point2(self.x - other.x, self.y - other.y)

    def distance(self, other: "Point2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive size, got w={self.w}, h={self.h}")

    @property
    def center(self) -> Point2:
        return Point2(self.cx, self.cy)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.w, self.h)

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    def moved_to(self, p: Point2) -> "BoundingBox":
        return BoundingBox(p.x, p.y, self.w, self.h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        """Top-left ``x, y, w, h`` form."""
        return (self.x0, self.y0, self.w, self.h)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(x + w / 2, y + h / 2, w, h)


def _rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class SimilarityTransform:
    """Rotation ``r`` (radians), scale ``c`` and translation ``v`` between two frames.

    As a camera motion from frame ``t-1`` to ``t`` it means
    ``cur(p) = prev(apply_transform(T, p))``: the current view, expressed in
    the previous frame's coordinates.
    """

    r: float = 0.0
    c: float = 1.0
    v: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"scale must be positive, got {self.c}")
        object.__setattr__(self, "v", (float(self.v[0]), float(self.v[1])))

    @property
    def rotation_matrix(self) -> np.ndarray:
        return _rotation_matrix(self.r)

    @property
    def linear(self) -> np.ndarray:
        """The 2x2 matrix ``r * c``."""
        return self.c * self.rotation_matrix

    @property
    def is_identity(self) -> bool:
        return self.r == 0.0 and self.c == 1.0 and self.v == (0.0, 0.0)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()


def apply_transform(t: SimilarityTransform, p: Point2, center: Point2 | None = None) -> Point2:
    """Return ``r*c*(p - center) + center + v``; the pivot defaults to the origin."""
    ctr = np.zeros(2) if center is None else center.as_array()
    q = t.linear @ (p.as_array() - ctr) + ctr + np.asarray(t.v)
    return Point2.from_array(q)


def accumulate_motion(steps: Sequence[SimilarityTransform], strict: bool = False) -> list[np.ndarray]:
    """Running background motion over consecutive frame-pair transforms.

    Default form: ``m_1 = r_1 c_1 v_1`` and ``m_t = r_t c_t v_t + m_{t-1}``.
    With ``strict=True`` the translation part of the full composition is used
    instead: ``m_t = r_t c_t m_{t-1} + v_t`` (base case ``v_1``).
    """
    if len(steps) == 0:
        raise ValueError("no motion steps")
    out: list[np.ndarray] = []
    m = None
    for s in steps:
        v = np.asarray(s.v, dtype=np.float64)
        if strict:
            m = v.copy() if m is None else s.linear @ m + v
        else:
            step = s.linear @ v
            m = step if m is None else step + m
        out.append(m)
    return out


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return float(min(1.0, max(0.0, inter / union)))


@dataclass
class ScoreMap:
    """Dense 2-D score array plus the mapping from cells to frame pixels.

    Cell ``(i, j)`` sits at pixel ``(origin[0] + j*scale, origin[1] + i*scale)``.
    """

    values: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def cell_to_pixel(self, i: float, j: float) -> Point2:
        return Point2(self.origin[0] + j * self.scale, self.origin[1] + i * self.scale)

    def pixel_to_cell(self, p: Point2) -> tuple[int, int]:
        j = int(round((p.x - self.origin[0]) / self.scale))
        i = int(round((p.y - self.origin[1]) / self.scale))
        return i, j

    def value_at(self, p: Point2, default: float = float("nan")) -> float:
        i, j = self.pixel_to_cell(p)
        h, w = self.values.shape
        if 0 <= i < h and 0 <= j < w:
            return float(self.values[i, j])
        return default


def default_sigma(shape: tuple[int, int]) -> float:
    return min(shape[:2]) / 10.0


def gaussian_location_map(
    peak: Point2,
    sigma: float | None = None,
    shape: tuple[int, int] = (64, 64),
    origin: tuple[float, float] = (0.0, 0.0),
    scale: float = 1.0,
) -> ScoreMap:
    """Unit-amplitude Gaussian bump centred on ``peak`` (pixel coordinates)."""
    if sigma is None:
        sigma = default_sigma(shape) * scale
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = shape
    xs = origin[0] + np.arange(w) * scale
    ys = origin[1] + np.arange(h) * scale
    gx = np.exp(-((xs - peak.x) ** 2) / (2 * sigma**2))
    gy = np.exp(-((ys - peak.y) ** 2) / (2 * sigma**2))
    return ScoreMap(np.outer(gy, gx), origin, scale)


def refine_peak(vals: np.ndarray, i: int, j: int) -> tuple[float, float]:
    """Sub-cell peak position from a parabola through the peak and its two
    neighbours along each axis; border cells and non-concave fits stay put."""
    out = [float(i), float(j)]
    rows, cols = vals.shape
    fits = []
    if 0 < i < rows - 1:
        fits.append((0, vals[i - 1, j], vals[i + 1, j]))
    if 0 < j < cols - 1:
        fits.append((1, vals[i, j - 1], vals[i, j + 1]))
    g0 = vals[i, j]
    for axis, gm, gp in fits:
        den = gm - 2.0 * g0 + gp
        if np.isfinite(den) and den < 0:
            out[axis] += float(np.clip(0.5 * (gm - gp) / den, -0.5, 0.5))
    return out[0], out[1]


def argmax_location(m: ScoreMap, subpixel: bool = False) -> Point2:
    """Pixel position of the maximal cell; ties go to the lowest row, then column.

    With ``subpixel`` the position is refined by :func:`refine_peak`.
    """
    vals = np.asarray(m.values, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("empty score map")
    if np.all(np.isnan(vals)):
        raise ValueError("score map is all NaN")
    # nanargmax returns the first occurrence in row-major order
    flat = int(np.nanargmax(vals))
    i, j = np.unravel_index(flat, vals.shape)
    if subpixel:
        return m.cell_to_pixel(*refine_peak(vals, int(i), int(j)))
    return m.cell_to_pixel(i, j)


def to_gray(frame: np.ndarray) -> np.ndarray:
    """Float64 single-channel view of a frame (channel mean for colour input)."""
    a = np.asarray(frame, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=2)
    return a


def frame_center(shape: tuple[int, ...]) -> Point2:
    return Point2((shape[1] - 1) / 2.0, (shape[0] - 1) / 2.0)


def sample_patch(
    image: np.ndarray,
    center: Point2,
    size: int | tuple[int, int],
    rotation: float = 0.0,
    scale: float = 1.0,
    order: int = 1,
    cval: float | None = None,
) -> np.ndarray:
    """Resample a ``size`` window around ``center`` whose axes are rotated by
    ``rotation`` and stretched by ``scale`` (pixels in image per patch pixel).

    Samples outside the image take ``cval`` (image mean by default).
    """
    img = to_gray(image)
    if isinstance(size, int):
        size = (size, size)
    h, w = size
    if cval is None:
        cval = float(img.mean())
    u = np.arange(w) - (w - 1) / 2.0
    vv = np.arange(h) - (h - 1) / 2.0
    uu, vv = np.meshgrid(u, vv)
    a = scale * _rotation_matrix(rotation)
    xs = a[0, 0] * uu + a[0, 1] * vv + center.x
    ys = a[1, 0] * uu + a[1, 1] * vv + center.y
    return ndimage.map_coordinates(img, [ys, xs], order=order, mode="constant", cval=cval)


def warp_image(image: np.ndarray, t: SimilarityTransform, order: int = 1, cval: float | None = None) -> np.ndarray:
    """Render the view ``out(p) = image(apply_transform(t, p, frame centre))``."""
    img = to_gray(image)
    h, w = img.shape
    ctr = frame_center(img.shape)
    shifted = Point2(ctr.x + t.v[0], ctr.y + t.v[1])
    return sample_patch(img, shifted, (h, w), rotation=t.r, scale=t.c, order=order, cval=cval)
