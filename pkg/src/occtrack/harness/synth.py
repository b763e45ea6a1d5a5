"""Seeded synthetic sequences: a textured target over a textured world, seen
through a scripted camera, with optional total occlusions."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..geometry import BoundingBox, SimilarityTransform, frame_center
from .dataset import SequenceRecord

MOTIONS = ("constant-velocity", "sinusoid", "piecewise")
CAMERAS = ("static", "pan", "pan-stop", "shake")
GT_QUANTUM = 1.0 / 1024


@dataclass(frozen=True)
class SynthConfig:
    frame_shape: tuple[int, int] = (64, 64)
    length: int = 40
    target_size: tuple[float, float] = (12.0, 12.0)
    start: tuple[float, float] | None = None
    motion: str = "constant-velocity"
    velocity: tuple[float, float] = (0.0, 0.0)
    amplitude: tuple[float, float] = (0.0, 0.0)
    period: float = 20.0
    # piecewise motion: (first_frame, vx, vy) per segment
    segments: tuple[tuple[float, float, float], ...] = ()
    camera: str = "static"
    camera_velocity: tuple[float, float] = (0.0, 0.0)
    camera_stop: int = 0
    camera_shake: float = 0.0
    camera_rotation: float = 0.0
    camera_scale: float = 1.0
    # explicit per-frame camera steps (frame 0 is ignored); overrides the fields above
    camera_steps: tuple[SimilarityTransform, ...] = ()
    # half-open [start, end) frame intervals of total occlusion
    occlusions: tuple[tuple[int, int], ...] = ()
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion model {self.motion!r}")
        if self.camera not in CAMERAS:
            raise ValueError(f"unknown camera script {self.camera!r}")
        if self.length < 1:
            raise ValueError("length must be positive")
        for s, e in self.occlusions:
            if not (0 <= s < e <= self.length):
                raise ValueError(f"occlusion window {s}-{e} outside sequence of length {self.length}")
        if self.camera_steps and len(self.camera_steps) != self.length:
            raise ValueError("camera_steps needs one transform per frame")


def _texture(rng: np.random.Generator, shape, fine: float, coarse: float, lo: float, hi: float) -> np.ndarray:
    a = ndimage.gaussian_filter(rng.standard_normal(shape), fine)
    b = ndimage.gaussian_filter(rng.standard_normal(shape), coarse)
    t = a / (a.std() + 1e-12) + 0.7 * b / (b.std() + 1e-12)
    t = (t - t.min()) / (t.max() - t.min() + 1e-12)
    return lo + (hi - lo) * t


def _blocks(rng: np.random.Generator, shape, cells: int, lo: float, hi: float) -> np.ndarray:
    grid = rng.uniform(lo, hi, size=(cells, cells))
    ys = np.minimum((np.arange(shape[0]) * cells) // shape[0], cells - 1)
    xs = np.minimum((np.arange(shape[1]) * cells) // shape[1], cells - 1)
    return grid[np.ix_(ys, xs)]


def camera_script(cfg: SynthConfig, rng: np.random.Generator) -> list[SimilarityTransform]:
    if cfg.camera_steps:
        return [SimilarityTransform.identity()] + list(cfg.camera_steps[1:])
    steps = [SimilarityTransform.identity()]
    for t in range(1, cfg.length):
        v = np.asarray(cfg.camera_velocity, dtype=np.float64)
        if cfg.camera == "static":
            v = np.zeros(2)
        elif cfg.camera == "pan-stop" and t >= cfg.camera_stop:
            v = np.zeros(2)
        if cfg.camera == "shake" or cfg.camera_shake > 0:
            v = v + rng.normal(0.0, cfg.camera_shake, size=2)
        steps.append(SimilarityTransform(cfg.camera_rotation, cfg.camera_scale, tuple(v)))
    return steps


def target_path(cfg: SynthConfig) -> np.ndarray:
    """World-space target centres, shape (length, 2); world = frame 0 coordinates."""
    start = np.asarray(cfg.start if cfg.start is not None else frame_center(cfg.frame_shape).as_array(), float)
    t = np.arange(cfg.length, dtype=np.float64)[:, None]
    vel = np.asarray(cfg.velocity, dtype=np.float64)
    if cfg.motion == "constant-velocity":
        return start + vel * t
    if cfg.motion == "sinusoid":
        amp = np.asarray(cfg.amplitude, dtype=np.float64)
        return start + vel * t + amp * np.sin(2 * np.pi * t / cfg.period)
    segs = sorted(cfg.segments) or [(0, *cfg.velocity)]
    path = [start]
    for k in range(1, cfg.length):
        v = np.asarray(segs[0][1:], float)
        for first, vx, vy in segs:
            if k - 1 >= first:
                v = np.array([vx, vy])
        path.append(path[-1] + v)
    return np.array(path)


def _sample_sprite(sprite: np.ndarray, qx, qy, center, size):
    ux = qx - center[0]
    uy = qy - center[1]
    inside = (np.abs(ux) < size[0] / 2) & (np.abs(uy) < size[1] / 2)
    h, w = sprite.shape
    vals = ndimage.map_coordinates(
        sprite, [uy * h / size[1] + h / 2 - 0.5, ux * w / size[0] + w / 2 - 0.5], order=0, mode="nearest"
    )
    return inside, vals


def _quantize(v: float) -> float:
    return round(v / GT_QUANTUM) * GT_QUANTUM


def generate_sequence(cfg: SynthConfig) -> SequenceRecord:
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.frame_shape
    canvas = (4 * h, 4 * w)
    offset = np.array([1.5 * w, 1.5 * h])
    world = _texture(rng, canvas, 1.5, 5.0, 40.0, 215.0)
    tw, th = cfg.target_size
    sprite = _blocks(rng, (max(4, int(th)), max(4, int(tw))), 4, 0.0, 255.0)
    occ_sprite = _texture(rng, (48, 48), 1.0, 3.0, 20.0, 235.0)
    steps = camera_script(cfg, np.random.default_rng([cfg.seed, 1]))
    path = target_path(cfg)

    occluders = []
    for s, e in cfg.occlusions:
        pts = path[s:e]
        margin = 2.0
        lo = pts.min(axis=0) - np.array([tw, th]) / 2 - margin
        hi = pts.max(axis=0) + np.array([tw, th]) / 2 + margin
        occluders.append((s, e, (lo + hi) / 2, hi - lo))

    ctr = frame_center(cfg.frame_shape).as_array()
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    M, b = np.eye(2), np.zeros(2)
    frames, boxes, flags = [], [], []
    outside = 0
    for t in range(cfg.length):
        if t > 0:
            L = steps[t].linear
            b = M @ (ctr - L @ ctr + np.asarray(steps[t].v)) + b
            M = M @ L
        qx = M[0, 0] * jj + M[0, 1] * ii + b[0]
        qy = M[1, 0] * jj + M[1, 1] * ii + b[1]
        img = ndimage.map_coordinates(world, [qy + offset[1], qx + offset[0]], order=1, mode="reflect")
        inside, vals = _sample_sprite(sprite, qx, qy, path[t], (tw, th))
        img = np.where(inside, vals, img)
        occ = False
        for s, e, oc, osz in occluders:
            if s <= t < e:
                inside, vals = _sample_sprite(occ_sprite, qx, qy, oc, osz)
                img = np.where(inside, vals, img)
                occ = True
        if cfg.noise > 0:
            img = img + rng.normal(0.0, cfg.noise * 255.0, size=img.shape)
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))

        c = np.linalg.solve(M, path[t] - b)
        zoom = math.sqrt(abs(np.linalg.det(M)))
        if not (0 <= c[0] <= w - 1 and 0 <= c[1] <= h - 1):
            outside += 1
        boxes.append(BoundingBox(_quantize(c[0]), _quantize(c[1]), _quantize(tw / zoom), _quantize(th / zoom)))
        flags.append(occ)
    if outside * 2 > cfg.length:
        raise ValueError("degenerate config: target outside the frame for most of the sequence")
    return SequenceRecord(frames, boxes, flags, steps, name=f"synth-{cfg.seed}")


def sample_config(seed: int, occlusion: bool = False, camera: str | None = None, **overrides) -> SynthConfig:
    """Draw a varied scenario whose target stays well inside the frame.

    Camera scripts either stay still, pan along with the target, or shake.
    """
    rng = np.random.default_rng([seed, 7919])
    if occlusion and overrides.get("length", 40) < 8:
        raise ValueError("occluded sequences need at least 8 frames")
    base = SynthConfig(**{k: v for k, v in overrides.items() if k in {f.name for f in fields(SynthConfig)}})
    h, w = base.frame_shape
    margin = max(base.target_size) / 2 + 3
    for _ in range(200):
        speed = rng.uniform(0.5, 2.0)
        ang = rng.uniform(0, 2 * np.pi)
        vel = (speed * math.cos(ang), speed * math.sin(ang))
        motion = rng.choice(MOTIONS, p=[0.5, 0.25, 0.25])
        cam = camera or rng.choice(CAMERAS, p=[0.25, 0.25, 0.15, 0.35])
        follow = rng.uniform(0.6, 1.0) if cam in ("pan", "pan-stop") or rng.random() < 0.5 else 0.0
        kw = dict(
            motion=str(motion),
            velocity=vel,
            camera=str(cam),
            camera_velocity=(vel[0] * follow, vel[1] * follow),
            camera_stop=int(rng.integers(base.length // 3, base.length)),
            camera_shake=float(rng.uniform(0.8, 2.0)) if cam == "shake" else 0.0,
            start=(w / 2 + rng.uniform(-8, 8), h / 2 + rng.uniform(-8, 8)),
            seed=int(rng.integers(2**31)),
            noise=float(rng.uniform(0.0, 0.02)),
        )
        if motion == "sinusoid":
            kw["amplitude"] = (rng.uniform(-6, 6), rng.uniform(-6, 6))
            kw["period"] = float(rng.uniform(16, 40))
        elif motion == "piecewise":
            turn = int(rng.integers(5, base.length - 5))
            a2 = ang + rng.uniform(-np.pi / 2, np.pi / 2)
            kw["segments"] = ((0, *vel), (turn, speed * math.cos(a2), speed * math.sin(a2)))
        if occlusion:
            lo = max(1, min(14, base.length - 11))
            s = int(rng.integers(lo, max(lo + 1, base.length - 10)))
            kw["occlusions"] = ((s, s + 5),)
        kw.update({k: v for k, v in overrides.items() if k not in ("frame_shape", "length", "target_size")})
        cfg = replace(base, **kw)
        if _stays_inside(cfg, margin):
            return cfg
    raise RuntimeError("could not sample a non-degenerate configuration")


def _stays_inside(cfg: SynthConfig, margin: float) -> bool:
    steps = camera_script(cfg, np.random.default_rng([cfg.seed, 1]))
    path = target_path(cfg)
    h, w = cfg.frame_shape
    ctr = frame_center(cfg.frame_shape).as_array()
    M, b = np.eye(2), np.zeros(2)
    for t in range(cfg.length):
        if t > 0:
            L = steps[t].linear
            b = M @ (ctr - L @ ctr + np.asarray(steps[t].v)) + b
            M = M @ L
        c = np.linalg.solve(M, path[t] - b)
        if not (margin <= c[0] <= w - 1 - margin and margin <= c[1] <= h - 1 - margin):
            return False
    return True


# --- line-based ``key: value`` configs -------------------------------------------------

_TUPLE_KEYS = {"frame_shape", "target_size", "start", "velocity", "amplitude", "camera_velocity"}


def parse_config(text: str) -> tuple[SynthConfig, dict]:
    """Parse ``key: value`` lines into a config plus any extra keys (e.g. ``count``)."""
    known = {f.name: f for f in fields(SynthConfig)}
    kw, extra = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ValueError(f"line {lineno}: expected 'key: value'")
        key, val = (s.strip() for s in line.split(":", 1))
        key = key.replace("-", "_")
        try:
            if key not in known:
                extra[key] = val
            elif key in _TUPLE_KEYS:
                nums = [float(x) for x in val.split(",")]
                kw[key] = tuple(int(x) for x in nums) if key == "frame_shape" else tuple(nums)
            elif key == "occlusions":
                kw[key] = tuple(tuple(int(x) for x in part.split("-")) for part in val.split(",") if part.strip())
            elif key == "segments":
                segs = []
                for part in val.split(";"):
                    first, v = part.split(":") if ":" in part else part.split("@")
                    vx, vy = (float(x) for x in v.split(","))
                    segs.append((int(first), vx, vy))
                kw[key] = tuple(segs)
            elif key in ("length", "camera_stop", "seed"):
                kw[key] = int(val)
            elif key in ("motion", "camera"):
                kw[key] = val
            else:
                kw[key] = float(val)
        except ValueError as e:
            raise ValueError(f"line {lineno}: bad value for {key}: {e}") from None
    return SynthConfig(**kw), extra


def load_config(path: str | Path) -> tuple[SynthConfig, dict]:
    return parse_config(Path(path).read_text())
