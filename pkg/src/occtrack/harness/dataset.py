"""Sequence records and the OTB-style on-disk layout.

A sequence directory holds::

    img/00000001.png ...      frames, 1-based, zero padded to 8 digits
    groundtruth_rect.txt      one ``x,y,w,h`` line per frame (top-left corner)
    occlusion.txt             optional, one 0/1 per line
    camera.txt                optional, one ``r,c,vx,vy`` per frame (synthetic ground truth)
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import BoundingBox, SimilarityTransform


@dataclass
class SequenceRecord:
    frames: list[np.ndarray]
    boxes: list[BoundingBox]
    occluded: list[bool] = field(default_factory=list)
    camera: list[SimilarityTransform] | None = None
    name: str = ""

    def __post_init__(self):
        if not self.occluded:
            self.occluded = [False] * len(self.frames)
        if not (len(self.frames) == len(self.boxes) == len(self.occluded)):
            raise ValueError(
                f"length mismatch: {len(self.frames)} frames, {len(self.boxes)} boxes, {len(self.occluded)} flags"
            )
        if self.camera is not None and len(self.camera) != len(self.frames):
            raise ValueError("camera script must have one transform per frame")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def centers(self) -> np.ndarray:
        return np.array([[b.cx, b.cy] for b in self.boxes])


def _parse_floats(line: str, n: int, path: Path, lineno: int) -> list[float]:
    parts = [p for p in re.split(r"[,\s]+", line.strip()) if p]
    if len(parts) != n:
        raise ValueError(f"{path}:{lineno}: expected {n} values, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ValueError(f"{path}:{lineno}: malformed number in {line.strip()!r}") from None


def _data_lines(path: Path) -> list[tuple[int, str]]:
    lines = path.read_text().splitlines()
    return [(k + 1, ln) for k, ln in enumerate(lines) if ln.strip()]


def save_sequence(rec: SequenceRecord, directory: str | Path) -> Path:
    d = Path(directory)
    (d / "img").mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(rec.frames):
        arr = np.asarray(frame)
        if arr.dtype != np.uint8:
            raise ValueError("frames must be uint8 to be stored losslessly")
        Image.fromarray(arr).save(d / "img" / f"{k + 1:08d}.png")
    with open(d / "groundtruth_rect.txt", "w") as f:
        for b in rec.boxes:
            f.write(",".join(repr(float(v)) for v in b.to_xywh()) + "\n")
    with open(d / "occlusion.txt", "w") as f:
        f.writelines(f"{int(o)}\n" for o in rec.occluded)
    if rec.camera is not None:
        with open(d / "camera.txt", "w") as f:
            for t in rec.camera:
                f.write(",".join(repr(float(v)) for v in (t.r, t.c, t.v[0], t.v[1])) + "\n")
    return d


def load_sequence(directory: str | Path) -> SequenceRecord:
    d = Path(directory)
    images = sorted((d / "img").glob("*.png"))
    if not images:
        raise ValueError(f"{d}: no frames under img/")
    for k, p in enumerate(images):
        if p.name != f"{k + 1:08d}.png":
            raise ValueError(f"{d}: frame files not contiguous at {p.name}")
    gt_path = d / "groundtruth_rect.txt"
    gt_lines = _data_lines(gt_path)
    if len(gt_lines) != len(images):
        raise ValueError(f"{d}: {len(images)} frames but {len(gt_lines)} ground-truth lines")
    boxes = []
    for lineno, ln in gt_lines:
        x, y, w, h = _parse_floats(ln, 4, gt_path, lineno)
        try:
            boxes.append(BoundingBox.from_xywh(x, y, w, h))
        except ValueError as e:
            raise ValueError(f"{gt_path}:{lineno}: {e}") from None
    occluded = [False] * len(images)
    occ_path = d / "occlusion.txt"
    if occ_path.exists():
        occ_lines = _data_lines(occ_path)
        if len(occ_lines) != len(images):
            raise ValueError(f"{d}: {len(images)} frames but {len(occ_lines)} occlusion lines")
        occluded = []
        for lineno, ln in occ_lines:
            if ln.strip() not in ("0", "1"):
                raise ValueError(f"{occ_path}:{lineno}: expected 0 or 1, got {ln.strip()!r}")
            occluded.append(ln.strip() == "1")
    camera = None
    cam_path = d / "camera.txt"
    if cam_path.exists():
        camera = []
        for lineno, ln in _data_lines(cam_path):
            r, c, vx, vy = _parse_floats(ln, 4, cam_path, lineno)
            camera.append(SimilarityTransform(r, c, (vx, vy)))
        if len(camera) != len(images):
            raise ValueError(f"{d}: {len(images)} frames but {len(camera)} camera lines")
    frames = [np.asarray(Image.open(p)) for p in images]
    return SequenceRecord(frames, boxes, occluded, camera, name=d.name)


def load_suite(directory: str | Path) -> list[SequenceRecord]:
    """A single sequence directory, or a directory of sequence directories."""
    d = Path(directory)
    if (d / "img").is_dir():
        return [load_sequence(d)]
    subs = sorted(p for p in d.iterdir() if (p / "img").is_dir())
    if not subs:
        raise ValueError(f"{d}: no sequences found")
    return [load_sequence(p) for p in subs]
