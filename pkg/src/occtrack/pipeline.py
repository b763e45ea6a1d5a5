"""Per-frame orchestration: tracker, background motion, trajectory forecast and
calibrated selection between the two candidate locations."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import assess as A
from .bgmotion import PyramidConfig, estimate_transform
from .geometry import BoundingBox, Point2, SimilarityTransform, accumulate_motion
from .tracker import CrossCorrelationTracker, Tracker, TrackOutput
from .trajnet import TrajectoryNet, compensate, predict

log = logging.getLogger(__name__)

TRACKER, TRAJECTORY = "tracker", "trajectory"


@dataclass
class Models:
    """Frozen models shared read-only by every sequence being tracked."""

    traj: TrajectoryNet | None = None
    assess: A.AssessNet | None = None
    temperature: float = 1.0
    tau: float = 0.5
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    tracker_factory: Callable[[], Tracker] = CrossCorrelationTracker
    strict_motion: bool = False

    @property
    def past_len(self) -> int:
        return self.traj.cfg.past_len if self.traj is not None else 11


@dataclass(frozen=True)
class PipelineConfig:
    lazy: bool = True
    tracker_only: bool = False
    calibrate: bool = True
    compensate: bool = True
    # "network": heatmap evidence enters the assessment net;
    # "weight": the net's score is multiplied by the heatmap value at the candidate
    selection: str = "network"

    def __post_init__(self):
        if self.selection not in ("network", "weight"):
            raise ValueError(f"unknown selection {self.selection!r}")


@dataclass
class PipelineState:
    frames: deque
    locations: deque
    steps: deque
    tracker: Tracker
    box_size: tuple[float, float]
    frame_shape: tuple[int, ...]
    models: Models
    cfg: PipelineConfig
    index: int = 0


@dataclass
class FrameResult:
    frame_index: int
    location: Point2
    box: BoundingBox
    branch: str
    tracker_candidate: Point2 | None = None
    traj_candidate: Point2 | None = None
    s_tracker: float | None = None
    s_traj: float | None = None
    futures: list[Point2] = field(default_factory=list)
    peak_score: float | None = None
    step: SimilarityTransform | None = None
    warning: str | None = None

    def to_json(self) -> dict:
        return {
            "frame_index": self.frame_index,
            "x": self.box.x0,
            "y": self.box.y0,
            "w": self.box.w,
            "h": self.box.h,
            "branch": self.branch,
            "s_tracker": self.s_tracker,
            "s_traj": self.s_traj,
            "futures": [[p.x, p.y] for p in self.futures],
        }


def initialize(
    frame0: np.ndarray, box0: BoundingBox, models: Models, cfg: PipelineConfig | None = None
) -> tuple[PipelineState, FrameResult]:
    """Fill the history with copies of the first frame, as if the target stood still."""
    shape = np.asarray(frame0).shape
    h, w = shape[:2]
    if not (0 <= box0.cx <= w - 1 and 0 <= box0.cy <= h - 1):
        raise ValueError(f"initial box centre ({box0.cx}, {box0.cy}) outside the {w}x{h} frame")
    n = models.past_len
    tracker = models.tracker_factory()
    tracker.init(frame0, box0)
    state = PipelineState(
        frames=deque([frame0] * n, maxlen=n),
        locations=deque([box0.center] * n, maxlen=n),
        steps=deque([SimilarityTransform.identity()] * n, maxlen=n),
        tracker=tracker,
        box_size=(box0.w, box0.h),
        frame_shape=shape,
        models=models,
        cfg=cfg or PipelineConfig(),
    )
    return state, FrameResult(0, box0.center, box0, TRACKER)


def _motion(steps: Sequence[SimilarityTransform], strict: bool) -> tuple[np.ndarray, np.ndarray]:
    """Accumulated motion of the buffered frames (oldest at zero) and the increment into the current one."""
    m = np.vstack([np.zeros((1, 2)), np.array(accumulate_motion(list(steps[1:]), strict=strict))])
    return m[:-1], m[-1] - m[-2]


def score_candidates(
    state: PipelineState,
    candidates: dict[str, Point2],
    history: list[Point2],
    step_now: np.ndarray,
    heatmaps: dict[str, object],
) -> tuple[dict[str, float], dict[str, float]]:
    """Calibrated scores per candidate, and the keys the selection compares.

    With network selection the keys are the scaled logit margins, which order
    candidates exactly like the scores but cannot saturate into a tie.
    """
    models = state.models
    T = models.temperature if state.cfg.calibrate else 1.0
    inputs = []
    for name, cand in candidates.items():
        rec = A.CandidateRecord(state.index, cand, history, tuple(step_now), heatmaps[name], state.frame_shape[:2])
        inputs.append(A.make_input(rec, cand, state.box_size))
    logits = A.score_raw_batch(inputs, models.assess)
    probs = A.positive_probability(logits, T)
    keys = A.margin(logits, T)
    if state.cfg.selection == "weight":
        w = [heatmaps[TRACKER].value_at(c, default=0.0) for c in candidates.values()]
        probs = probs * np.clip(w, 0.0, 1.0)
        keys = probs
    return dict(zip(candidates, map(float, probs))), dict(zip(candidates, map(float, keys)))


def step(state: PipelineState, frame: np.ndarray) -> FrameResult:
    models, cfg = state.models, state.cfg
    state.index += 1
    out: TrackOutput = state.tracker.track(frame)
    l_trk = out.location
    prev_loc = state.locations[-1]
    masks = [BoundingBox(p.x, p.y, *state.box_size) for p in (prev_loc, l_trk)]
    warning = None
    try:
        est = estimate_transform(state.frames[-1], frame, masks, models.pyramid)
        step_t = est.transform
        if est.degenerate:
            warning = "background motion degenerate"
    except ValueError as e:
        step_t, warning = SimilarityTransform.identity(), f"background motion failed: {e}"
    box_size = (state.box_size[0] / step_t.c, state.box_size[1] / step_t.c)

    run_traj = not cfg.tracker_only and models.traj is not None and models.assess is not None
    if run_traj and cfg.lazy and out.peak_score >= models.tau:
        run_traj = False
    if run_traj and warning is not None:
        log.warning("frame %d: %s; keeping tracker output", state.index, warning)
        run_traj = False

    result = FrameResult(
        state.index, l_trk, BoundingBox(l_trk.x, l_trk.y, *box_size), TRACKER,
        tracker_candidate=l_trk, peak_score=out.peak_score, step=step_t, warning=warning,
    )
    if run_traj:
        steps = list(state.steps)[1:] + [step_t]
        motion, step_now = _motion([SimilarityTransform.identity()] + steps, models.strict_motion)
        if not (cfg.compensate and models.traj.cfg.compensate):
            motion, step_now = np.zeros_like(motion), np.zeros(2)
        pred = predict(list(state.frames), list(state.locations), motion, models.traj, step_now)
        l_traj = pred.locations[0]
        pts = np.array([[p.x, p.y] for p in state.locations])
        history = [Point2.from_array(p) for p in compensate(pts, motion, ref=len(pts) - 1)]
        # compensated history is relative to the newest frame, so the candidate offset is step_now
        traj_map = pred.response_maps[0] if models.assess.cfg.traj_heatmap == "response" else out.heatmap
        scores, keys = score_candidates(
            state, {TRACKER: l_trk, TRAJECTORY: l_traj}, history, step_now,
            {TRACKER: out.heatmap, TRAJECTORY: traj_map},
        )
        result.traj_candidate = l_traj
        result.s_tracker, result.s_traj = scores[TRACKER], scores[TRAJECTORY]
        result.futures = pred.locations[1:]
        if keys[TRAJECTORY] > keys[TRACKER]:
            result.branch = TRAJECTORY
            result.location = l_traj
            result.box = BoundingBox(l_traj.x, l_traj.y, *box_size)

    state.frames.append(frame)
    state.locations.append(result.location)
    state.steps.append(step_t)
    state.box_size = box_size
    state.tracker.last_location = result.location
    return result


def run_sequence(
    frames: Sequence[np.ndarray], box0: BoundingBox, models: Models, cfg: PipelineConfig | None = None
) -> list[FrameResult]:
    if len(frames) == 0:
        raise ValueError("empty sequence")
    state, first = initialize(frames[0], box0, models, cfg)
    results = [first]
    for f in frames[1:]:
        results.append(step(state, f))
    return results


def tracker_peaks(sequences, tracker_factory: Callable[[], Tracker] = CrossCorrelationTracker, clean_only: bool = True) -> np.ndarray:
    """Tracker peak scores on (unoccluded) frames, tracking from the previous ground truth."""
    peaks = []
    for seq in sequences:
        trk = tracker_factory()
        trk.init(seq.frames[0], seq.boxes[0])
        for t in range(1, len(seq)):
            trk.last_location = seq.boxes[t - 1].center
            out = trk.track(seq.frames[t])
            if not (clean_only and seq.occluded[t]):
                peaks.append(out.peak_score)
    return np.array(peaks)


def lazy_threshold(sequences, tracker_factory: Callable[[], Tracker] = CrossCorrelationTracker, q: float = 20.0) -> float:
    """The ``q``-th percentile of tracker peak scores on clean frames."""
    peaks = tracker_peaks(sequences, tracker_factory)
    if peaks.size == 0:
        raise ValueError("no clean frames to set the lazy threshold")
    return float(np.percentile(peaks, q))
