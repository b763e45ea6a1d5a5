"""End-to-end training of the trajectory and assessment models on synthetic suites."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import assess as A
from ..bgmotion import PyramidConfig
from ..geometry import Point2
from ..pipeline import Models, lazy_threshold
from ..tracker import CrossCorrelationTracker, Tracker
from ..trajnet import (
    TrajectoryNet,
    TrajectoryNetConfig,
    build_windows,
    compensate,
    predict,
    sequence_motion,
    train_trajectory,
)
from .synth import generate_sequence, sample_config

log = logging.getLogger(__name__)


def synthetic_suite(
    count: int, seed: int, occlusion: bool = False, camera: str | None = None, **overrides
) -> list:
    """``count`` sequences drawn from consecutive seeds starting at ``seed``."""
    return [generate_sequence(sample_config(seed + i, occlusion=occlusion, camera=camera, **overrides)) for i in range(count)]


def collect_candidates(
    seq,
    net: TrajectoryNet,
    motion: np.ndarray,
    tracker_factory: Callable[[], Tracker] = CrossCorrelationTracker,
    traj_heatmap: str = "tracker",
) -> list[A.CandidateRecord]:
    """Tracker and trajectory candidates for every frame, with ground-truth history.

    The history before frame 0 repeats frame 0, as at pipeline start-up.
    """
    n = net.cfg.past_len
    centers = seq.centers
    if not net.cfg.compensate:
        motion = np.zeros_like(motion)
    trk = tracker_factory()
    trk.init(seq.frames[0], seq.boxes[0])
    shape = np.asarray(seq.frames[0]).shape[:2]
    out = []
    for t in range(1, len(seq)):
        idx = np.clip(np.arange(t - n, t), 0, None)
        trk.last_location = Point2(*centers[t - 1])
        tout = trk.track(seq.frames[t])
        step_now = motion[t] - motion[t - 1]
        pred = predict([seq.frames[i] for i in idx], centers[idx], motion[idx], net, step_now)
        history = [Point2.from_array(p) for p in compensate(centers[idx], motion[idx], ref=n - 1)]
        traj_map = pred.response_maps[0] if traj_heatmap == "response" else tout.heatmap
        for cand, hm, src in ((tout.location, tout.heatmap, "tracker"), (pred.locations[0], traj_map, "trajectory")):
            out.append(A.CandidateRecord(t, cand, history, tuple(step_now), hm, shape, src))
    return out


def mine_suite(
    sequences: Sequence,
    net: TrajectoryNet,
    motions: Sequence[np.ndarray],
    seed: int = 0,
    tracker_factory: Callable[[], Tracker] = CrossCorrelationTracker,
    traj_heatmap: str = "tracker",
    hard_negatives: bool = True,
) -> list[A.LabeledSample]:
    rng = np.random.default_rng(seed)
    samples = []
    for seq, m in zip(sequences, motions):
        recs = collect_candidates(seq, net, m, tracker_factory, traj_heatmap)
        samples += A.mine_samples(recs, seq.boxes, rng, hard_negatives)
    return samples


@dataclass
class TrainingPlan:
    """Sizes and seeds of one full training run."""

    seed: int = 0
    traj_sequences: int = 40
    assess_sequences: int = 20
    calib_sequences: int = 10
    length: int = 40
    window_stride: int = 2
    traj_epochs: int = 20
    traj_lr: float = 2e-4
    assess_epochs: int = 40
    assess_lr: float = 1e-3
    tau_percentile: float = 20.0
    traj: TrajectoryNetConfig = field(default_factory=TrajectoryNetConfig)
    assess: A.AssessConfig = field(default_factory=A.AssessConfig)
    motion_source: str = "estimated"


@dataclass
class TrainedModels:
    models: Models
    traj_losses: list[float]
    assess_losses: list[float]
    plan: TrainingPlan


def _suites(plan: TrainingPlan):
    # half of every split has an occlusion so the assessment sees occluded frames
    def split(count, base):
        a = synthetic_suite((count + 1) // 2, base, length=plan.length)
        b = synthetic_suite(count // 2, base + 50_000, occlusion=True, length=plan.length)
        return a + b

    s = plan.seed * 1_000_000
    return split(plan.traj_sequences, s + 100_000), split(plan.assess_sequences, s + 200_000), split(plan.calib_sequences, s + 300_000)


def train_trajectory_model(plan: TrainingPlan, sequences=None, motions=None):
    seqs = sequences if sequences is not None else _suites(plan)[0]
    if motions is None:
        motions = [sequence_motion(s, plan.motion_source if plan.traj.compensate else "none") for s in seqs]
    windows = build_windows(seqs, plan.traj, stride=plan.window_stride, motions=motions)
    log.info("trajectory training on %d windows", len(windows))
    return train_trajectory(windows, plan.traj, epochs=plan.traj_epochs, lr=plan.traj_lr, seed=plan.seed)


def train_assessment_model(plan: TrainingPlan, net: TrajectoryNet, train_seqs, calib_seqs):
    def mined(seqs, seed):
        ms = [sequence_motion(s, plan.motion_source if net.cfg.compensate else "none") for s in seqs]
        return mine_suite(seqs, net, ms, seed=seed, traj_heatmap=plan.assess.traj_heatmap)

    train = mined(train_seqs, plan.seed)
    res = A.train_assessment(train, plan.assess, epochs=plan.assess_epochs, lr=plan.assess_lr, seed=plan.seed)
    cal = A.calibrate_temperature(mined(calib_seqs, plan.seed + 1), res.net)
    log.info("assessment: %d samples, T=%.4f", len(train), cal.T)
    return res, cal


def train_all(plan: TrainingPlan | None = None, traj_result=None) -> TrainedModels:
    """Trajectory net, assessment net, temperature and lazy threshold from one seed.

    A ready trajectory result can be passed in to share it between variants.
    """
    plan = plan or TrainingPlan()
    traj_seqs, assess_seqs, calib_seqs = _suites(plan)
    tr = traj_result or train_trajectory_model(plan, traj_seqs)
    ar, cal = train_assessment_model(plan, tr.net, assess_seqs, calib_seqs)
    tau = lazy_threshold(calib_seqs, q=plan.tau_percentile)
    models = Models(tr.net, ar.net, temperature=cal.T, tau=tau, pyramid=PyramidConfig())
    return TrainedModels(models, tr.losses, ar.losses, plan)
