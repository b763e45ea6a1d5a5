"""Candidate assessment: how plausible is a location given the trajectory so far
and the tracker's heatmap, plus temperature calibration of the scores."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import minimize_scalar
from torch import nn

from .geometry import BoundingBox, Point2, ScoreMap, iou

log = logging.getLogger(__name__)

EPS = 1e-7
N_HEATMAP_FEATURES = 4


@dataclass(frozen=True)
class AssessConfig:
    past_len: int = 11
    channels: int = 16
    use_heatmap: bool = True
    # "tracker": every candidate is scored against the tracker heatmap;
    # "response": the trajectory candidate uses its own response map instead
    traj_heatmap: str = "tracker"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AssessConfig":
        return cls(**d)


@dataclass
class AssessmentInput:
    """Normalised inputs: coordinates divided by the frame width/height.

    ``history`` holds the background-compensated past locations, oldest first;
    ``candidate`` is compensated the same way. ``box_size`` is the target
    size, also normalised.
    """

    candidate: Point2
    history: list[Point2]
    heatmap_summary: np.ndarray
    box_size: tuple[float, float]

    def __post_init__(self):
        self.heatmap_summary = np.asarray(self.heatmap_summary, dtype=np.float64)
        vals = [self.candidate.x, self.candidate.y, *self.box_size, *self.heatmap_summary]
        vals += [c for p in self.history for c in (p.x, p.y)]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("assessment input contains NaN or Inf")
        if not (self.box_size[0] > 0 and self.box_size[1] > 0):
            raise ValueError("box size must be positive")

    @classmethod
    def from_pixels(
        cls,
        candidate: Point2,
        history: Sequence[Point2],
        heatmap_summary: np.ndarray,
        box_size: tuple[float, float],
        frame_shape: tuple[int, ...],
    ) -> "AssessmentInput":
        h, w = frame_shape[:2]
        norm = lambda p: Point2(p.x / w, p.y / h)  # noqa: E731
        return cls(norm(candidate), [norm(p) for p in history], heatmap_summary, (box_size[0] / w, box_size[1] / h))

    def features(self) -> np.ndarray:
        """(channels, past_len + 1) network input.

        Rows: x and y offsets from the newest history point in box units,
        the heatmap summary broadcast along the sequence, and a candidate marker.
        """
        pts = np.array([[p.x, p.y] for p in self.history] + [[self.candidate.x, self.candidate.y]])
        rel = (pts - pts[-2]) / np.asarray(self.box_size)
        n = len(pts)
        hm = np.repeat(self.heatmap_summary[:, None], n, axis=1)
        marker = np.zeros((1, n))
        marker[0, -1] = 1.0
        return np.vstack([rel.T, hm, marker])


def heatmap_summary(heatmap: ScoreMap | None, candidate: Point2 | None = None) -> np.ndarray:
    """[peak, mean, peak-to-mean ratio, value at the candidate].

    Scores are shifted from [-1, 1] to [0, 2] before the ratio so it stays
    bounded; the candidate value is -1 outside the heatmap.
    """
    if heatmap is None:
        return np.zeros(N_HEATMAP_FEATURES)
    v = np.asarray(heatmap.values, dtype=np.float64)
    peak, mean = float(v.max()), float(v.mean())
    ratio = (peak + 1.0) / (mean + 1.0 + 1e-6)
    at = heatmap.value_at(candidate, default=-1.0) if candidate is not None else peak
    return np.array([peak, mean, ratio, at])


class AssessNet(nn.Module):
    """Three 1-D convolutions over the 12-step sequence, mean-pooled to two logits."""

    def __init__(self, cfg: AssessConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or AssessConfig()
        torch.manual_seed(seed)
        c_in = 2 + N_HEATMAP_FEATURES + 1
        ch = cfg.channels
        self.conv1 = nn.Conv1d(c_in, ch, 3, padding=1)
        self.conv2 = nn.Conv1d(ch, ch, 3, padding=1)
        self.conv3 = nn.Conv1d(ch, 2, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.cfg.use_heatmap:
            x = torch.cat([x[:, :2], torch.zeros_like(x[:, 2 : 2 + N_HEATMAP_FEATURES]), x[:, 2 + N_HEATMAP_FEATURES :]], 1)
        h = torch.relu(self.conv1(x))
        h = torch.relu(self.conv2(h))
        return self.conv3(h).mean(dim=-1)


def _batch(inputs: Sequence[AssessmentInput], dtype) -> torch.Tensor:
    return torch.as_tensor(np.stack([i.features() for i in inputs]), dtype=dtype)


def score_raw(inp: AssessmentInput, net: AssessNet) -> np.ndarray:
    """Two logits (bad, good) for one candidate."""
    return score_raw_batch([inp], net)[0]


def score_raw_batch(inputs: Sequence[AssessmentInput], net: AssessNet) -> np.ndarray:
    if len(inputs) == 0:
        return np.zeros((0, 2))
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        return net(_batch(inputs, dtype)).numpy().astype(np.float64)


def bce_loss(score: float, label: int) -> float:
    s = min(max(float(score), EPS), 1.0 - EPS)
    return -(label * math.log(s) + (1 - label) * math.log(1.0 - s))


@dataclass
class CalibrationParams:
    T: float = 1.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"temperature must be positive, got {self.T}")


def margin(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    """(z_good - z_bad) / T. Monotone in the positive probability but never
    saturates, so comparisons on it do not tie when both probabilities round to 1."""
    return (np.asarray(logits)[..., 1] - np.asarray(logits)[..., 0]) / T


def positive_probability(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    """sigma((z_good - z_bad) / T), the 2-way softmax probability of the good class."""
    return 0.5 * (1.0 + np.tanh(0.5 * margin(logits, T)))


def max_softmax(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    p = positive_probability(logits, T)
    return np.maximum(p, 1.0 - p)


def score_calibrated(inp: AssessmentInput, net: AssessNet, cal: CalibrationParams | None = None) -> float:
    T = cal.T if cal is not None else 1.0
    return float(positive_probability(score_raw(inp, net), T))


def nll(logits: np.ndarray, labels: np.ndarray, T: float) -> float:
    """Mean negative log-likelihood of the labels under softmax(logits / T)."""
    z = np.asarray(logits, dtype=np.float64) / T
    logp = z - np.logaddexp(z[:, 0], z[:, 1])[:, None]
    return float(-logp[np.arange(len(labels)), np.asarray(labels, dtype=int)].mean())


def fit_temperature(logits: np.ndarray, labels: np.ndarray, bounds: tuple[float, float] = (0.05, 20.0)) -> float:
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise ValueError("empty validation set")
    if len(np.unique(labels)) < 2:
        raise ValueError("validation set needs both classes for calibration")
    lo, hi = bounds
    # NLL is convex in the inverse temperature
    res = minimize_scalar(
        lambda beta: nll(logits, labels, 1.0 / beta), bounds=(1.0 / hi, 1.0 / lo), method="bounded", options={"xatol": 1e-8}
    )
    T = float(1.0 / res.x)
    if lo <= 1.0 <= hi and nll(logits, labels, 1.0) < nll(logits, labels, T):
        T = 1.0
    return T


@dataclass
class LabeledSample:
    input: AssessmentInput
    label: int


def calibrate_temperature(validation: Sequence[LabeledSample], net: AssessNet) -> CalibrationParams:
    """Fit T on frozen network logits by NLL minimisation over T in [0.05, 20]."""
    if not validation:
        raise ValueError("empty validation set")
    logits = score_raw_batch([s.input for s in validation], net)
    labels = np.array([s.label for s in validation])
    return CalibrationParams(fit_temperature(logits, labels))


# --- sample mining -----------------------------------------------------------------------


@dataclass
class CandidateRecord:
    """A candidate location seen at one frame, with the context needed to score it.

    Pixel coordinates: ``candidate`` in the current frame, ``history`` already
    background compensated, ``step_now`` the compensation for the current frame.
    """

    frame_index: int
    candidate: Point2
    history: list[Point2]
    step_now: tuple[float, float]
    heatmap: ScoreMap | None
    frame_shape: tuple[int, int]
    source: str = ""


def make_input(rec: CandidateRecord, candidate: Point2, box_size: tuple[float, float]) -> AssessmentInput:
    comp = Point2(candidate.x + rec.step_now[0], candidate.y + rec.step_now[1])
    summary = heatmap_summary(rec.heatmap, candidate)
    return AssessmentInput.from_pixels(comp, rec.history, summary, box_size, rec.frame_shape)


def drift_negative(box: BoundingBox, gt: BoundingBox, rng: np.random.Generator, max_tries: int = 100) -> BoundingBox:
    """Shift ``box`` by a random displacement of 0.5-1.5 diagonals until IoU <= 0.5."""
    for _ in range(max_tries):
        ang = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(0.5, 1.5) * box.diagonal
        cand = BoundingBox(box.cx + mag * math.cos(ang), box.cy + mag * math.sin(ang), box.w, box.h)
        if iou(cand, gt) <= 0.5:
            return cand
    raise RuntimeError("could not drift the candidate below IoU 0.5")


def mine_samples(
    records: Sequence[CandidateRecord],
    gt: Sequence[BoundingBox],
    rng: np.random.Generator | int = 0,
    hard_negatives: bool = False,
) -> list[LabeledSample]:
    """Positives are candidates whose box overlaps ground truth with IoU > 0.5;
    each one is paired with a drifted negative.

    Other candidates are skipped, unless ``hard_negatives`` is set: then they
    are kept as negatives too (real tracker failures), which unbalances the set.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    out = []
    for rec in records:
        g = gt[rec.frame_index]
        box = g.moved_to(rec.candidate)
        size = (g.w, g.h)
        if iou(box, g) <= 0.5:
            if hard_negatives:
                out.append(LabeledSample(make_input(rec, rec.candidate, size), 0))
            continue
        out.append(LabeledSample(make_input(rec, rec.candidate, size), 1))
        neg = drift_negative(box, g, rng)
        out.append(LabeledSample(make_input(rec, neg.center, size), 0))
    return out


# --- training ----------------------------------------------------------------------------


@dataclass
class AssessTrainResult:
    net: AssessNet
    losses: list[float] = field(default_factory=list)


def train_assessment(
    samples: Sequence[LabeledSample],
    cfg: AssessConfig | None = None,
    epochs: int = 40,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> AssessTrainResult:
    """Binary cross-entropy (2-way softmax) with Adam; ``losses[0]`` precedes training."""
    if not samples:
        raise ValueError("no assessment samples")
    cfg = cfg or AssessConfig()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = AssessNet(cfg, seed=seed).to(dtype)
    x = _batch([s.input for s in samples], dtype)
    y = torch.as_tensor([s.label for s in samples], dtype=torch.long)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    with torch.no_grad():
        losses = [float(F.cross_entropy(net(x), y))]
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        tot = 0.0
        for s in range(0, len(order), batch_size):
            idx = torch.as_tensor(order[s : s + batch_size])
            loss = F.cross_entropy(net(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += float(loss.detach()) * len(idx)
        losses.append(tot / len(order))
    net.eval()
    return AssessTrainResult(net, losses)
