"""Appearance tracker: a pluggable interface and a cross-correlation baseline."""

from __future__ import annotations

import abc
from dataclasses import dataclass, replace

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from torch import nn

from .geometry import BoundingBox, Point2, ScoreMap, argmax_location, to_gray


def patch_origin(center: Point2, size: int) -> tuple[int, int]:
    """Top-left ``(col, row)`` of the integer ``size`` window centred on ``center``."""
    half = (size - 1) / 2.0
    return int(np.floor(center.x - half + 0.5)), int(np.floor(center.y - half + 0.5))


def crop_patch(frame: np.ndarray, center: Point2, size: int) -> np.ndarray:
    """``size x size`` window around ``center``; off-frame cells take the frame mean."""
    if size <= 0:
        raise ValueError(f"patch size must be positive, got {size}")
    img = to_gray(frame)
    h, w = img.shape
    x0, y0 = patch_origin(center, size)
    out = np.full((size, size), img.mean())
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = img[sy0:sy1, sx0:sx1]
    return out


def _as_chw(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == 2 else a


def cross_correlate(search: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Valid sliding dot product of ``template`` over ``search``, summed over channels."""
    x, z = _as_chw(search), _as_chw(template)
    if x.shape[0] != z.shape[0]:
        raise ValueError(f"channel mismatch: search {x.shape[0]} vs template {z.shape[0]}")
    if z.shape[1] > x.shape[1] or z.shape[2] > x.shape[2]:
        raise ValueError(f"template {z.shape[1:]} larger than search {x.shape[1:]}")
    windows = sliding_window_view(x, z.shape[1:], axis=(1, 2))
    return np.einsum("cijhw,chw->ij", windows, z)


def normalized_cross_correlate(search: np.ndarray, template: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Zero-mean template against unit-energy, zero-mean windows; scores lie in [-1, 1].

    Flat windows or a flat template score 0.
    """
    x, z = _as_chw(search), _as_chw(template)
    zc = z - z.mean()
    znorm = np.sqrt((zc**2).sum())
    raw = cross_correlate(x, zc)
    n = z.size
    windows = sliding_window_view(x, z.shape[1:], axis=(1, 2))
    s1 = windows.sum(axis=(0, 3, 4))
    s2 = (windows**2).sum(axis=(0, 3, 4))
    energy = np.maximum(s2 - s1**2 / n, 0.0)
    out = np.zeros_like(raw)
    if znorm <= eps * max(1.0, np.abs(z).max()):
        return out
    # cancellation in s2 - s1^2/n leaves residue on flat windows
    ok = energy > 1e-10 * np.maximum(s2, eps)
    out[ok] = raw[ok] / (np.sqrt(energy[ok]) * znorm)
    return np.clip(out, -1.0, 1.0)


class ConvEmbedding(nn.Module):
    """Three 3x3 valid convolutions with strides 2, 2, 1 (total downsample x4)."""

    stride = 4
    receptive_field = 15

    def __init__(self, in_channels: int = 1, channels: int = 16, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.layers = nn.ModuleList(
            [
                nn.Conv2d(in_channels, channels, 3, stride=2),
                nn.Conv2d(channels, channels, 3, stride=2),
                nn.Conv2d(channels, channels, 3, stride=1),
            ]
        )
        with torch.no_grad():
            for layer in self.layers:
                fan_in = layer.weight[0].numel()
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                layer.bias.zero_()
        self.double()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = torch.relu(x)
        return x


class Embedding:
    """Feature extractor shared by the tracker and background-motion matching.

    ``mode="identity"`` returns the grayscale patch itself; ``mode="conv"`` runs a
    seeded :class:`ConvEmbedding`.
    """

    def __init__(self, mode: str = "identity", seed: int = 0, channels: int = 16, net: ConvEmbedding | None = None):
        if mode not in ("identity", "conv"):
            raise ValueError(f"unknown embedding mode {mode!r}")
        self.mode = mode
        self.net = net if net is not None else (ConvEmbedding(channels=channels, seed=seed) if mode == "conv" else None)

    @property
    def stride(self) -> int:
        return 1 if self.mode == "identity" else self.net.stride

    @property
    def receptive_field(self) -> int:
        return 1 if self.mode == "identity" else self.net.receptive_field

    def __call__(self, patch: np.ndarray) -> np.ndarray:
        p = to_gray(patch)
        if min(p.shape) < self.receptive_field:
            raise ValueError(f"patch {p.shape} smaller than receptive field {self.receptive_field}")
        if self.mode == "identity":
            return p[None]
        with torch.no_grad():
            out = self.net(torch.from_numpy(np.ascontiguousarray(p))[None, None])
        return out[0].numpy()


def embed_tracker(patch: np.ndarray, embedding: Embedding | None = None) -> np.ndarray:
    return (embedding or Embedding())(patch)


@dataclass
class TrackerState:
    template: np.ndarray
    last_location: Point2
    template_size: int
    search_size: int

    def __post_init__(self):
        if self.search_size <= self.template_size:
            raise ValueError("search window must be larger than the template")


@dataclass
class TrackOutput:
    heatmap: ScoreMap
    location: Point2
    peak_score: float


class Tracker(abc.ABC):
    """Anything that can be initialised on a box and then follow it frame by frame.

    ``last_location`` must be writable so the caller can re-centre the search
    on its own final estimate.
    """

    last_location: Point2

    @abc.abstractmethod
    def init(self, frame: np.ndarray, box: BoundingBox) -> None: ...

    @abc.abstractmethod
    def track(self, frame: np.ndarray) -> TrackOutput: ...


def track(
    state: TrackerState, frame: np.ndarray, embedding: Embedding | None = None, subpixel: bool = True
) -> tuple[TrackerState, TrackOutput]:
    """One matching step; returns the updated state and the output.

    The peak is refined to sub-pixel precision unless it is a perfect match.
    """
    emb = embedding or Embedding()
    search = crop_patch(frame, state.last_location, state.search_size)
    sx0, sy0 = patch_origin(state.last_location, state.search_size)
    g = normalized_cross_correlate(emb(search), emb(state.template))
    half = (state.template_size - 1) / 2.0
    heat = ScoreMap(g, origin=(sx0 + half, sy0 + half), scale=float(emb.stride))
    peak = float(g.max())
    loc = argmax_location(heat, subpixel=subpixel and peak < 1.0 - 1e-9)
    out = TrackOutput(heat, loc, peak)
    return replace(state, last_location=loc), out


class CrossCorrelationTracker(Tracker):
    """Baseline appearance tracker: a fixed template matched by normalised cross-correlation.

    ``template_update=True`` re-crops the template at every output location
    instead of keeping the first-frame template.
    """

    def __init__(
        self,
        embedding: Embedding | None = None,
        search_factor: float = 2.0,
        template_size: int | None = None,
        template_update: bool = False,
        min_template: int = 5,
        subpixel: bool = True,
    ):
        self.subpixel = subpixel
        self.embedding = embedding or Embedding()
        self.search_factor = search_factor
        self.template_size = template_size
        self.template_update = template_update
        self.min_template = max(min_template, self.embedding.receptive_field)
        self.state: TrackerState | None = None

    def init(self, frame: np.ndarray, box: BoundingBox) -> None:
        ts = self.template_size or max(self.min_template, int(round(max(box.w, box.h))))
        ss = int(round(ts * self.search_factor))
        self.state = TrackerState(crop_patch(frame, box.center, ts), box.center, ts, ss)

    @property
    def last_location(self) -> Point2:
        return self.state.last_location

    @last_location.setter
    def last_location(self, p: Point2) -> None:
        self.state = replace(self.state, last_location=p)

    def track(self, frame: np.ndarray) -> TrackOutput:
        if self.state is None:
            raise RuntimeError("tracker used before init()")
        self.state, out = track(self.state, frame, self.embedding, self.subpixel)
        if self.template_update:
            self.state = replace(self.state, template=crop_patch(frame, out.location, self.state.template_size))
        return out
