"""Two-stream conv-LSTM encoder-decoder that forecasts target response maps.

Location maps and frames of the past window pass through separate
five-layer convolutional streams (total downsample x4), are concatenated and
fed to an encoder conv-LSTM. The last encoder output gives the current-frame
map; a decoder conv-LSTM then rolls forward on zero input for the future
frames. Every output goes through a three-layer deconvolution head (x4).

All locations handed to the network are background compensated and
expressed relative to the newest past frame.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .geometry import Point2, ScoreMap, accumulate_motion, argmax_location, default_sigma, gaussian_location_map, to_gray

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrajectoryNetConfig:
    past_len: int = 11
    future_len: int = 5
    map_shape: tuple[int, int] = (32, 32)
    image_channels: int = 1
    stream_channels: tuple[int, ...] = (8, 16, 16, 16, 16)
    stream_strides: tuple[int, ...] = (1, 2, 1, 2, 1)
    hidden: int = 16
    head_channels: tuple[int, ...] = (16, 8)
    head_strides: tuple[int, ...] = (2, 2, 1)
    kernel: int = 3
    # location-map Gaussian width in map cells; None -> 1/10 of the shorter side
    sigma: float | None = None
    use_image: bool = True
    # "map": Gaussian location maps; "coords": raw coordinates broadcast as planes
    location_input: str = "map"
    compensate: bool = True
    # how m_bg is continued past the newest estimate: "constant" or "linear"
    future_motion: str = "constant"

    def __post_init__(self):
        if self.past_len < 1 or self.future_len < 1:
            raise ValueError("past_len and future_len must be >= 1")
        if len(self.stream_channels) != len(self.stream_strides):
            raise ValueError("one stride per stream layer")
        if len(self.head_strides) != len(self.head_channels) + 1:
            raise ValueError("head needs len(head_channels) + 1 strides")
        down = math.prod(self.stream_strides)
        up = math.prod(self.head_strides)
        if down != up:
            raise ValueError(f"downsample x{down} does not match upsample x{up}")
        if any(s % down for s in self.map_shape):
            raise ValueError(f"map shape {self.map_shape} not divisible by {down}")
        if self.location_input not in ("map", "coords"):
            raise ValueError(f"unknown location_input {self.location_input!r}")
        if self.future_motion not in ("constant", "linear"):
            raise ValueError(f"unknown future_motion {self.future_motion!r}")

    @property
    def window(self) -> int:
        """Frames per training window: past, current and future."""
        return self.past_len + 1 + self.future_len

    @property
    def sigma_cells(self) -> float:
        return self.sigma if self.sigma is not None else default_sigma(self.map_shape)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryNetConfig":
        d = dict(d)
        for k in ("map_shape", "stream_channels", "stream_strides", "head_channels", "head_strides"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ConvLSTMState:
    hidden: torch.Tensor
    cell: torch.Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ValueError("hidden and cell shapes differ")


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM: i, f, o = sigmoid(conv), g = tanh(conv) over [x, h]."""

    def __init__(self, in_channels: int, hidden: int, kernel: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.hidden = hidden
        self.gates = nn.Conv2d(in_channels + hidden, 4 * hidden, kernel, padding=kernel // 2)
        with torch.no_grad():
            # forget-gate bias of 1 keeps early gradients flowing through the cell
            self.gates.bias.zero_()
            self.gates.bias[hidden : 2 * hidden] = 1.0

    def forward(self, x: torch.Tensor | None, state: ConvLSTMState) -> ConvLSTMState:
        return conv_lstm_cell(x, state, self)


def conv_lstm_cell(x: torch.Tensor | None, state: ConvLSTMState, cell: ConvLSTMCell) -> ConvLSTMState:
    h, c = state.hidden, state.cell
    if x is None:
        x = h.new_zeros((h.shape[0], cell.in_channels, *h.shape[2:]))
    if x.shape[1] != cell.in_channels:
        raise ValueError(f"expected {cell.in_channels} input channels, got {x.shape[1]}")
    if x.shape[2:] != h.shape[2:]:
        raise ValueError(f"input {tuple(x.shape[2:])} and state {tuple(h.shape[2:])} differ spatially")
    z = cell.gates(torch.cat([x, h], dim=1))
    zi, zf, zo, zg = torch.split(z, cell.hidden, dim=1)
    i, f, o = torch.sigmoid(zi), torch.sigmoid(zf), torch.sigmoid(zo)
    g = torch.tanh(zg)
    c_new = f * c + i * g
    return ConvLSTMState(o * torch.tanh(c_new), c_new)


def _stream(in_ch: int, cfg: TrajectoryNetConfig) -> nn.Sequential:
    layers: list[nn.Module] = []
    for k, (ch, s) in enumerate(zip(cfg.stream_channels, cfg.stream_strides)):
        layers.append(nn.Conv2d(in_ch, ch, cfg.kernel, stride=s, padding=cfg.kernel // 2))
        if k < len(cfg.stream_channels) - 1:
            layers.append(nn.ReLU())
        in_ch = ch
    return nn.Sequential(*layers)


def _head(cfg: TrajectoryNetConfig) -> nn.Sequential:
    layers: list[nn.Module] = []
    chans = [cfg.hidden, *cfg.head_channels, 1]
    p = cfg.kernel // 2
    for k, s in enumerate(cfg.head_strides):
        layers.append(nn.ConvTranspose2d(chans[k], chans[k + 1], cfg.kernel, stride=s, padding=p, output_padding=s - 1))
        if k < len(cfg.head_strides) - 1:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class TrajectoryNet(nn.Module):
    def __init__(self, cfg: TrajectoryNetConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or TrajectoryNetConfig()
        torch.manual_seed(seed)
        loc_ch = 1 if cfg.location_input == "map" else 2
        c = cfg.stream_channels[-1]
        self.f_mu = _stream(loc_ch, cfg)
        self.f_theta = _stream(cfg.image_channels, cfg)
        self.encoder = ConvLSTMCell(2 * c, cfg.hidden, cfg.kernel)
        self.decoder = ConvLSTMCell(2 * c, cfg.hidden, cfg.kernel)
        self.head = _head(cfg)
        # He init: the default conv init shrinks activations through the
        # five-layer streams and the head, and training at the fixed small
        # learning rate then barely learns to extrapolate
        for m in [*self.f_mu, *self.f_theta, *self.head]:
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")

    @property
    def feature_shape(self) -> tuple[int, int]:
        down = math.prod(self.cfg.stream_strides)
        return self.cfg.map_shape[0] // down, self.cfg.map_shape[1] // down

    def zero_state(self, batch: int, like: torch.Tensor) -> ConvLSTMState:
        z = like.new_zeros((batch, self.cfg.hidden, *self.feature_shape))
        return ConvLSTMState(z, z.clone())

    def encode_step(self, loc: torch.Tensor, image: torch.Tensor, state: ConvLSTMState) -> ConvLSTMState:
        return encode_step(loc, image, state, self)

    def forward(self, loc: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
        """``loc`` (B, T, Cl, H, W), ``images`` (B, T, Ci, H, W) -> maps (B, future_len + 1, H, W)."""
        b, t = loc.shape[:2]
        if t != self.cfg.past_len or images.shape[1] != t:
            raise ValueError(f"expected {self.cfg.past_len} past steps, got {t} / {images.shape[1]}")
        state = self.zero_state(b, loc)
        for k in range(t):
            state = self.encode_step(loc[:, k], images[:, k], state)
        outs = [self.head(state.hidden)]
        for _ in range(self.cfg.future_len):
            state = self.decoder(None, state)
            outs.append(self.head(state.hidden))
        return torch.cat(outs, dim=1)


def encode_step(loc: torch.Tensor, image: torch.Tensor, state: ConvLSTMState, net: TrajectoryNet) -> ConvLSTMState:
    """One encoder update from a location input and a frame."""
    if loc.shape[-2:] != image.shape[-2:]:
        raise ValueError(f"location input {tuple(loc.shape[-2:])} and image {tuple(image.shape[-2:])} not aligned")
    a = net.f_mu(loc)
    b = net.f_theta(image)
    if not net.cfg.use_image:
        b = torch.zeros_like(b)
    return net.encoder(torch.cat([a, b], dim=1), state)


# --- rendering inputs and targets --------------------------------------------------------


@dataclass(frozen=True)
class MapGeometry:
    """Affine map between frame pixels and map cells (same scale on both axes)."""

    origin: tuple[float, float]
    scale: float

    @classmethod
    def for_frame(cls, frame_shape: Sequence[int], map_shape: Sequence[int]) -> "MapGeometry":
        s = frame_shape[1] / map_shape[1]
        return cls(((s - 1) / 2, (s - 1) / 2), s)

    def to_cells(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - np.asarray(self.origin)) / self.scale

    def to_pixels(self, cells: np.ndarray) -> np.ndarray:
        return np.asarray(cells, dtype=np.float64) * self.scale + np.asarray(self.origin)


def render_gaussians(cells: torch.Tensor, shape: tuple[int, int], sigma: float) -> torch.Tensor:
    """Unit-amplitude Gaussians at ``cells`` (..., 2) in (x, y) cell units -> (..., H, W)."""
    h, w = shape
    xs = torch.arange(w, dtype=cells.dtype)
    ys = torch.arange(h, dtype=cells.dtype)
    gx = torch.exp(-((xs - cells[..., 0:1]) ** 2) / (2 * sigma**2))
    gy = torch.exp(-((ys - cells[..., 1:2]) ** 2) / (2 * sigma**2))
    return gy[..., :, None] * gx[..., None, :]


def render_location_input(cells: torch.Tensor, cfg: TrajectoryNetConfig) -> torch.Tensor:
    """(B, T, 2) compensated cells -> (B, T, C, H, W) location input."""
    if cfg.location_input == "map":
        return render_gaussians(cells, cfg.map_shape, cfg.sigma_cells).unsqueeze(2)
    h, w = cfg.map_shape
    norm = cells / torch.tensor([w, h], dtype=cells.dtype)
    return norm[..., None, None].expand(*cells.shape, h, w).contiguous()


def prepare_frames(frames: Sequence[np.ndarray], cfg: TrajectoryNetConfig) -> np.ndarray:
    """Frames -> (T, C, H, W) float array in [0, 1] at map resolution."""
    out = []
    for f in frames:
        a = np.asarray(f, dtype=np.float64) / 255.0
        if cfg.image_channels == 1:
            a = to_gray(a)[None]
        else:
            a = np.moveaxis(a, -1, 0)
        h, w = cfg.map_shape
        if a.shape[1:] != (h, w):
            fy, fx = a.shape[1] // h, a.shape[2] // w
            if fy * h != a.shape[1] or fx * w != a.shape[2]:
                raise ValueError(f"frame {a.shape[1:]} is not an integer multiple of map {cfg.map_shape}")
            a = a.reshape(a.shape[0], h, fy, w, fx).mean(axis=(2, 4))
        out.append(a)
    return np.stack(out)


def compensate(points: np.ndarray, motion: np.ndarray, ref: int) -> np.ndarray:
    """``l^k + m^k - m^ref``: positions in the reference frame's coordinates."""
    return np.asarray(points, float) + np.asarray(motion, float) - np.asarray(motion, float)[ref]


def future_motion(motion_past: np.ndarray, step_now: np.ndarray | None, n_out: int, mode: str) -> np.ndarray:
    """Offsets ``m^t - m^{t_now - 1}`` for the ``n_out`` predicted frames.

    ``step_now`` is the motion increment into the current frame when known;
    later frames hold the motion constant or extend the mean past increment.
    """
    mp = np.asarray(motion_past, dtype=np.float64)
    rate = (mp[-1] - mp[0]) / max(1, len(mp) - 1)
    first = np.zeros(2) if step_now is None else np.asarray(step_now, dtype=np.float64)
    out = [first]
    for k in range(1, n_out):
        out.append(first + (rate * k if mode == "linear" else 0.0))
    return np.array(out)


@dataclass
class TrajectoryPrediction:
    response_maps: list[ScoreMap]
    locations: list[Point2]
    compensated: list[Point2] = field(default_factory=list)


def predict(
    frames: Sequence[np.ndarray],
    locations: Sequence[Point2] | np.ndarray,
    motion: np.ndarray | None,
    net: TrajectoryNet,
    step_now: np.ndarray | None = None,
) -> TrajectoryPrediction:
    """Forecast the current and future target positions in frame coordinates.

    ``motion`` holds the accumulated background motion for each past frame
    (any common reference); ``step_now`` the increment into the current frame.
    """
    cfg = net.cfg
    if len(frames) != cfg.past_len or len(locations) != cfg.past_len:
        raise ValueError(f"need {cfg.past_len} frames and locations, got {len(frames)} and {len(locations)}")
    pts = np.array([[p.x, p.y] if isinstance(p, Point2) else p for p in locations], dtype=np.float64)
    if motion is None or not cfg.compensate:
        motion = np.zeros_like(pts)
        step_now = None
    comp = compensate(pts, motion, ref=cfg.past_len - 1)
    geo = MapGeometry.for_frame(np.asarray(frames[0]).shape, cfg.map_shape)
    dtype = next(net.parameters()).dtype
    cells = torch.as_tensor(geo.to_cells(comp), dtype=dtype)[None]
    loc = render_location_input(cells, cfg)
    imgs = torch.as_tensor(prepare_frames(frames, cfg), dtype=dtype)[None]
    with torch.no_grad():
        out = net(loc, imgs)[0].numpy().astype(np.float64)
    offsets = future_motion(motion, step_now, out.shape[0], cfg.future_motion)
    maps, locs, comp_locs = [], [], []
    for k in range(out.shape[0]):
        m = ScoreMap(out[k], geo.origin, geo.scale)
        p = argmax_location(m, subpixel=True)
        maps.append(m)
        comp_locs.append(p)
        locs.append(Point2(p.x - offsets[k][0], p.y - offsets[k][1]))
    return TrajectoryPrediction(maps, locs, comp_locs)


def traj_loss(pred: torch.Tensor, targets: torch.Tensor, sigma: float | None = None) -> torch.Tensor:
    """Sum over maps of the L1 distance between predicted and Gaussian target maps.

    ``pred`` is (..., T, H, W); ``targets`` either ready-made maps of the same
    shape or (..., T, 2) cell positions to render. Leading batch dims are averaged.
    """
    if targets.shape[-1] == 2 and targets.shape[:-1] == pred.shape[:-2]:
        sig = sigma if sigma is not None else default_sigma(pred.shape[-2:])
        targets = render_gaussians(targets, tuple(pred.shape[-2:]), sig)
    if targets.shape != pred.shape:
        raise ValueError(f"{pred.shape[-3] if pred.dim() > 2 else 1} predictions vs targets of shape {tuple(targets.shape)}")
    per_sample = (pred - targets).abs().sum(dim=(-3, -2, -1))
    return per_sample.mean() if per_sample.dim() else per_sample


def traj_loss_maps(pred: TrajectoryPrediction, gt_points: Sequence[Point2], sigma: float | None = None) -> float:
    """L1 loss of a finished prediction against ground-truth points (frame pixels)."""
    if len(gt_points) != len(pred.response_maps):
        raise ValueError(f"{len(pred.response_maps)} maps but {len(gt_points)} ground-truth points")
    total = 0.0
    for m, p in zip(pred.response_maps, gt_points):
        tgt = gaussian_location_map(p, sigma, m.shape, m.origin, m.scale)
        total += float(np.abs(m.values - tgt.values).sum())
    return total


# --- training ----------------------------------------------------------------------------


@dataclass
class WindowSet:
    """Training windows: prepared past frames and compensated cell tracks.

    ``frames`` is (N, past_len, C, H, W); ``cells`` is (N, window, 2) with the
    past, current and future target centres in map cells, all relative to the
    newest past frame.
    """

    frames: np.ndarray
    cells: np.ndarray

    def __len__(self) -> int:
        return len(self.frames)

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.frames[idx], self.cells[idx])

    @classmethod
    def concat(cls, parts: Sequence["WindowSet"]) -> "WindowSet":
        return cls(np.concatenate([p.frames for p in parts]), np.concatenate([p.cells for p in parts]))


def sequence_motion(seq, source: str = "estimated", pyramid=None) -> np.ndarray:
    """Accumulated background motion per frame of ``seq`` (frame 0 -> zero).

    ``source`` is ``"estimated"`` (masked background matching on the frames),
    ``"camera"`` (the synthetic ground-truth script) or ``"none"``.
    """
    from .bgmotion import estimate_steps

    n = len(seq)
    if source == "none" or n < 2:
        return np.zeros((n, 2))
    if source == "camera":
        if seq.camera is None:
            raise ValueError(f"sequence {seq.name!r} has no camera ground truth")
        steps = list(seq.camera[1:])
    elif source == "estimated":
        steps = [e.transform for e in estimate_steps(seq.frames, seq.boxes, pyramid)]
    else:
        raise ValueError(f"unknown motion source {source!r}")
    return np.vstack([np.zeros((1, 2)), np.array(accumulate_motion(steps))])


def build_windows(
    sequences: Sequence,
    cfg: TrajectoryNetConfig,
    stride: int = 1,
    motion_source: str = "estimated",
    motions: Sequence[np.ndarray] | None = None,
) -> WindowSet:
    frames_out, cells_out = [], []
    n = cfg.window
    ref = cfg.past_len - 1
    for si, seq in enumerate(sequences):
        if len(seq) < n:
            continue
        motion = motions[si] if motions is not None else sequence_motion(seq, motion_source if cfg.compensate else "none")
        if not cfg.compensate:
            motion = np.zeros_like(motion)
        prepared = prepare_frames(seq.frames, cfg)
        geo = MapGeometry.for_frame(np.asarray(seq.frames[0]).shape, cfg.map_shape)
        centers = seq.centers
        for s in range(0, len(seq) - n + 1, stride):
            comp = compensate(centers[s : s + n], motion[s : s + n], ref)
            frames_out.append(prepared[s : s + cfg.past_len])
            cells_out.append(geo.to_cells(comp))
    if not frames_out:
        raise ValueError("no training windows: sequences shorter than the window")
    return WindowSet(np.stack(frames_out).astype(np.float32), np.stack(cells_out))


def _augment(cells: np.ndarray, past_len: int, rng: np.random.Generator, jitter: float) -> np.ndarray:
    """Shift each window by a random offset bounded by its mean past step; jitter past points."""
    out = cells.copy()
    steps = np.linalg.norm(np.diff(cells[:, :past_len], axis=1), axis=-1).mean(axis=1)
    shift = rng.uniform(-1.0, 1.0, size=(len(cells), 1, 2)) * steps[:, None, None]
    out += shift
    if jitter > 0:
        out[:, :past_len] += rng.normal(0.0, jitter, size=out[:, :past_len].shape)
    return out


@dataclass
class TrainResult:
    net: TrajectoryNet
    losses: list[float]
    seed: int
    epochs: int


def train_trajectory(
    windows: WindowSet,
    cfg: TrajectoryNetConfig | None = None,
    epochs: int = 20,
    lr: float = 2e-4,
    batch_size: int = 8,
    seed: int = 0,
    augment: bool = True,
    jitter: float = 0.25,
    net: TrajectoryNet | None = None,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Adam on the summed L1 map loss; returns the net and the per-epoch mean loss.

    ``losses[0]`` is the loss before any update.
    """
    if len(windows) == 0:
        raise ValueError("empty training set")
    cfg = cfg or TrajectoryNetConfig()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = net or TrajectoryNet(cfg, seed=seed)
    net.to(dtype)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    frames_t = torch.as_tensor(windows.frames, dtype=dtype)

    def batch_loss(idx, cells):
        c = torch.as_tensor(cells[idx], dtype=dtype)
        loc = render_location_input(c[:, : cfg.past_len], cfg)
        pred = net(loc, frames_t[idx])
        return traj_loss(pred, c[:, cfg.past_len :], cfg.sigma_cells)

    def evaluate() -> float:
        with torch.no_grad():
            tot = 0.0
            for s in range(0, len(windows), 64):
                idx = np.arange(s, min(len(windows), s + 64))
                tot += float(batch_loss(idx, windows.cells)) * len(idx)
        return tot / len(windows)

    losses = [evaluate()]
    log.info("epoch 0 loss %.4f", losses[0])
    for ep in range(epochs):
        order = rng.permutation(len(windows))
        cells = _augment(windows.cells, cfg.past_len, rng, jitter) if augment else windows.cells
        tot = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            loss = batch_loss(idx, cells)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += float(loss.detach()) * len(idx)
        losses.append(tot / len(order))
        log.info("epoch %d loss %.4f", ep + 1, losses[-1])
    net.eval()
    return TrainResult(net, losses, seed, epochs)
