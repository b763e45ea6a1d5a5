import numpy as np
import pytest
import torch

from gradcheck import check
from occtrack.geometry import Point2
from occtrack.harness.synth import SynthConfig, generate_sequence, sample_config
from occtrack.trajnet import (
    ConvLSTMCell,
    ConvLSTMState,
    MapGeometry,
    TrajectoryNet,
    TrajectoryNetConfig,
    build_windows,
    compensate,
    conv_lstm_cell,
    future_motion,
    predict,
    prepare_frames,
    render_gaussians,
    render_location_input,
    sequence_motion,
    traj_loss,
    traj_loss_maps,
    train_trajectory,
)

TINY = TrajectoryNetConfig(
    past_len=3,
    future_len=2,
    map_shape=(8, 8),
    stream_channels=(2, 3, 3, 3, 3),
    hidden=3,
    head_channels=(3, 2),
)


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def conv_same(x, w, b):
    """im2col 'same' convolution: x (C, H, W), w (O, C, k, k)."""
    o, c, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    h, wd = x.shape[1:]
    cols = np.zeros((c * k * k, h * wd))
    for i in range(h):
        for j in range(wd):
            cols[:, i * wd + j] = xp[:, i : i + k, j : j + k].reshape(-1)
    return (w.reshape(o, -1) @ cols + b[:, None]).reshape(o, h, wd)


def test_conv_lstm_cell_matches_im2col_oracle(rng):
    torch.manual_seed(0)
    cell = ConvLSTMCell(2, 3).double()
    with torch.no_grad():
        for p in cell.parameters():
            p.normal_(0, 0.3)
    x = rng.normal(size=(1, 2, 5, 6))
    h = rng.normal(size=(1, 3, 5, 6))
    c = rng.normal(size=(1, 3, 5, 6))
    out = cell(torch.tensor(x), ConvLSTMState(torch.tensor(h), torch.tensor(c)))
    z = conv_same(np.concatenate([x[0], h[0]]), cell.gates.weight.detach().numpy(), cell.gates.bias.detach().numpy())
    i, f, o, g = sigmoid(z[0:3]), sigmoid(z[3:6]), sigmoid(z[6:9]), np.tanh(z[9:12])
    c_new = f * c[0] + i * g
    assert np.abs(out.cell.detach().numpy()[0] - c_new).max() < 1e-12
    assert np.abs(out.hidden.detach().numpy()[0] - o * np.tanh(c_new)).max() < 1e-12


def test_conv_lstm_forget_bias_and_zero_input():
    cell = ConvLSTMCell(2, 4)
    assert torch.all(cell.gates.bias[4:8] == 1.0) and torch.all(cell.gates.bias[:4] == 0.0)
    state = ConvLSTMState(torch.zeros(1, 4, 3, 3), torch.zeros(1, 4, 3, 3))
    a = conv_lstm_cell(None, state, cell)
    b = conv_lstm_cell(torch.zeros(1, 2, 3, 3), state, cell)
    assert torch.equal(a.hidden, b.hidden)


def test_conv_lstm_shape_errors():
    cell = ConvLSTMCell(2, 4)
    state = ConvLSTMState(torch.zeros(1, 4, 3, 3), torch.zeros(1, 4, 3, 3))
    with pytest.raises(ValueError):
        cell(torch.zeros(1, 3, 3, 3), state)
    with pytest.raises(ValueError):
        cell(torch.zeros(1, 2, 4, 4), state)
    with pytest.raises(ValueError):
        ConvLSTMState(torch.zeros(1, 4, 3, 3), torch.zeros(1, 4, 2, 3))


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrajectoryNetConfig(map_shape=(30, 30))
    with pytest.raises(ValueError):
        TrajectoryNetConfig(head_strides=(2, 1, 1))
    with pytest.raises(ValueError):
        TrajectoryNetConfig(location_input="points")
    cfg = TrajectoryNetConfig(past_len=6, map_shape=(16, 16))
    assert TrajectoryNetConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.window == 12


@pytest.mark.parametrize("location_input", ["map", "coords"])
def test_forward_shapes(location_input):
    cfg = TrajectoryNetConfig(map_shape=(16, 16), location_input=location_input)
    net = TrajectoryNet(cfg)
    cells = torch.rand(2, cfg.past_len, 2) * 16
    out = net(render_location_input(cells, cfg), torch.rand(2, cfg.past_len, 1, 16, 16))
    assert out.shape == (2, 6, 16, 16)
    with pytest.raises(ValueError):
        net(render_location_input(cells[:, :5], cfg), torch.rand(2, 5, 1, 16, 16))


def test_no_image_variant_ignores_frames():
    cfg = TrajectoryNetConfig(map_shape=(16, 16), use_image=False)
    net = TrajectoryNet(cfg)
    loc = render_location_input(torch.rand(1, cfg.past_len, 2) * 16, cfg)
    a = net(loc, torch.rand(1, cfg.past_len, 1, 16, 16))
    b = net(loc, torch.rand(1, cfg.past_len, 1, 16, 16))
    assert torch.equal(a, b)


def test_seeded_init_is_deterministic():
    a, b = TrajectoryNet(TINY, seed=4), TrajectoryNet(TINY, seed=4)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


# --- gradient checks (float64, instances <= 16x16) ------------------------------------------


def test_gradient_conv_lstm_cell():
    torch.manual_seed(1)
    cell = ConvLSTMCell(2, 3).double()
    x = torch.randn(1, 2, 6, 6, dtype=torch.float64, requires_grad=True)
    h = torch.randn(1, 3, 6, 6, dtype=torch.float64, requires_grad=True)
    c = torch.randn(1, 3, 6, 6, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 3, 6, 6, dtype=torch.float64)

    def f():
        s = cell(x, ConvLSTMState(h, c))
        return (s.hidden * w).sum() + (s.cell * w).sum()

    assert check(f, [x, h, c, cell.gates.weight, cell.gates.bias]) < 1e-4


def test_gradient_two_stream_encoder():
    net = TrajectoryNet(TINY, seed=2).double()
    cells = torch.rand(1, TINY.past_len, 2, dtype=torch.float64) * 8
    loc = render_location_input(cells, TINY).requires_grad_(True)
    img = torch.rand(1, TINY.past_len, 1, 8, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, TINY.hidden, 2, 2, dtype=torch.float64)

    def f():
        state = net.zero_state(1, loc)
        for k in range(TINY.past_len):
            state = net.encode_step(loc[:, k], img[:, k], state)
        return (state.hidden * w).sum()

    params = [net.f_mu[0].weight, net.f_theta[-1].weight, net.encoder.gates.weight]
    assert check(f, [loc, img, *params]) < 1e-4


def test_gradient_deconv_head():
    net = TrajectoryNet(TINY, seed=3).double()
    h = torch.randn(1, TINY.hidden, 2, 2, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 1, 8, 8, dtype=torch.float64)

    def f():
        return (net.head(h) * w).sum()

    assert check(f, [h, net.head[0].weight, net.head[-1].weight, net.head[-1].bias]) < 1e-4


def test_gradient_traj_loss():
    pred = torch.randn(2, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    cells = (torch.rand(2, 3, 2, dtype=torch.float64) * 8).requires_grad_(True)

    def f():
        return traj_loss(pred, cells, sigma=1.5)

    assert check(f, [pred, cells]) < 1e-4


def test_gradient_full_network():
    net = TrajectoryNet(TINY, seed=5).double()
    cells = torch.rand(1, TINY.window, 2, dtype=torch.float64) * 8
    loc = render_location_input(cells[:, : TINY.past_len], TINY)
    img = torch.rand(1, TINY.past_len, 1, 8, 8, dtype=torch.float64)

    def f():
        return traj_loss(net(loc, img), cells[:, TINY.past_len :], 1.5)

    assert check(f, [net.decoder.gates.weight, net.f_mu[2].bias], max_entries=20) < 1e-4


# --- loss --------------------------------------------------------------------------------


def test_loss_is_zero_on_exact_targets():
    cells = torch.tensor([[[3.0, 4.0], [5.0, 2.0]]])
    maps = render_gaussians(cells, (8, 8), 1.0)
    assert float(traj_loss(maps, cells, 1.0)) == 0.0
    assert float(traj_loss(maps, maps)) == 0.0


def test_loss_is_summed_l1():
    pred = torch.zeros(1, 2, 4, 4)
    tgt = torch.ones(1, 2, 4, 4) * 0.5
    assert float(traj_loss(pred, tgt)) == pytest.approx(16.0)


def test_loss_count_mismatch():
    with pytest.raises(ValueError):
        traj_loss(torch.zeros(1, 6, 8, 8), torch.zeros(1, 5, 8, 8))


def test_loss_maps_count_mismatch():
    net = TrajectoryNet(TINY)
    frames = [np.zeros((16, 16), np.uint8)] * 3
    pred = predict(frames, [Point2(8.0, 8.0)] * 3, None, net)
    with pytest.raises(ValueError):
        traj_loss_maps(pred, [Point2(1, 1)] * 2)
    assert traj_loss_maps(pred, [Point2(1, 1)] * 3) > 0


# --- geometry of inputs ------------------------------------------------------------------


def test_map_geometry_round_trip():
    geo = MapGeometry.for_frame((64, 64), (32, 32))
    pts = np.array([[0.5, 0.5], [10.0, 20.0]])
    assert np.allclose(geo.to_pixels(geo.to_cells(pts)), pts)
    # the centre of cell 0 is the centre of the 2x2 pixel block it averages
    assert np.allclose(geo.to_cells([[0.5, 0.5]]), 0.0)


def test_prepare_frames_downscales_by_block_mean():
    cfg = TrajectoryNetConfig(map_shape=(16, 16))
    small = np.arange(256, dtype=float).reshape(16, 16) % 200
    big = np.kron(small, np.ones((2, 2)))
    assert np.allclose(prepare_frames([big], cfg)[0, 0] * 255, small)
    # already at map size: only rescaled
    assert np.allclose(prepare_frames([small], cfg)[0, 0] * 255, small)
    with pytest.raises(ValueError):
        prepare_frames([np.zeros((20, 20))], cfg)


def test_compensate_and_future_motion():
    pts = np.array([[1.0, 1.0], [2.0, 1.0], [3.0, 1.0]])
    motion = np.array([[0.0, 0.0], [-1.0, 0.0], [-2.0, 0.0]])
    # a camera panning with the target: compensated, the target moved
    assert np.allclose(compensate(pts, motion, ref=2), [[3.0, 1.0], [3.0, 1.0], [3.0, 1.0]])
    fm = future_motion(motion, np.array([-1.0, 0.0]), 3, "constant")
    assert np.allclose(fm, [[-1, 0]] * 3)
    fm = future_motion(motion, np.array([-1.0, 0.0]), 3, "linear")
    assert np.allclose(fm, [[-1, 0], [-2, 0], [-3, 0]])


def test_predict_validates_lengths():
    net = TrajectoryNet(TINY)
    with pytest.raises(ValueError):
        predict([np.zeros((16, 16))] * 2, [Point2(1, 1)] * 3, None, net)


def test_predict_maps_back_to_frame_coordinates():
    net = TrajectoryNet(TINY)
    frames = [np.zeros((16, 16), np.uint8)] * 3
    pts = [Point2(8.0, 8.0)] * 3
    a = predict(frames, pts, np.zeros((3, 2)), net, step_now=np.zeros(2))
    b = predict(frames, pts, np.zeros((3, 2)), net, step_now=np.array([1.0, -2.0]))
    # the current-frame estimate undoes the camera step into the current frame
    assert b.locations[0].x == pytest.approx(a.locations[0].x - 1.0)
    assert b.locations[0].y == pytest.approx(a.locations[0].y + 2.0)
    assert len(a.locations) == TINY.future_len + 1


# --- training ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_windows():
    cfg = TrajectoryNetConfig(map_shape=(16, 16))
    seqs = [generate_sequence(sample_config(s, length=24)) for s in range(3)]
    return cfg, seqs, build_windows(seqs, cfg, stride=3)


def test_build_windows_shapes(small_windows):
    cfg, seqs, w = small_windows
    assert w.frames.shape[1:] == (cfg.past_len, 1, 16, 16)
    assert w.cells.shape[1:] == (cfg.window, 2)
    assert len(w) == 3 * len(range(0, 24 - cfg.window + 1, 3))
    with pytest.raises(ValueError):
        build_windows([generate_sequence(SynthConfig(length=5))], cfg)


def test_windows_are_relative_to_newest_past_frame(small_windows):
    cfg, seqs, w = small_windows
    geo = MapGeometry.for_frame((64, 64), cfg.map_shape)
    m = sequence_motion(seqs[0])
    ref = cfg.past_len - 1
    # the reference frame is uncompensated; the others carry m^k - m^ref
    assert np.allclose(w.cells[0, ref], geo.to_cells(seqs[0].centers[ref]))
    assert np.allclose(w.cells[0, 0], geo.to_cells(seqs[0].centers[0] + m[0] - m[ref]))


def test_sequence_motion_sources(small_windows):
    _, seqs, _ = small_windows
    assert np.all(sequence_motion(seqs[0], "none") == 0)
    with pytest.raises(ValueError):
        sequence_motion(seqs[0], "magic")


def test_training_reduces_loss_and_is_deterministic(small_windows):
    cfg, _, w = small_windows
    a = train_trajectory(w, cfg, epochs=3, lr=1e-3, seed=7)
    b = train_trajectory(w, cfg, epochs=3, lr=1e-3, seed=7)
    assert a.losses[-1] < a.losses[0]
    assert a.losses == b.losses
    for p, q in zip(a.net.parameters(), b.net.parameters()):
        assert torch.equal(p, q)


def test_training_rejects_empty_set(small_windows):
    cfg, _, w = small_windows
    with pytest.raises(ValueError):
        train_trajectory(w.subset(slice(0, 0)), cfg)
