import math

import numpy as np
import pytest
import torch

from gradcheck import check
from occtrack.assess import (
    AssessConfig,
    AssessmentInput,
    AssessNet,
    CalibrationParams,
    CandidateRecord,
    LabeledSample,
    bce_loss,
    calibrate_temperature,
    drift_negative,
    fit_temperature,
    margin,
    heatmap_summary,
    max_softmax,
    mine_samples,
    nll,
    positive_probability,
    score_calibrated,
    score_raw,
    score_raw_batch,
    train_assessment,
)
from occtrack.geometry import BoundingBox, Point2, ScoreMap, iou


def make_input(rng, past_len=11):
    hist = [Point2(*rng.uniform(0.2, 0.8, 2)) for _ in range(past_len)]
    return AssessmentInput(Point2(*rng.uniform(0.2, 0.8, 2)), hist, rng.uniform(0, 1, 4), (0.2, 0.2))


# --- bce ---------------------------------------------------------------------------------


def test_bce_examples():
    assert bce_loss(0.5, 0) == pytest.approx(math.log(2))
    assert bce_loss(0.5, 1) == pytest.approx(math.log(2))
    assert bce_loss(0.9, 0) == pytest.approx(-math.log(0.1))
    assert bce_loss(1.0, 1) == pytest.approx(0.0, abs=1e-6)
    assert bce_loss(0.0, 0) == pytest.approx(0.0, abs=1e-6)
    # clamped, so finite
    assert math.isfinite(bce_loss(0.0, 1))


def test_bce_nonnegative(rng):
    for s in rng.uniform(0, 1, 200):
        assert bce_loss(s, 0) >= 0 and bce_loss(s, 1) >= 0


# --- inputs and network ------------------------------------------------------------------


def test_input_rejects_nan():
    with pytest.raises(ValueError):
        AssessmentInput(Point2(0.1, 0.1), [Point2(0, 0)], np.array([np.nan, 0, 0, 0]), (0.1, 0.1))
    with pytest.raises(ValueError):
        AssessmentInput(Point2(0.1, 0.1), [Point2(0, 0)], np.zeros(4), (0.0, 0.1))


def test_feature_layout(rng):
    inp = make_input(rng)
    f = inp.features()
    assert f.shape == (7, 12)
    # the newest history point is the origin; the candidate is marked
    assert np.allclose(f[:2, -2], 0.0)
    assert f[-1, -1] == 1.0 and f[-1, :-1].sum() == 0.0


def test_from_pixels_normalises():
    inp = AssessmentInput.from_pixels(Point2(32, 16), [Point2(0, 64)], np.zeros(4), (8, 16), (64, 128))
    assert inp.candidate == Point2(0.25, 0.25)
    assert inp.history[0] == Point2(0.0, 1.0)
    assert inp.box_size == (0.0625, 0.25)


def test_heatmap_summary():
    assert np.array_equal(heatmap_summary(None), np.zeros(4))
    m = ScoreMap(np.array([[0.0, 1.0], [0.0, 0.0]]))
    peak, mean, ratio, at = heatmap_summary(m, Point2(0.0, 0.0))
    assert (peak, mean, at) == (1.0, 0.25, 0.0)
    assert ratio == pytest.approx(2.0 / 1.25, rel=1e-5)
    assert heatmap_summary(m, Point2(50.0, 50.0))[3] == -1.0


def test_zero_weights_give_bias_logits(rng):
    net = AssessNet()
    with torch.no_grad():
        for mod in (net.conv1, net.conv2, net.conv3):
            mod.weight.zero_()
        net.conv3.bias.copy_(torch.tensor([0.3, -0.7]))
    for _ in range(5):
        assert np.allclose(score_raw(make_input(rng), net), [0.3, -0.7])


def test_scoring_is_deterministic(rng):
    net = AssessNet(seed=1)
    inp = make_input(rng)
    assert np.array_equal(score_raw(inp, net), score_raw(inp, net))
    assert np.allclose(score_raw_batch([inp, inp], net)[1], score_raw(inp, net))
    assert score_raw_batch([], net).shape == (0, 2)


def test_no_heatmap_variant_ignores_summary(rng):
    net = AssessNet(AssessConfig(use_heatmap=False), seed=2)
    a = make_input(rng)
    b = AssessmentInput(a.candidate, a.history, rng.uniform(0, 1, 4), a.box_size)
    assert np.array_equal(score_raw(a, net), score_raw(b, net))


def test_gradient_assessment_network(rng):
    net = AssessNet(AssessConfig(channels=6), seed=3).double()
    x = torch.tensor(np.stack([make_input(rng).features() for _ in range(3)]), requires_grad=True)
    y = torch.tensor([0, 1, 1])

    def f():
        return torch.nn.functional.cross_entropy(net(x), y)

    assert check(f, [x, net.conv1.weight, net.conv2.bias, net.conv3.weight]) < 1e-4


# --- calibration -------------------------------------------------------------------------


def calibrated_set(rng, n=20000):
    z = rng.normal(0.0, 3.0, n)
    labels = (rng.uniform(size=n) < 1 / (1 + np.exp(-z))).astype(int)
    return np.stack([np.zeros(n), z], axis=1), labels


def test_calibrated_logits_keep_unit_temperature(rng):
    logits, labels = calibrated_set(rng)
    assert abs(fit_temperature(logits, labels) - 1.0) < 0.1


@pytest.mark.parametrize("scale", [0.5, 4.0, 10.0])
def test_temperature_recovers_scaling(rng, scale):
    logits, labels = calibrated_set(rng)
    T = fit_temperature(logits * scale, labels)
    assert abs(T - scale) / scale < 0.1


def test_nll_at_optimum_never_worse(rng):
    for _ in range(50):
        n = int(rng.integers(4, 60))
        logits = rng.normal(0, rng.uniform(0.1, 8), (n, 2))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        T = fit_temperature(logits, labels)
        assert 0.05 <= T <= 20.0
        assert nll(logits, labels, T) <= nll(logits, labels, 1.0) + 1e-12


def test_calibration_errors():
    with pytest.raises(ValueError):
        fit_temperature(np.zeros((3, 2)), np.array([1, 1, 1]))
    with pytest.raises(ValueError):
        fit_temperature(np.zeros((0, 2)), np.array([]))
    with pytest.raises(ValueError):
        calibrate_temperature([], AssessNet())


def test_calibrate_on_network(rng):
    net = AssessNet(seed=4)
    samples = [LabeledSample(make_input(rng), k % 2) for k in range(40)]
    cal = calibrate_temperature(samples, net)
    logits = score_raw_batch([s.input for s in samples], net)
    labels = np.array([s.label for s in samples])
    assert nll(logits, labels, cal.T) <= nll(logits, labels, 1.0)


def test_score_examples():
    assert positive_probability(np.array([1.3, 1.3]), 7.0) == 0.5
    assert positive_probability(np.array([0.0, 2.0])) == pytest.approx(0.8808, abs=1e-4)
    assert positive_probability(np.array([0.0, 2.0]), 1e9) == pytest.approx(0.5)
    z = np.random.default_rng(1).normal(0, 5, (100, 2))
    ms = max_softmax(z, 2.0)
    assert np.all((ms >= 0.5) & (ms <= 1.0))


def test_score_calibrated_uses_temperature(rng):
    net = AssessNet(seed=5)
    inp = make_input(rng)
    z = score_raw(inp, net)
    assert score_calibrated(inp, net, CalibrationParams(3.0)) == pytest.approx(positive_probability(z, 3.0))
    with pytest.raises(ValueError):
        CalibrationParams(0.0)


def test_shared_temperature_preserves_selection(rng):
    # 1000 random (tracker, trajectory) logit pairs: the winning branch never depends on T
    for _ in range(1000):
        a, b = rng.normal(0, 4, 2), rng.normal(0, 4, 2)
        T = float(np.exp(rng.uniform(np.log(0.05), np.log(20))))
        assert (margin(b, T) > margin(a, T)) == (margin(b) > margin(a))


def test_margin_orders_like_probability(rng):
    z = rng.normal(0, 2, (200, 2))
    m, p = margin(z, 1.5), positive_probability(z, 1.5)
    assert np.array_equal(np.argsort(m, kind="stable"), np.argsort(p, kind="stable"))
    # far out, probabilities tie at 1.0 but margins still separate
    a, b = np.array([0.0, 60.0]), np.array([0.0, 80.0])
    assert positive_probability(a, 0.05) == positive_probability(b, 0.05) == 1.0
    assert margin(b, 0.05) > margin(a, 0.05)


# --- mining ------------------------------------------------------------------------------

FRAME = (64, 64)


def record(idx, cand, heat=None):
    hist = [Point2(30.0, 30.0)] * 11
    return CandidateRecord(idx, cand, hist, (0.0, 0.0), heat, FRAME)


def test_mine_positive_and_drifted_negative():
    gt = [BoundingBox(32, 32, 12, 12)]
    out = mine_samples([record(0, Point2(32, 32))], gt, rng=0)
    assert [s.label for s in out] == [1, 0]
    neg = out[1].input.candidate
    neg_box = BoundingBox(neg.x * 64, neg.y * 64, 12, 12)
    assert iou(neg_box, gt[0]) <= 0.5
    d = math.hypot(neg_box.cx - 32, neg_box.cy - 32) / gt[0].diagonal
    assert 0.5 <= d <= 1.5


def test_mine_iou_exactly_half_is_negative():
    gt = [BoundingBox(32, 32, 12, 12)]
    cand = Point2(36.0, 32.0)
    assert iou(gt[0].moved_to(cand), gt[0]) == 0.5
    assert mine_samples([record(0, cand)], gt) == []
    out = mine_samples([record(0, cand)], gt, hard_negatives=True)
    assert [s.label for s in out] == [0]


def test_mine_far_candidate_is_not_positive():
    gt = [BoundingBox(32, 32, 12, 12)]
    far = Point2(32 + 2 * gt[0].diagonal, 32)
    assert mine_samples([record(0, far)], gt) == []


def test_mining_is_balanced_and_seeded(rng):
    gt = [BoundingBox(32 + k, 30, 12, 10) for k in range(20)]
    recs = [record(k, Point2(32 + k + rng.uniform(-8, 8), 30 + rng.uniform(-8, 8))) for k in range(20)]
    out = mine_samples(recs, gt, rng=3)
    labels = [s.label for s in out]
    assert labels.count(0) == labels.count(1) > 0
    again = mine_samples(recs, gt, rng=3)
    assert all(a.input.candidate == b.input.candidate for a, b in zip(out, again))


def test_drift_reports_exhaustion():
    with pytest.raises(RuntimeError):
        drift_negative(BoundingBox(0, 0, 1, 1), BoundingBox(0, 0, 1, 1), np.random.default_rng(0), max_tries=0)


# --- training ----------------------------------------------------------------------------


def test_training_learns_separable_task(rng):
    samples = []
    for k in range(120):
        inp = make_input(rng)
        good = k % 2
        hist = inp.history
        cand = hist[-1] if good else Point2(hist[-1].x + 0.4, hist[-1].y)
        samples.append(LabeledSample(AssessmentInput(cand, hist, inp.heatmap_summary, inp.box_size), good))
    res = train_assessment(samples, epochs=80, seed=0)
    assert res.losses[-1] < 0.5 * res.losses[0]
    z = score_raw_batch([s.input for s in samples], res.net)
    assert np.mean((margin(z) > 0) == np.array([s.label for s in samples])) > 0.9
    again = train_assessment(samples, epochs=80, seed=0)
    assert res.losses == again.losses
    with pytest.raises(ValueError):
        train_assessment([])
