import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occtrack.geometry import (
    BoundingBox,
    Point2,
    ScoreMap,
    SimilarityTransform,
    accumulate_motion,
    apply_transform,
    argmax_location,
    default_sigma,
    frame_center,
    gaussian_location_map,
    iou,
    refine_peak,
    sample_patch,
    warp_image,
)


def test_point_rejects_non_finite():
    with pytest.raises(ValueError):
        Point2(float("nan"), 0.0)
    with pytest.raises(ValueError):
        Point2(0.0, float("inf"))


def test_box_needs_positive_size():
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 0, 5)
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 5, -1)


def test_box_from_top_left():
    b = BoundingBox.from_xywh(10, 20, 30, 40)
    assert (b.cx, b.cy, b.w, b.h) == (25, 40, 30, 40)
    assert b.to_xywh() == (10, 20, 30, 40)


def test_apply_transform_identity_and_rotation():
    p = Point2(3.0, -2.0)
    assert apply_transform(SimilarityTransform.identity(), p) == p
    q = apply_transform(SimilarityTransform(math.pi / 2, 2.0, (1.0, 0.0)), Point2(1.0, 0.0))
    assert q.x == pytest.approx(1.0) and q.y == pytest.approx(2.0)
    # pivot about a centre
    q = apply_transform(SimilarityTransform(0.0, 2.0), Point2(2.0, 2.0), center=Point2(1.0, 1.0))
    assert (q.x, q.y) == (3.0, 3.0)


def test_transform_rejects_bad_scale():
    with pytest.raises(ValueError):
        SimilarityTransform(0.0, 0.0)


def _random_steps(rng, n):
    return [
        SimilarityTransform(float(rng.uniform(-0.2, 0.2)), float(rng.uniform(0.9, 1.1)), tuple(rng.uniform(-3, 3, 2)))
        for _ in range(n)
    ]


def test_accumulate_matches_hand_prefix(rng):
    for _ in range(100):
        steps = _random_steps(rng, int(rng.integers(1, 12)))
        got = accumulate_motion(steps)
        m = np.zeros(2)
        for s, g in zip(steps, got):
            c, sn = math.cos(s.r), math.sin(s.r)
            m = m + s.c * np.array([c * s.v[0] - sn * s.v[1], sn * s.v[0] + c * s.v[1]])
            assert np.abs(g - m).max() < 1e-9


def test_accumulate_strict_variant(rng):
    steps = _random_steps(rng, 6)
    got = accumulate_motion(steps, strict=True)
    m = np.asarray(steps[0].v)
    assert np.allclose(got[0], m)
    for s, g in zip(steps[1:], got[1:]):
        m = s.linear @ m + np.asarray(s.v)
        assert np.abs(g - m).max() < 1e-9


def test_accumulate_translation_only_agrees_in_both_forms():
    steps = [SimilarityTransform(v=(1.0, -2.0))] * 4
    for strict in (False, True):
        assert np.allclose(accumulate_motion(steps, strict)[-1], (4.0, -8.0))


def test_accumulate_empty_raises():
    with pytest.raises(ValueError):
        accumulate_motion([])


def test_iou_examples():
    a = BoundingBox(5, 5, 4, 4)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(50, 50, 4, 4)) == 0.0
    # half overlap along x: inter 8, union 24
    assert iou(a, BoundingBox(7, 5, 4, 4)) == pytest.approx(1 / 3)


boxes = st.builds(
    BoundingBox,
    st.floats(0, 20),
    st.floats(0, 20),
    st.floats(1, 12),
    st.floats(1, 12),
)


@settings(max_examples=60, deadline=None)
@given(boxes, boxes)
def test_iou_against_raster(a, b):
    # rasterise both boxes on a fine grid and count cells
    step = 0.05
    xs = np.arange(-10, 35, step) + step / 2
    X, Y = np.meshgrid(xs, xs)

    def mask(bx):
        return (X >= bx.x0) & (X < bx.x1) & (Y >= bx.y0) & (Y < bx.y1)

    ma, mb = mask(a), mask(b)
    union = (ma | mb).sum()
    approx = (ma & mb).sum() / union
    assert iou(a, b) == pytest.approx(approx, abs=0.03)
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 <= iou(a, b) <= 1.0


def test_gaussian_map_peaks_at_point():
    m = gaussian_location_map(Point2(10.0, 20.0), shape=(32, 32))
    assert m.values.max() == pytest.approx(1.0)
    assert argmax_location(m) == Point2(10.0, 20.0)
    assert default_sigma((32, 64)) == pytest.approx(3.2)
    with pytest.raises(ValueError):
        gaussian_location_map(Point2(0, 0), sigma=0.0)


def test_gaussian_map_respects_cell_geometry():
    m = gaussian_location_map(Point2(9.0, 5.0), sigma=2.0, shape=(8, 8), origin=(1.0, 1.0), scale=2.0)
    assert argmax_location(m) == Point2(9.0, 5.0)


def test_argmax_ties_and_errors():
    v = np.zeros((3, 3))
    v[1, 2] = v[2, 0] = 1.0
    assert argmax_location(ScoreMap(v)) == Point2(2.0, 1.0)
    with pytest.raises(ValueError):
        argmax_location(ScoreMap(np.full((2, 2), np.nan)))
    with pytest.raises(ValueError):
        argmax_location(ScoreMap(np.zeros((0, 0))))


def test_argmax_ignores_nan():
    v = np.array([[np.nan, 0.2], [0.9, 0.1]])
    assert argmax_location(ScoreMap(v)) == Point2(0.0, 1.0)


def test_refine_peak_recovers_parabola_vertex():
    ys, xs = np.mgrid[0:7, 0:7]
    v = -((xs - 3.3) ** 2) - 2 * (ys - 2.8) ** 2
    i, j = refine_peak(v, 3, 3)
    assert (i, j) == (pytest.approx(2.8), pytest.approx(3.3))
    # border peaks are left alone
    assert refine_peak(v, 0, 3)[0] == 0.0


def test_subpixel_argmax_on_gaussian():
    m = gaussian_location_map(Point2(10.4, 7.7), sigma=2.0, shape=(16, 16))
    p = argmax_location(m, subpixel=True)
    assert abs(p.x - 10.4) < 0.1 and abs(p.y - 7.7) < 0.1


def test_warp_identity_and_translation(rng):
    img = rng.uniform(0, 255, (20, 24))
    assert np.allclose(warp_image(img, SimilarityTransform.identity()), img)
    out = warp_image(img, SimilarityTransform(v=(2.0, 1.0)))
    # out(p) = img(p + v)
    assert np.allclose(out[3:10, 3:10], img[4:11, 5:12])


def test_sample_patch_centre_and_scale(rng):
    img = rng.uniform(0, 1, (11, 11))
    ctr = frame_center(img.shape)
    assert np.allclose(sample_patch(img, ctr, 11), img)
    half = sample_patch(img, ctr, 5, scale=2.0)
    assert np.allclose(half, img[1:10:2, 1:10:2])
