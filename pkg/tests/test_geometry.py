import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcoskit.geometry import (
    DEFAULT_RANGES,
    Box,
    FeatureLevel,
    ResizeSpec,
    build_levels,
    enumerate_locations,
    giou,
    iou,
    pairwise_ioa,
    pairwise_iou,
    resize,
)

coords = st.floats(0, 1000, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw):
    x0, x1 = sorted((draw(coords), draw(coords)))
    y0, y1 = sorted((draw(coords), draw(coords)))
    return Box(x0, y0, x1, y1)


def test_box_rejects_inverted_corners():
    with pytest.raises(ValueError):
        Box(10, 0, 5, 5)


def test_box_xywh_round_trip():
    b = Box.from_xywh(1.5, 2.0, 3.25, 4.0, class_id=2)
    assert b.as_tuple() == (1.5, 2.0, 4.75, 6.0)
    assert b.to_xywh() == [1.5, 2.0, 3.25, 4.0]
    assert b.area == 13.0
    assert b.center == (3.125, 4.0)


def test_box_clip():
    assert Box(-5, -5, 20, 30).clipped(10, 10).as_tuple() == (0, 0, 10, 10)


def test_iou_examples():
    a = Box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box(20, 20, 30, 30)) == 0.0
    assert iou(a, Box(0, 0, 10, 6)) == pytest.approx(0.6)
    assert iou(a, Box(5, 5, 5, 5)) == 0.0


def test_giou_disjoint_value():
    assert giou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == pytest.approx(-7 / 9)


def test_giou_equals_iou_when_hull_is_union():
    a, b = Box(0, 0, 10, 10), Box(0, 0, 10, 6)
    assert giou(a, b) == pytest.approx(iou(a, b))


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a))
    assert -1.0 <= giou(a, b) <= v + 1e-12


@given(st.lists(boxes(), min_size=1, max_size=6), st.lists(boxes(), min_size=1, max_size=6))
def test_pairwise_matches_scalar(xs, ys):
    a = np.array([b.as_tuple() for b in xs])
    b = np.array([b.as_tuple() for b in ys])
    m = pairwise_iou(a, b)
    for i, p in enumerate(xs):
        for j, q in enumerate(ys):
            assert m[i, j] == pytest.approx(iou(p, q), abs=1e-12)


def test_pairwise_ioa_is_over_first_argument():
    a = np.array([[0, 0, 10, 10]], dtype=float)
    r = np.array([[0, 0, 5, 10]], dtype=float)
    assert pairwise_ioa(a, r)[0, 0] == pytest.approx(0.5)
    assert pairwise_ioa(r, a)[0, 0] == pytest.approx(1.0)


@pytest.mark.parametrize(
    "w,h,expected",
    [
        (640, 480, (1067, 800)),
        (1000, 400, (1333, 533)),
        (800, 800, (800, 800)),
        (100, 50, (1333, 667)),
    ],
)
def test_resize_short_side_and_long_cap(w, h, expected):
    nw, nh, scale = resize(w, h)
    assert (nw, nh) == expected
    assert min(nw, nh) <= 800 + 1
    assert max(nw, nh) <= 1333
    assert scale == pytest.approx(min(800 / min(w, h), 1333 / max(w, h)))


def test_resize_rejects_bad_size():
    with pytest.raises(ValueError):
        resize(0, 10)


def test_resize_custom_targets():
    assert resize(200, 100, ResizeSpec(400, 10000)) == (800, 400, 4.0)


def test_build_levels_grid_sizes():
    # an 800 x 1024 (h x w) input
    levels = build_levels(1024, 800)
    assert [(lv.grid_h, lv.grid_w) for lv in levels] == [(100, 128), (50, 64), (25, 32), (13, 16), (7, 8)]
    assert [(lv.range_lo, lv.range_hi) for lv in levels] == list(DEFAULT_RANGES)
    assert build_levels(1024, 801)[0].grid_h == 101


def test_build_levels_single_stride_is_unbounded():
    (lv,) = build_levels(100, 100, (16,))
    assert lv.range_lo == 0 and math.isinf(lv.range_hi)
    assert lv.pyramid_level == 4


@pytest.mark.parametrize(
    "strides,ranges",
    [
        ((), None),
        ((16, 8), [(0, 64), (64, math.inf)]),
        ((8, 16), [(0, 64), (70, math.inf)]),
        ((8, 16), None),
    ],
)
def test_build_levels_validation(strides, ranges):
    with pytest.raises(ValueError):
        build_levels(100, 100, strides, ranges)


def test_location_mapping():
    lv = FeatureLevel(stride=8, range_lo=0, range_hi=64, grid_w=3, grid_h=2)
    locs = enumerate_locations(lv)
    assert [(l.image_x, l.image_y) for l in locs] == [(4, 4), (12, 4), (20, 4), (4, 12), (12, 12), (20, 12)]
    assert np.array_equal(lv.points(), np.array([[l.image_x, l.image_y] for l in locs]))


@given(st.integers(1, 2000), st.integers(1, 2000), st.sampled_from([8, 16, 32, 64, 128]))
def test_locations_stay_within_padded_grid(w, h, s):
    lv = build_levels(w, h, (s,))[0]
    pts = lv.points()
    assert pts[:, 0].max() < lv.grid_w * s
    assert pts[:, 1].max() < lv.grid_h * s
    if w % s == 0 and h % s == 0:
        assert pts[:, 0].max() < w and pts[:, 1].max() < h
