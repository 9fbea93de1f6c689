import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calteacher.geometry import BBox, BoxError, iou

from oracles import plain_iou, shapely_iou


@st.composite
def boxes(draw, lo=-1e3, hi=1e3, min_side=0.0):
    x = draw(st.floats(lo, hi))
    y = draw(st.floats(lo, hi))
    w = draw(st.floats(min_side, 500.0))
    h = draw(st.floats(min_side, 500.0))
    return BBox(x, y, x + w, y + h)


@pytest.mark.parametrize(
    "a, b, want",
    [
        ((0, 0, 10, 10), (0, 0, 10, 10), 1.0),
        ((0, 0, 1, 1), (5, 5, 6, 6), 0.0),
        ((0, 0, 2, 2), (1, 1, 3, 3), 1 / 7),
        ((0, 0, 10, 10), (10, 0, 20, 10), 0.0),  # shared edge only
        ((0, 0, 10, 10), (0, 0, 10, 15), 100 / 150),
    ],
)
def test_iou_examples(a, b, want):
    assert iou(BBox(*a), BBox(*b)) == pytest.approx(want, rel=1e-12)


def test_degenerate_boxes_never_nan():
    point = BBox(1, 1, 1, 1)
    line = BBox(0, 0, 5, 0)
    assert iou(point, point) == 1.0
    assert iou(point, BBox(0, 0, 2, 2)) == 0.0
    assert iou(line, BBox(0, 0, 5, 5)) == 0.0


@pytest.mark.parametrize("coords", [(1, 0, 0, 1), (0, 1, 1, 0), (0, 0, math.nan, 1), (0, 0, math.inf, 1)])
def test_invalid_boxes_rejected(coords):
    with pytest.raises(BoxError):
        BBox(*coords)


def test_xywh_round_trip_and_clamp():
    b = BBox.from_xywh(5, 6, 10, 20)
    assert b == BBox(5, 6, 15, 26)
    assert b.to_xywh() == (5, 6, 10, 20)
    assert b.area == 200
    assert BBox(-5, -5, 700, 30).clamp(640, 480) == BBox(0, 0, 640, 30)
    assert BBox(700, 500, 800, 600).clamp(640, 480).area == 0


@settings(max_examples=400, deadline=None)
@given(boxes(), boxes())
def test_iou_matches_shapely(a, b):
    if a == b and a.area == 0:
        # polygons cannot express this case; exact coincidence counts as 1
        assert iou(a, b) == 1.0
        return
    assert iou(a, b) == pytest.approx(shapely_iou(a, b), abs=1e-9)


@settings(max_examples=400, deadline=None)
@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@settings(max_examples=400, deadline=None)
# translating can merge distinct zero-area boxes by rounding, so sides are kept positive
@given(boxes(min_side=0.01), boxes(min_side=0.01), st.floats(-100, 100), st.floats(-100, 100), st.floats(0.01, 100))
def test_iou_translation_and_scale_invariant(a, b, dx, dy, s):
    base = plain_iou(a, b)
    assert iou(a.translate(dx, dy), b.translate(dx, dy)) == pytest.approx(base, abs=1e-9)
    assert iou(a.scale(s), b.scale(s)) == pytest.approx(base, abs=1e-12)
