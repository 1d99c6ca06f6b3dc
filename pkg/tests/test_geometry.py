import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from align_criterion.geometry import (
    Box,
    cxcywh_to_xyxy,
    giou,
    iou,
    paired_giou_with_grad,
    pairwise_iou_giou,
    to_corners,
    xyxy_to_cxcywh,
)


@pytest.mark.parametrize(
    "box, corners",
    [
        ((0.5, 0.5, 0.4, 0.4), (0.3, 0.3, 0.7, 0.7)),
        ((0.5, 0.5, 1.0, 1.0), (0.0, 0.0, 1.0, 1.0)),
        ((0.2, 0.2, 0.2, 0.2), (0.1, 0.1, 0.3, 0.3)),
    ],
)
def test_to_corners(box, corners):
    assert to_corners(Box(*box)) == pytest.approx(corners, abs=1e-15)


def test_iou_examples():
    b = Box(0.4, 0.6, 0.3, 0.2)
    assert iou(b, b) == pytest.approx(1.0)
    assert iou(Box(0.5, 0.5, 0.4, 0.4), Box(0.5, 0.5, 0.2, 0.2)) == pytest.approx(0.25)
    assert iou(Box(0.2, 0.2, 0.2, 0.2), Box(0.8, 0.8, 0.2, 0.2)) == 0.0


def test_giou_examples():
    b = Box(0.4, 0.6, 0.3, 0.2)
    assert giou(b, b) == pytest.approx(1.0)
    assert giou(Box(0.2, 0.2, 0.2, 0.2), Box(0.8, 0.8, 0.2, 0.2)) == pytest.approx(-0.875)
    assert giou(Box(0.5, 0.5, 0.4, 0.4), Box(0.5, 0.5, 0.2, 0.2)) == pytest.approx(0.25)


@pytest.mark.parametrize("bad", [(0.5, 0.5, 0.0, 0.2), (0.5, 0.5, 0.2, 1e-7), (np.nan, 0.5, 0.2, 0.2), (0.5, 0.5, np.inf, 0.2)])
def test_degenerate_boxes_rejected(bad):
    with pytest.raises(ValueError):
        Box(*bad)


def test_corner_conversion_roundtrip():
    rng = np.random.default_rng(3)
    b = np.column_stack([rng.uniform(0.2, 0.8, (50, 2)), rng.uniform(0.05, 0.3, (50, 2))])
    np.testing.assert_allclose(xyxy_to_cxcywh(cxcywh_to_xyxy(b)), b, atol=1e-14)


coord = st.floats(0.15, 0.85)
size = st.floats(0.01, 0.3)
boxes = st.builds(Box, coord, coord, size, size)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_symmetry_and_giou_bound(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)
    assert giou(a, b) == pytest.approx(giou(b, a), abs=1e-12)
    assert 0.0 <= iou(a, b) <= 1.0
    assert -1.0 <= giou(a, b) <= iou(a, b) + 1e-12


@settings(max_examples=200, deadline=None)
@given(boxes, boxes, st.floats(-0.1, 0.1), st.floats(-0.1, 0.1))
def test_translation_invariance(a, b, dx, dy):
    a2 = Box(a.cx + dx, a.cy + dy, a.w, a.h)
    b2 = Box(b.cx + dx, b.cy + dy, b.w, b.h)
    assert iou(a2, b2) == pytest.approx(iou(a, b), abs=1e-9)
    assert giou(a2, b2) == pytest.approx(giou(a, b), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes, st.floats(0.5, 1.5))
def test_scale_invariance(a, b, f):
    c = 0.5

    def scaled(x):
        return Box(c + f * (x.cx - c), c + f * (x.cy - c), f * x.w, f * x.h)

    assert iou(scaled(a), scaled(b)) == pytest.approx(iou(a, b), abs=1e-9)
    assert giou(scaled(a), scaled(b)) == pytest.approx(giou(a, b), abs=1e-9)


def test_giou_equals_iou_when_union_is_enclosure():
    # side-by-side boxes sharing full height: union fills the enclosing box
    a, b = Box(0.3, 0.5, 0.2, 0.2), Box(0.45, 0.5, 0.2, 0.2)
    assert giou(a, b) == pytest.approx(iou(a, b), abs=1e-12)
    c = Box(0.45, 0.55, 0.2, 0.2)
    assert giou(a, c) < iou(a, c)


def test_pairwise_matches_scalar():
    rng = np.random.default_rng(0)
    a = np.column_stack([rng.uniform(0.2, 0.8, (6, 2)), rng.uniform(0.05, 0.4, (6, 2))])
    b = np.column_stack([rng.uniform(0.2, 0.8, (4, 2)), rng.uniform(0.05, 0.4, (4, 2))])
    ious, gious = pairwise_iou_giou(a, b)
    for i in range(6):
        for j in range(4):
            assert ious[i, j] == pytest.approx(iou(Box.from_seq(a[i]), Box.from_seq(b[j])), abs=1e-12)
            assert gious[i, j] == pytest.approx(giou(Box.from_seq(a[i]), Box.from_seq(b[j])), abs=1e-12)


def test_giou_gradient_against_finite_differences():
    rng = np.random.default_rng(11)
    tgt = np.column_stack([rng.uniform(0.3, 0.7, (20, 2)), rng.uniform(0.1, 0.3, (20, 2))])
    pred = tgt + rng.normal(0, 0.08, tgt.shape)
    pred[:, 2:] = np.abs(pred[:, 2:]) + 0.02
    _, g, grad = paired_giou_with_grad(pred, tgt)
    h = 1e-7
    for c in range(4):
        up, dn = pred.copy(), pred.copy()
        up[:, c] += h
        dn[:, c] -= h
        num = (paired_giou_with_grad(up, tgt, False)[1] - paired_giou_with_grad(dn, tgt, False)[1]) / (2 * h)
        np.testing.assert_allclose(grad[:, c], num, atol=1e-6)
