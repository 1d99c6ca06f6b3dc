"""
Box representation and overlap kernels.

Boxes are normalized center-format ``(cx, cy, w, h)``; corner form
``(x1, y1, x2, y2)`` is derived on demand. Scalar functions operate on
:class:`Box`, the array kernels on ``[..., 4]`` float arrays in center
format and are what the matcher and the criterion use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

MIN_SIZE = 1e-6


class CornerBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"box {name} must be finite, got {v}")
        if self.w < MIN_SIZE or self.h < MIN_SIZE:
            raise ValueError(
                f"degenerate box: w={self.w}, h={self.h} (minimum {MIN_SIZE})"
            )

    @classmethod
    def from_seq(cls, values) -> "Box":
        cx, cy, w, h = (float(v) for v in values)
        return cls(cx, cy, w, h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)

    def corners(self) -> CornerBox:
        return to_corners(self)

    @property
    def area(self) -> float:
        return self.w * self.h


def to_corners(b: Box) -> CornerBox:
    return CornerBox(b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2)


def _overlap_terms(a: Box, b: Box):
    ax1, ay1, ax2, ay2 = to_corners(a)
    bx1, by1, bx2, by2 = to_corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area + b.area - inter
    enclosure = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, enclosure


# ratios are clamped to 1 so that roundoff on identical boxes cannot exceed it


def iou(a: Box, b: Box) -> float:
    inter, union, _ = _overlap_terms(a, b)
    return min(1.0, inter / union)


def giou(a: Box, b: Box) -> float:
    inter, union, enclosure = _overlap_terms(a, b)
    return min(1.0, inter / union) - 1.0 + min(1.0, union / enclosure)


# ---------------------------------------------------------------------------
# array kernels
# ---------------------------------------------------------------------------


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    x1, y1, x2, y2 = np.moveaxis(boxes, -1, 0)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def pairwise_iou_giou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """IoU and GIoU matrices ``[n, m]`` between two center-format box sets."""
    a = cxcywh_to_xyxy(np.reshape(boxes_a, (-1, 4)))[:, None, :]
    b = cxcywh_to_xyxy(np.reshape(boxes_b, (-1, 4)))[None, :, :]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    cw = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    ch = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclosure = cw * ch
    ious = np.minimum(inter / union, 1.0)
    return ious, ious - 1.0 + np.minimum(union / enclosure, 1.0)


def pairwise_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    return pairwise_iou_giou(boxes_a, boxes_b)[0]


def pairwise_giou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    return pairwise_iou_giou(boxes_a, boxes_b)[1]


def paired_giou_with_grad(pred: np.ndarray, target: np.ndarray, with_grad: bool = True):
    """Row-wise IoU and GIoU of ``pred[i]`` vs ``target[i]``.

    Returns ``(iou, giou, dgiou)`` where ``dgiou`` is ``[n, 4]``, the
    derivative of GIoU with respect to the center-format prediction
    (``None`` unless ``with_grad``). At the max/min kinks the branch of
    the target box is taken.
    """
    pred = np.reshape(np.asarray(pred, dtype=float), (-1, 4))
    target = np.reshape(np.asarray(target, dtype=float), (-1, 4))
    px1 = pred[:, 0] - 0.5 * pred[:, 2]
    px2 = pred[:, 0] + 0.5 * pred[:, 2]
    py1 = pred[:, 1] - 0.5 * pred[:, 3]
    py2 = pred[:, 1] + 0.5 * pred[:, 3]
    gx1 = target[:, 0] - 0.5 * target[:, 2]
    gx2 = target[:, 0] + 0.5 * target[:, 2]
    gy1 = target[:, 1] - 0.5 * target[:, 3]
    gy2 = target[:, 1] + 0.5 * target[:, 3]
    pw, ph = px2 - px1, py2 - py1
    union_base = pw * ph + (gx2 - gx1) * (gy2 - gy1)

    iw = np.minimum(px2, gx2) - np.maximum(px1, gx1)
    ih = np.minimum(py2, gy2) - np.maximum(py1, gy1)
    x_overlap, y_overlap = iw > 0, ih > 0
    iw = np.where(x_overlap, iw, 0.0)
    ih = np.where(y_overlap, ih, 0.0)
    inter = iw * ih
    union = union_base - inter
    cw = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    ch = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    enclosure = cw * ch
    ious = np.minimum(inter / union, 1.0)
    gious = ious - 1.0 + np.minimum(union / enclosure, 1.0)
    if not with_grad:
        return ious, gious, None

    # d/d(x1, y1, x2, y2) of intersection width/height and enclosure extent
    diw_x1 = -((px1 > gx1) & x_overlap).astype(float)
    diw_x2 = ((px2 < gx2) & x_overlap).astype(float)
    dih_y1 = -((py1 > gy1) & y_overlap).astype(float)
    dih_y2 = ((py2 < gy2) & y_overlap).astype(float)
    dcw_x1 = -(px1 < gx1).astype(float)
    dcw_x2 = (px2 > gx2).astype(float)
    dch_y1 = -(py1 < gy1).astype(float)
    dch_y2 = (py2 > gy2).astype(float)

    d_inter = (ih * diw_x1, iw * dih_y1, ih * diw_x2, iw * dih_y2)
    d_area = (-ph, -pw, ph, pw)
    d_enc = (ch * dcw_x1, cw * dch_y1, ch * dcw_x2, cw * dch_y2)
    inv_u2 = 1.0 / union**2
    inv_c2 = 1.0 / enclosure**2
    g = []
    for di, da, de in zip(d_inter, d_area, d_enc):
        du = da - di
        g.append((di * union - inter * du) * inv_u2 + (du * enclosure - union * de) * inv_c2)
    dx1, dy1, dx2, dy2 = g
    d_giou = np.empty_like(pred)
    d_giou[:, 0] = dx1 + dx2
    d_giou[:, 1] = dy1 + dy2
    d_giou[:, 2] = 0.5 * (dx2 - dx1)
    d_giou[:, 3] = 0.5 * (dy2 - dy1)
    return ious, gious, d_giou
