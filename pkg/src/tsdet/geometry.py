"""Box arithmetic, IoU, clipping, and per-class non-maximum suppression.

Scalar entry points operate on :class:`BoundingBox`; the ``*_xyxy`` helpers
operate on float arrays in corner form and back the detector and evaluator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annotations import BoundingBox
from .errors import ValidationError

try:
    from numba import njit as _njit
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _njit = None


@dataclass(frozen=True)
class Detection:
    """A scored box prediction for one foreground class."""

    box: BoundingBox
    class_id: int
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"detection score {self.score} outside [0, 1]")
        if self.class_id < 1:
            raise ValidationError(f"detection class_id {self.class_id} must be >= 1")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union in continuous coordinates."""
    if a.area <= 0 or b.area <= 0:
        raise ValidationError("iou requires boxes with positive area")
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def clip(box: BoundingBox, width: float, height: float) -> BoundingBox:
    """Clip a box to the image extent; errors if nothing remains."""
    x1, y1, x2, y2 = box.corners
    x1, y1 = max(x1, 0.0), max(y1, 0.0)
    x2, y2 = min(x2, float(width)), min(y2, float(height))
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise ValidationError("degenerate after clip")
    return BoundingBox.from_corners(x1, y1, x2, y2)


def iou_matrix_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two corner-form box arrays, shapes (n,4) and (m,4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


def clip_xyxy(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = np.asarray(boxes, dtype=np.float64).copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, float(width))
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, float(height))
    return out


def _nms_sorted_numpy(boxes: np.ndarray, iou_threshold: float) -> np.ndarray:
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    keep: list[int] = []
    live = np.arange(len(boxes))
    while len(live):
        i = live[0]
        keep.append(i)
        rest = live[1:]
        if len(rest) == 0:
            break
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
        ious = inter / (areas[i] + areas[rest] - inter)
        live = rest[ious < iou_threshold]
    return np.array(keep, dtype=np.int64)


def _nms_sorted_loop(boxes: np.ndarray, iou_threshold: float) -> np.ndarray:
    n = len(boxes)
    alive = np.ones(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(n):
        if not alive[i]:
            continue
        keep[k] = i
        k += 1
        ax1, ay1, ax2, ay2 = boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]
        area_i = (ax2 - ax1) * (ay2 - ay1)
        for j in range(i + 1, n):
            if not alive[j]:
                continue
            iw = min(ax2, boxes[j, 2]) - max(ax1, boxes[j, 0])
            if iw <= 0.0:
                continue
            ih = min(ay2, boxes[j, 3]) - max(ay1, boxes[j, 1])
            if ih <= 0.0:
                continue
            inter = iw * ih
            area_j = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            if inter / (area_i + area_j - inter) >= iou_threshold:
                alive[j] = False
    return keep[:k]


if _njit is not None:
    _nms_sorted = _njit(cache=True)(_nms_sorted_loop)
else:  # pragma: no cover
    _nms_sorted = _nms_sorted_numpy


def nms_indices_xyxy(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS over corner-form boxes of a single class.

    Returns kept indices into the input, in descending score order with ties
    broken by ascending input index.
    """
    n = len(scores)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    boxes = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64)[order])
    return order[_nms_sorted(boxes, float(iou_threshold))]


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Per-class greedy suppression; output sorted by descending score."""
    if not (0.0 < iou_threshold < 1.0):
        raise ValidationError(f"iou_threshold {iou_threshold} outside (0, 1)")
    if not dets:
        return []
    kept_idx: list[int] = []
    classes = sorted({d.class_id for d in dets})
    for cid in classes:
        idx = np.array([i for i, d in enumerate(dets) if d.class_id == cid], dtype=np.int64)
        boxes = np.array([dets[i].box.corners for i in idx], dtype=np.float64)
        scores = np.array([dets[i].score for i in idx], dtype=np.float64)
        kept_idx.extend(idx[nms_indices_xyxy(boxes, scores, iou_threshold)].tolist())
    # stable global order: score descending, then input index ascending
    kept_idx.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in kept_idx]
