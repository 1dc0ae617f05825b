"""Axis-aligned box algebra: coordinate conversion, IoU/GIoU, NMS.

Boxes are plain float64 arrays, either center-size rows (cx, cy, w, h) or
corner rows (x1, y1, x2, y2). Everything here is pure numpy with no
gradient involvement; the differentiable GIoU used by the box loss lives
in the losses module.
"""

from __future__ import annotations

import numpy as np

MIN_BOX_SIDE = 1e-6  # degenerate predictions are clamped, never rejected


class BoxError(ValueError):
    """Invalid box geometry (non-positive width or height)."""


def _rows(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise BoxError(f"expected (n, 4) boxes, got shape {arr.shape}")
    return arr


def cxcywh_to_xyxy(boxes) -> np.ndarray:
    b = _rows(boxes)
    if np.any(b[:, 2] <= 0) or np.any(b[:, 3] <= 0):
        raise BoxError("non-positive width/height in center-size box")
    out = np.empty_like(b)
    out[:, 0] = b[:, 0] - b[:, 2] / 2
    out[:, 1] = b[:, 1] - b[:, 3] / 2
    out[:, 2] = b[:, 0] + b[:, 2] / 2
    out[:, 3] = b[:, 1] + b[:, 3] / 2
    return out


def xyxy_to_cxcywh(boxes) -> np.ndarray:
    b = _rows(boxes)
    if np.any(b[:, 2] <= b[:, 0]) or np.any(b[:, 3] <= b[:, 1]):
        raise BoxError("corner box with x2 <= x1 or y2 <= y1")
    out = np.empty_like(b)
    out[:, 0] = (b[:, 0] + b[:, 2]) / 2
    out[:, 1] = (b[:, 1] + b[:, 3]) / 2
    out[:, 2] = b[:, 2] - b[:, 0]
    out[:, 3] = b[:, 3] - b[:, 1]
    return out


def box_convert(box, src: str, dst: str) -> np.ndarray:
    """Convert between 'cxcywh' and 'xyxy'; identity conversion copies."""
    forms = {"cxcywh", "xyxy"}
    if src not in forms or dst not in forms:
        raise ValueError(f"unknown box form: {src!r} -> {dst!r}")
    if src == dst:
        return _rows(box).copy()
    return cxcywh_to_xyxy(box) if dst == "xyxy" else xyxy_to_cxcywh(box)


def clamp_degenerate(cxcywh_boxes) -> np.ndarray:
    """Raise w/h below MIN_BOX_SIDE up to it (predictions only)."""
    b = _rows(cxcywh_boxes).copy()
    b[:, 2:] = np.maximum(b[:, 2:], MIN_BOX_SIDE)
    return b


def iou_pairwise(a_xyxy, b_xyxy) -> np.ndarray:
    """IoU matrix of shape (len(a), len(b)); corner-form inputs."""
    a = _rows(a_xyxy)
    b = _rows(b_xyxy)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def giou_pairwise(a_xyxy, b_xyxy) -> np.ndarray:
    """Generalized IoU matrix: IoU - (hull - union) / hull, in (-1, 1]."""
    a = _rows(a_xyxy)
    b = _rows(b_xyxy)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    hull_lt = np.minimum(a[:, None, :2], b[None, :, :2])
    hull_rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    hull_wh = hull_rb - hull_lt
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return inter / union - (hull - union) / hull


def nms(boxes_xyxy, scores, iou_thresh: float):
    """Greedy class-agnostic suppression.

    Visits boxes by descending score (ties broken by lower index) and keeps
    a box iff its IoU with every already-kept box is <= iou_thresh. Returns
    the kept indices in visit order.
    """
    boxes = _rows(boxes_xyxy)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(boxes):
        raise ValueError(f"nms: {len(boxes)} boxes vs {len(scores)} scores")
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms: non-finite score")
    order = np.lexsort((np.arange(len(scores)), -scores))
    kept: list[int] = []
    for i in order:
        if kept and np.any(iou_pairwise(boxes[i], boxes[kept])[0] > iou_thresh):
            continue
        kept.append(int(i))
    return kept


def nms_per_class(boxes_xyxy, scores, labels, iou_thresh: float):
    """Class-aware NMS: run greedy suppression within each label group."""
    boxes = _rows(boxes_xyxy)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    kept: list[int] = []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        for k in nms(boxes[idx], scores[idx], iou_thresh):
            kept.append(int(idx[k]))
    kept.sort(key=lambda i: (-scores[i], i))
    return kept
