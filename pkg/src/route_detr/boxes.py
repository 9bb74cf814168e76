"""Plain-numpy box geometry: format conversion, pairwise IoU and GIoU.

These are the non-differentiable geometry helpers used for matching costs,
metrics, and data generation. The differentiable per-pair GIoU used inside
the loss lives in losses.py on top of the tensor ops.
"""

from __future__ import annotations

import numpy as np


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    """(..., 4) center/size -> (..., 4) corner form."""
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def box_area(xyxy: np.ndarray) -> np.ndarray:
    """(..., 4) corner boxes -> (...) areas, negative extents clipped to 0."""
    w = np.clip(xyxy[..., 2] - xyxy[..., 0], 0, None)
    h = np.clip(xyxy[..., 3] - xyxy[..., 1], 0, None)
    return w * h


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix (n, k) between corner boxes a (n, 4) and b (k, 4)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU matrix (n, k): IoU minus the empty fraction of the enclosing box.

    Degenerate zero-area pairs get IoU 0 while the enclosing-box penalty
    stays defined, so values remain in [-1, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iou = pairwise_iou(a, b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    ewh = np.clip(erb - elt, 0, None)
    enclose = ewh[..., 0] * ewh[..., 1]
    penalty = np.zeros_like(enclose)
    np.divide(enclose - union, enclose, out=penalty, where=enclose > 0)
    return iou - penalty


def iou_single(a, b) -> float:
    """IoU of two cxcywh boxes."""
    return float(pairwise_iou(cxcywh_to_xyxy(np.asarray(a)[None]),
                              cxcywh_to_xyxy(np.asarray(b)[None]))[0, 0])
