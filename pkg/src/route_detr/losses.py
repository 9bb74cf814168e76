"""Set loss per decoder layer: weighted CE over all queries, L1+GIoU on matches.

The Hungarian matching is recomputed on detached values every call and acts
as a constant index set in backward; gradients flow only through the loss
terms themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import box_area, cxcywh_to_xyxy
from .matching import DEFAULT_LAMBDA, hungarian, match_cost
from .synthdata import Scene
from .tensor import Tensor

DEFAULT_BACKGROUND_WEIGHT = 0.1


@dataclass
class LossBreakdown:
    """Aggregated scalars (summed over layers) plus the differentiable total."""

    cls: float
    l1: float
    giou: float
    total: float
    per_layer: list
    tensor: Tensor
    matchings: tuple


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def giou_pairs(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable per-pair GIoU: pred (k, 4) cxcywh tensor vs gt (k, 4).

    Ground-truth areas are positive, so unions and enclosing boxes never
    vanish and no epsilon is needed in the divisions.
    """
    dtype = pred.data.dtype
    cx = T.slice_last(pred, 0, 1)
    cy = T.slice_last(pred, 1, 2)
    w = T.slice_last(pred, 2, 3)
    h = T.slice_last(pred, 3, 4)
    hw = T.mul(w, 0.5)
    hh = T.mul(h, 0.5)
    x1, x2 = T.sub(cx, hw), T.add(cx, hw)
    y1, y2 = T.sub(cy, hh), T.add(cy, hh)

    g = cxcywh_to_xyxy(gt).astype(dtype)
    gx1, gy1 = Tensor(g[:, 0:1]), Tensor(g[:, 1:2])
    gx2, gy2 = Tensor(g[:, 2:3]), Tensor(g[:, 3:4])
    garea = Tensor(box_area(g).astype(dtype)[:, None])

    iw = T.relu(T.sub(T.minimum(x2, gx2), T.maximum(x1, gx1)))
    ih = T.relu(T.sub(T.minimum(y2, gy2), T.maximum(y1, gy1)))
    inter = T.mul(iw, ih)
    union = T.sub(T.add(T.mul(w, h), garea), inter)
    iou = T.div(inter, union)

    ew = T.sub(T.maximum(x2, gx2), T.minimum(x1, gx1))
    eh = T.sub(T.maximum(y2, gy2), T.minimum(y1, gy1))
    enclose = T.mul(ew, eh)
    return T.sub(iou, T.div(T.sub(enclose, union), enclose))


def _as_pair(pred):
    if hasattr(pred, "class_logits"):
        return pred.class_logits, pred.boxes
    return pred


def set_loss(layer_preds, scene: Scene, lam=DEFAULT_LAMBDA,
             background_weight=DEFAULT_BACKGROUND_WEIGHT,
             fixed_matchings=None) -> LossBreakdown:
    """Deep-supervised set loss for one scene over all decoder layers.

    layer_preds: per layer, (class_logits (n, c+1) tensor, boxes (n, 4) tensor)
    or objects exposing those attributes. Background logits live in the last
    column; foreground class j occupies column j-1.

    fixed_matchings, when given, is a per-layer Matching sequence used instead
    of solving the assignment; finite-difference checks rely on this to keep
    the index set constant while parameters are perturbed.
    """
    per_layer = []
    used_matchings = []
    total_t = None
    agg = {"cls": 0.0, "l1": 0.0, "giou": 0.0, "total": 0.0}
    for li, pred in enumerate(layer_preds):
        logits, boxes = _as_pair(pred)
        n, ncls = logits.data.shape
        dtype = logits.data.dtype
        k = scene.boxes.shape[0]

        if fixed_matchings is not None:
            m = fixed_matchings[li]
        else:
            probs = _softmax_np(np.asarray(logits.data, dtype=np.float64))
            m = hungarian(match_cost(probs, boxes.data, scene, lam))
        used_matchings.append(m)

        targets = np.full(n, ncls - 1)
        weights = np.full(n, background_weight)
        for q, o in m.pairs:
            targets[q] = scene.classes[o] - 1
            weights[q] = 1.0
        onehot = np.zeros((n, ncls), dtype=dtype)
        onehot[np.arange(n), targets] = weights / weights.sum()
        cls_t = T.neg(T.sum_all(T.mul(T.log_softmax_rows(logits), Tensor(onehot))))

        if k > 0:
            gather = np.zeros((k, n), dtype=dtype)
            for row, (q, _) in enumerate(m.pairs):
                gather[row, q] = 1.0
            gt = scene.boxes[[o for _, o in m.pairs]]
            matched = T.matmul(Tensor(gather), boxes)
            l1_t = T.mul(T.sum_all(T.abs_(T.sub(matched, Tensor(gt.astype(dtype))))),
                         1.0 / k)
            giou_t = T.mul(T.sum_all(T.add(T.neg(giou_pairs(matched, gt)), 1.0)),
                           1.0 / k)
        else:
            l1_t = Tensor(np.zeros((), dtype=dtype))
            giou_t = Tensor(np.zeros((), dtype=dtype))

        layer_t = T.add(T.add(T.mul(cls_t, lam[0]), T.mul(l1_t, lam[1])),
                        T.mul(giou_t, lam[2]))
        total_t = layer_t if total_t is None else T.add(total_t, layer_t)

        vals = {"cls": float(cls_t.data), "l1": float(l1_t.data),
                "giou": float(giou_t.data), "total": float(layer_t.data)}
        per_layer.append(vals)
        for key in agg:
            agg[key] += vals[key]

    return LossBreakdown(cls=agg["cls"], l1=agg["l1"], giou=agg["giou"],
                         total=agg["total"], per_layer=per_layer, tensor=total_t,
                         matchings=tuple(used_matchings))


def batch_set_loss(layer_preds, scenes, lam=DEFAULT_LAMBDA,
                   background_weight=DEFAULT_BACKGROUND_WEIGHT):
    """Mean set loss over a batch: layer preds carry a leading batch axis.

    Returns (mean total tensor, per-scene LossBreakdown list).
    """
    pairs = [_as_pair(p) for p in layer_preds]
    breakdowns = []
    for s, scene in enumerate(scenes):
        sliced = [(T.select0(lg, s), T.select0(bx, s)) for lg, bx in pairs]
        breakdowns.append(set_loss(sliced, scene, lam, background_weight))
    total = breakdowns[0].tensor
    for bd in breakdowns[1:]:
        total = T.add(total, bd.tensor)
    return T.mul(total, 1.0 / len(breakdowns)), breakdowns
