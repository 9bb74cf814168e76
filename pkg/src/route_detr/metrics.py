"""Detection-quality metrics: toy AP, duplicate rate, query clustering.

AP is per-class, all-point interpolated over pooled confidence-ranked
detections (highest first), each ground-truth object matchable once; the
headline value is the mean over classes that actually occur in the ground
truth. duplicate_rate quantifies near-identical confident detections, which
AP deliberately forgives once one of them is matched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import cxcywh_to_xyxy, pairwise_iou

COCO_THRESHOLDS = tuple(float(t) for t in np.arange(0.5, 0.96, 0.05).round(2))
DUP_CONF_THRESH = 0.3
DUP_IOU_THRESH = 0.7


@dataclass(frozen=True)
class Detection:
    """One predicted box: scene index, cxcywh box, 1-based class, confidence."""

    scene: int
    box: tuple
    cls: int
    confidence: float
    query: int = 0


@dataclass
class MetricsReport:
    ap: float
    ap50: float
    ap75: float
    per_class: dict
    duplicate_rate: float
    mean_query_cos: list
    gt_present: bool

    def to_dict(self):
        return {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
                "per_class": {str(k): v for k, v in self.per_class.items()},
                "duplicate_rate": self.duplicate_rate,
                "mean_query_cos": self.mean_query_cos,
                "gt_present": self.gt_present}


def _softmax_np(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def extract_detections(class_logits: np.ndarray, boxes: np.ndarray,
                       scene_offset: int = 0) -> list:
    """(bs, n, c+1) logits + (bs, n, 4) boxes -> every query as a Detection.

    Class = argmax over foreground columns (1-based label), confidence = that
    column's softmax probability. Background probability only lowers the
    confidence; every query still emits a ranked detection. scene_offset
    shifts the scene indices when evaluating in chunks.
    """
    probs = _softmax_np(np.asarray(class_logits, dtype=np.float64))
    fg = probs[..., :-1]
    labels = np.argmax(fg, axis=-1)
    conf = np.take_along_axis(fg, labels[..., None], axis=-1)[..., 0]
    dets = []
    for s in range(probs.shape[0]):
        for q in range(probs.shape[1]):
            dets.append(Detection(scene=s + scene_offset,
                                  box=tuple(float(v) for v in boxes[s, q]),
                                  cls=int(labels[s, q]) + 1,
                                  confidence=float(conf[s, q]), query=q))
    return dets


def _class_ap(dets, scenes, cls, iou_thresh):
    """All-point interpolated AP for one class; None when the class has no GT."""
    gt_boxes = {}
    npos = 0
    for s, scene in enumerate(scenes):
        idx = np.nonzero(scene.classes == cls)[0]
        gt_boxes[s] = cxcywh_to_xyxy(scene.boxes[idx])
        npos += len(idx)
    if npos == 0:
        return None

    ranked = sorted((d for d in dets if d.cls == cls),
                    key=lambda d: (-d.confidence, d.scene, d.query))
    matched = {s: np.zeros(len(b), dtype=bool) for s, b in gt_boxes.items()}
    tp = np.zeros(len(ranked))
    for i, det in enumerate(ranked):
        gts = gt_boxes.get(det.scene)
        if gts is None or len(gts) == 0:
            continue
        ious = pairwise_iou(cxcywh_to_xyxy(np.asarray(det.box)[None]), gts)[0]
        ious = np.where(matched[det.scene], -1.0, ious)
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh:
            matched[det.scene][best] = True
            tp[i] = 1.0

    cum_tp = np.cumsum(tp)
    recall = cum_tp / npos
    precision = cum_tp / np.arange(1, len(ranked) + 1)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def average_precision(dets, scenes, iou_thresh) -> float:
    """Mean over ground-truth-present classes of per-class AP; 0 if no GT at all."""
    classes = sorted({int(c) for scene in scenes for c in scene.classes})
    if not classes:
        return 0.0
    vals = [_class_ap(dets, scenes, c, iou_thresh) for c in classes]
    return float(np.mean([v for v in vals if v is not None]))


def duplicate_rate(dets, conf_thresh=DUP_CONF_THRESH, iou_thresh=DUP_IOU_THRESH) -> float:
    """Fraction of confident detections with a confident same-class, same-scene
    partner at IoU > iou_thresh; 0 when no detection clears conf_thresh."""
    confident = [d for d in dets if d.confidence > conf_thresh]
    if not confident:
        return 0.0
    by_scene = {}
    for d in confident:
        by_scene.setdefault(d.scene, []).append(d)
    dup = 0
    for ds in by_scene.values():
        boxes = cxcywh_to_xyxy(np.asarray([d.box for d in ds]))
        cls = np.asarray([d.cls for d in ds])
        iou = pairwise_iou(boxes, boxes)
        same = (cls[:, None] == cls[None, :]) & (iou > iou_thresh)
        np.fill_diagonal(same, False)
        dup += int(np.count_nonzero(same.any(axis=1)))
    return dup / len(confident)


def query_cluster_stats(layer_queries) -> list:
    """Per layer: mean cosine similarity over all i != j query pairs.

    Accepts (n, d) or (bs, n, d) arrays per layer; batched input averages the
    per-sample statistic. Zero-norm rows contribute 0; n = 1 yields 0.
    """
    out = []
    for q in layer_queries:
        arr = np.asarray(q, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        bs, n, _ = arr.shape
        if n < 2:
            out.append(0.0)
            continue
        norms = np.sqrt(np.einsum("bij,bij->bi", arr, arr, optimize=False))
        unit = arr / np.where(norms > 1e-12, norms, 1.0)[..., None]
        sim = np.einsum("bik,bjk->bij", unit, unit, optimize=False)
        offdiag = sim.sum(axis=(1, 2)) - np.einsum("bii->b", sim)
        out.append(float(np.mean(offdiag / (n * (n - 1)))))
    return out


def compute_metrics(dets, scenes, layer_queries=None) -> MetricsReport:
    """Full report: COCO-style mean AP, AP50/75, per-class AP, duplicates."""
    gt_present = any(len(scene.classes) > 0 for scene in scenes)
    classes = sorted({int(c) for scene in scenes for c in scene.classes})
    per_thresh = {t: average_precision(dets, scenes, t) for t in COCO_THRESHOLDS}
    per_class = {}
    for c in classes:
        vals = [_class_ap(dets, scenes, c, t) for t in COCO_THRESHOLDS]
        per_class[c] = float(np.mean([v for v in vals if v is not None]))
    return MetricsReport(
        ap=float(np.mean(list(per_thresh.values()))) if gt_present else 0.0,
        ap50=per_thresh[0.5], ap75=per_thresh[0.75],
        per_class=per_class,
        duplicate_rate=duplicate_rate(dets),
        mean_query_cos=query_cluster_stats(layer_queries or []),
        gt_present=gt_present)
