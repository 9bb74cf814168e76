"""One-to-one assignment: detection matching cost and the Hungarian solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import cxcywh_to_xyxy, pairwise_giou
from .synthdata import Scene
from .tensor import ContractError

DEFAULT_LAMBDA = (2.0, 5.0, 2.0)  # (classification, L1, GIoU) cost weights


@dataclass(frozen=True)
class Matching:
    """pairs: (query, object) tuples, one per object; unmatched query ids."""

    pairs: tuple
    unmatched: tuple

    def __post_init__(self):
        qs = [q for q, _ in self.pairs]
        os = [o for _, o in self.pairs]
        if len(set(qs)) != len(qs) or sorted(os) != list(range(len(os))):
            raise ValueError("pairs must cover every object exactly once")


def match_cost(class_probs: np.ndarray, pred_boxes: np.ndarray, scene: Scene,
               lam=DEFAULT_LAMBDA) -> np.ndarray:
    """(n, k) assignment cost: -lam0*p(class) + lam1*L1 + lam2*(-GIoU)."""
    probs = np.asarray(class_probs, dtype=np.float64)
    boxes = np.asarray(pred_boxes, dtype=np.float64)
    k = scene.boxes.shape[0]
    n = boxes.shape[0]
    if k == 0:
        return np.zeros((n, 0))
    cost_cls = -probs[:, scene.classes - 1]  # class j lives in column j-1
    cost_l1 = np.abs(boxes[:, None, :] - scene.boxes[None, :, :]).sum(axis=-1)
    cost_giou = -pairwise_giou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(scene.boxes))
    return lam[0] * cost_cls + lam[1] * cost_l1 + lam[2] * cost_giou


def hungarian(cost: np.ndarray) -> Matching:
    """Minimum-total-cost assignment of all k columns to distinct rows, k <= n.

    Shortest-augmenting-path algorithm with row/column potentials. Scan order
    is fixed and ascending, so ties resolve toward low (query, object) indices
    and the result is deterministic.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be 2-d, got shape {cost.shape}")
    n, k = cost.shape
    if k > n:
        raise ContractError(f"more objects than queries: cost shape {cost.shape}")
    if k == 0:
        return Matching((), tuple(range(n)))

    inf = float("inf")
    u = [0.0] * (k + 1)          # object potentials (1-based)
    v = [0.0] * (n + 1)          # query potentials (1-based)
    owner = [0] * (n + 1)        # owner[q] = object assigned to query q, 0 = none
    way = [0] * (n + 1)
    for obj in range(1, k + 1):
        owner[0] = obj
        q0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[q0] = True
            o0 = owner[q0]
            delta = inf
            q1 = -1
            for q in range(1, n + 1):
                if used[q]:
                    continue
                cur = cost[q - 1, o0 - 1] - u[o0] - v[q]
                if cur < minv[q]:
                    minv[q] = cur
                    way[q] = q0
                if minv[q] < delta:
                    delta = minv[q]
                    q1 = q
            for q in range(n + 1):
                if used[q]:
                    u[owner[q]] += delta
                    v[q] -= delta
                else:
                    minv[q] -= delta
            q0 = q1
            if owner[q0] == 0:
                break
        while q0 != 0:
            q1 = way[q0]
            owner[q0] = owner[q1]
            q0 = q1

    pairs = tuple(sorted((q - 1, owner[q] - 1) for q in range(1, n + 1) if owner[q]))
    matched = {q for q, _ in pairs}
    unmatched = tuple(q for q in range(n) if q not in matched)
    return Matching(pairs, unmatched)
