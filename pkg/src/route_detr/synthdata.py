"""Synthetic rectangle scenes: deterministic generation, rendering, JSONL IO.

Scenes contain 1-5 well-separated colored rectangles (pairwise IoU capped)
so that duplicate detections are a model pathology, never a data ambiguity.
Datasets store geometry only; pixels are re-rendered on demand.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass

import numpy as np

from .boxes import cxcywh_to_xyxy, iou_single, pairwise_iou

_BACKGROUND = 0.12
_REJECT_ATTEMPTS = 1000


@dataclass(frozen=True)
class SceneSpec:
    """Generation and rendering parameters for one dataset."""

    image_size: int = 64
    patch: int = 8
    classes: int = 3
    min_objects: int = 1
    max_objects: int = 5
    min_side: float = 0.125
    max_side: float = 0.5
    max_overlap: float = 0.3  # pairwise IoU cap between ground-truth boxes
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ValueError("image_size must be a multiple of patch")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not (0 < self.min_side <= self.max_side <= 1):
            raise ValueError("need 0 < min_side <= max_side <= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def token_dim(self) -> int:
        return 3 * self.patch * self.patch


@dataclass
class Scene:
    """Ground truth: boxes (k, 4) cxcywh in [0,1], classes (k,) ints in 1..c."""

    boxes: np.ndarray
    classes: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if self.boxes.shape[0] != self.classes.shape[0]:
            raise ValueError("boxes and classes disagree on object count")

    @property
    def objects(self):
        return list(zip(self.boxes, self.classes))


def class_color(cls: int, n_classes: int) -> np.ndarray:
    """Distinct saturated RGB per class id (1-based)."""
    hue = (cls - 1) / n_classes
    return np.array(colorsys.hsv_to_rgb(hue, 0.9, 0.9))


def _sample_box(rng, spec: SceneSpec):
    w = rng.uniform(spec.min_side, spec.max_side)
    h = rng.uniform(spec.min_side, spec.max_side)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return np.array([cx, cy, w, h])


def _generate_one(rng, spec: SceneSpec, seed: int) -> Scene:
    k = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    while True:
        boxes = []
        for _ in range(k):
            for _attempt in range(_REJECT_ATTEMPTS):
                cand = _sample_box(rng, spec)
                if all(iou_single(cand, b) <= spec.max_overlap for b in boxes):
                    boxes.append(cand)
                    break
            else:
                break
        if len(boxes) == k:
            break
        k = max(1, k - 1)  # crowding: retry the scene with fewer objects
    classes = rng.integers(1, spec.classes + 1, size=k)
    return Scene(np.stack(boxes), classes, seed=seed)


def generate(spec: SceneSpec, count: int) -> list[Scene]:
    """Deterministic dataset: scene i is a pure function of (spec, i)."""
    scenes = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, i)))
        scenes.append(_generate_one(rng, spec, seed=i))
    return scenes


def render(scene: Scene, spec: SceneSpec) -> np.ndarray:
    """(H, W, 3) float32 image in [0,1]; later boxes paint over earlier."""
    s = spec.image_size
    img = np.full((s, s, 3), _BACKGROUND, dtype=np.float32)
    for box, cls in zip(scene.boxes, scene.classes):
        x0, y0, x1, y1 = cxcywh_to_xyxy(box)
        c0 = int(np.clip(round(x0 * s), 0, s))
        c1 = int(np.clip(round(x1 * s), 0, s))
        r0 = int(np.clip(round(y0 * s), 0, s))
        r1 = int(np.clip(round(y1 * s), 0, s))
        img[r0:r1, c0:c1] = class_color(int(cls), spec.classes)
    return img


def render_tokens(scene: Scene, spec: SceneSpec) -> np.ndarray:
    """Row-major patch extraction: (m, 3 * patch^2) float32 in [0,1]."""
    img = render(scene, spec)
    g, p = spec.grid, spec.patch
    patches = img.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(patches.reshape(g * g, p * p * 3))


def token_centers(spec: SceneSpec) -> np.ndarray:
    """(m, 2) normalized (x, y) patch centers in row-major token order."""
    g = spec.grid
    coords = (np.arange(g) + 0.5) / g
    xx, yy = np.meshgrid(coords, coords)
    return np.stack([xx.reshape(-1), yy.reshape(-1)], axis=-1)


def save(scenes: list[Scene], path) -> None:
    """JSON-lines, one scene per line: {seed, boxes, classes}."""
    with open(path, "w") as fh:
        for s in scenes:
            rec = {"seed": int(s.seed),
                   "boxes": [[float(v) for v in b] for b in s.boxes],
                   "classes": [int(c) for c in s.classes]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load(path) -> list[Scene]:
    """Parse a JSON-lines dataset; malformed lines report their line number."""
    scenes = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                scenes.append(Scene(np.array(rec["boxes"], dtype=np.float64).reshape(-1, 4),
                                    np.array(rec["classes"], dtype=np.int64),
                                    seed=int(rec["seed"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"malformed dataset line {ln}: {e}") from e
    return scenes


def check_scene(scene: Scene, spec: SceneSpec) -> None:
    """Raise if a scene violates the generation invariants."""
    k = scene.boxes.shape[0]
    if not (0 <= k <= spec.max_objects):
        raise ValueError(f"object count {k} outside [0, {spec.max_objects}]")
    if k == 0:
        return
    xyxy = cxcywh_to_xyxy(scene.boxes)
    if np.any(xyxy < -1e-9) or np.any(xyxy > 1 + 1e-9):
        raise ValueError("box outside the unit image")
    if np.any(scene.boxes[:, 2:] < spec.min_side - 1e-9):
        raise ValueError("box side below min_side")
    if not np.all((scene.classes >= 1) & (scene.classes <= spec.classes)):
        raise ValueError("class id outside 1..c")
    iou = pairwise_iou(xyxy, xyxy)
    np.fill_diagonal(iou, 0.0)
    if np.any(iou > spec.max_overlap + 1e-9):
        raise ValueError("ground-truth overlap policy violated")
