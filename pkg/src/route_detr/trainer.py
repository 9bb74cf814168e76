"""Dual-branch training: main branch plus cosine-warmed auxiliary routed branch.

Each step runs the decoder twice on shared weights — once without the routed
bias (the inference path) and once with it — and minimizes
total = L_main + alpha_t * L_aux. Routing parameters receive gradients only
through the auxiliary term, so alpha_t = 0 reduces exactly to single-branch
training of the shared weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import Model
from .losses import DEFAULT_BACKGROUND_WEIGHT, batch_set_loss
from .matching import DEFAULT_LAMBDA
from .metrics import (MetricsReport, compute_metrics, extract_detections,
                      query_cluster_stats)
from .optim import OptimState, adamw_step
from .synthdata import Scene, SceneSpec, render_tokens
from .tensor import Graph, backward, no_grad


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    warmup_frac: float = 0.5
    alpha_min: float = 0.0
    alpha_max: float = 1.0
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    lr_drop_frac: float = 0.9
    eval_interval: int = 200
    lam: tuple = DEFAULT_LAMBDA
    background_weight: float = DEFAULT_BACKGROUND_WEIGHT

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (0.0 < self.warmup_frac <= 1.0):
            raise ValueError("warmup_frac must be in (0, 1]")
        if not (0.0 <= self.alpha_min <= self.alpha_max):
            raise ValueError("need 0 <= alpha_min <= alpha_max")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 < self.lr_drop_frac <= 1.0):
            raise ValueError("lr_drop_frac must be in (0, 1]")


@dataclass
class StepResult:
    alpha: float
    total: float
    main: dict
    aux: dict | None
    skipped: bool = False
    message: str = ""


def alpha_schedule(t: int, cfg: TrainConfig) -> float:
    """Cosine warm-up from alpha_min to alpha_max over warmup_frac * steps."""
    if t < 0:
        raise ValueError("step must be non-negative")
    t_w = cfg.warmup_frac * cfg.steps
    frac = min(t / t_w, 1.0)
    return cfg.alpha_min + (cfg.alpha_max - cfg.alpha_min) \
        * (1.0 - math.cos(math.pi * frac)) / 2.0


def _mean_breakdown(breakdowns):
    return {key: float(np.mean([getattr(b, key) for b in breakdowns]))
            for key in ("cls", "l1", "giou", "total")}


def current_lr(step: int, cfg: TrainConfig) -> float:
    """Step-dependent learning rate: one 0.1 drop at lr_drop_frac of steps."""
    drop_at = int(cfg.lr_drop_frac * cfg.steps)
    return cfg.lr * (0.1 if step >= drop_at else 1.0)


def train_step(model: Model, opt: OptimState, cfg: TrainConfig, step: int,
               tokens: np.ndarray, scenes, use_sup=True, use_del=True,
               routing_layers=None) -> StepResult:
    """One optimizer step on a batch; non-finite loss or gradients leave the
    parameters and optimizer state untouched and report a skipped step."""
    alpha = alpha_schedule(step, cfg)
    opt.lr = current_lr(step, cfg)
    model.zero_grad()
    try:
        with Graph():
            mem = model.encode_memory(tokens)
            main_preds, _ = model.decode(mem, mode="main")
            main_t, main_bds = batch_set_loss(main_preds, scenes, cfg.lam,
                                              cfg.background_weight)
            aux_stats = None
            if model.routing:
                aux_preds, _ = model.decode(mem, mode="aux", use_sup=use_sup,
                                            use_del=use_del,
                                            routing_layers=routing_layers)
                aux_t, aux_bds = batch_set_loss(aux_preds, scenes, cfg.lam,
                                                cfg.background_weight)
                total_t = T.add(main_t, T.mul(aux_t, alpha))
                aux_stats = _mean_breakdown(aux_bds)
            else:
                total_t = main_t
            total = float(total_t.data)
            if not np.isfinite(total):
                return StepResult(alpha=alpha, total=total,
                                  main=_mean_breakdown(main_bds), aux=aux_stats,
                                  skipped=True, message="non-finite loss")
            backward(total_t)
    except ValueError as exc:
        # the tensor layer rejects NaN/Inf leaves mid-graph before they can
        # reach the loss; treat that the same as a non-finite loss
        return StepResult(alpha=alpha, total=float("nan"), main={}, aux=None,
                          skipped=True, message=f"non-finite value: {exc}")

    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for k, p in model.params.items()}
    try:
        adamw_step(model.params, grads, opt)
    except ValueError as exc:
        return StepResult(alpha=alpha, total=total,
                          main=_mean_breakdown(main_bds), aux=aux_stats,
                          skipped=True, message=str(exc))
    return StepResult(alpha=alpha, total=total,
                      main=_mean_breakdown(main_bds), aux=aux_stats)


def evaluate(model: Model, spec: SceneSpec, scenes, mode="main",
             batch_size=32, use_sup=True, use_del=True) -> MetricsReport:
    """Deterministic metrics over last-layer predictions on a dataset."""
    dets = []
    per_layer_queries = None
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        toks = np.stack([render_tokens(s, spec) for s in chunk])
        with no_grad():
            preds, layer_qs = model.forward(toks, mode=mode, use_sup=use_sup,
                                            use_del=use_del)
        last = preds[-1]
        dets.extend(extract_detections(last.class_logits.data, last.boxes.data,
                                       scene_offset=start))
        if per_layer_queries is None:
            per_layer_queries = [[] for _ in layer_qs]
        for li, q in enumerate(layer_qs):
            per_layer_queries[li].append(np.asarray(q.data, dtype=np.float64))
    layers = [np.concatenate(qs, axis=0) for qs in per_layer_queries or []]
    return compute_metrics(dets, scenes, layers)


def train(model: Model, cfg: TrainConfig, spec: SceneSpec, scenes,
          eval_scenes=None, use_sup=True, use_del=True, routing_layers=None,
          log_stream=None, progress=None, opt=None, rng=None, start_step=0,
          history=None, stop_step=None) -> list:
    """Full training loop; returns (and optionally streams) the metric history.

    One JSON record is appended per eval_interval (and at the final step):
    {step, alpha, L_main, L_aux, ap, duplicate_rate, mean_query_cos, ...} with
    aux-branch metrics included whenever the model carries routing parameters.

    opt/rng/start_step/history default to a fresh run; a resumed run passes
    the restored values and continues the identical trajectory. stop_step
    interrupts the loop early without altering the schedule (which always
    derives from cfg.steps).
    """
    if not scenes:
        raise ValueError("training requires at least one scene")
    if opt is None:
        opt = OptimState(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    tokens_all = np.stack([render_tokens(s, spec) for s in scenes])
    if eval_scenes is None:
        eval_scenes = scenes
    history = [] if history is None else history
    end_step = cfg.steps if stop_step is None else min(stop_step, cfg.steps)

    for step in range(start_step, end_step):
        idx = rng.integers(0, len(scenes), cfg.batch_size)
        res = train_step(model, opt, cfg, step, tokens_all[idx],
                         [scenes[i] for i in idx], use_sup=use_sup,
                         use_del=use_del, routing_layers=routing_layers)
        last = step == cfg.steps - 1
        due = cfg.eval_interval > 0 and (step + 1) % cfg.eval_interval == 0
        if not (due or last):
            continue
        rep = evaluate(model, spec, eval_scenes, mode="main")
        record = {"step": step + 1, "alpha": res.alpha,
                  "L_main": res.main["total"],
                  "L_aux": res.aux["total"] if res.aux else None,
                  "ap": rep.ap, "ap50": rep.ap50,
                  "duplicate_rate": rep.duplicate_rate,
                  "mean_query_cos": rep.mean_query_cos,
                  "skipped": res.skipped}
        if model.routing:
            aux_rep = evaluate(model, spec, eval_scenes, mode="aux",
                               use_sup=use_sup, use_del=use_del)
            record["aux_ap"] = aux_rep.ap
            record["aux_duplicate_rate"] = aux_rep.duplicate_rate
        history.append(record)
        if log_stream is not None:
            log_stream.write(json.dumps(record, sort_keys=True) + "\n")
            log_stream.flush()
        if progress is not None:
            progress(record)
    return history
