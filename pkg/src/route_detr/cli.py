"""Command-line interface: gen-data / train / eval / gradcheck / ablate.

Machine-readable results (JSON, CSV) go to stdout or files; human-readable
progress and summaries go to stderr. Exit codes: 0 success, 1 check failure,
2 usage or I/O error. Every command is deterministic given its flags.

ROUTE_DETR_THREADS caps worker parallelism. The implementation computes
everything single-threaded with a fixed summation order so reruns are
byte-identical; the variable is validated and reserved for parallel workers.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .checkpoint import (CheckpointError, load_checkpoint, read_meta,
                         save_checkpoint)
from .config import (ConfigError, decoder_config, default_config, parse_config,
                     routing_config, scene_spec, train_config)
from .decoder import Model
from .optim import OptimState
from .suite import full_model_check, run_primitive_suite
from .synthdata import SceneSpec, generate, load, save, token_centers
from .trainer import evaluate, train

VARIANTS = (("none", False, False, False),
            ("s_only", True, True, False),
            ("d_only", True, False, True),
            ("s_plus_d", True, True, True))

EVAL_SUBSET = 128  # scenes used for periodic metric records


def _err(msg: str) -> None:
    print(f"route-detr: {msg}", file=sys.stderr)


def _thread_cap() -> int:
    raw = os.environ.get("ROUTE_DETR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ROUTE_DETR_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"ROUTE_DETR_THREADS must be >= 1, got {n}")
    return n


def _load_values(config_path):
    return parse_config(config_path) if config_path else default_config()


def _check_scenes_fit(scenes, values) -> None:
    for i, s in enumerate(scenes):
        if len(s.classes) and int(s.classes.max()) > values["classes"]:
            raise ConfigError(f"scene {i} uses class {int(s.classes.max())} "
                              f"but config classes={values['classes']}")
        if len(s.classes) > values["queries"]:
            raise ConfigError(f"scene {i} has {len(s.classes)} objects but "
                              f"config queries={values['queries']}")


def _build_model(values, seed, routing) -> Model:
    spec = scene_spec(values, seed=seed)
    return Model(decoder_config(values), routing_config(values),
                 spec.token_dim, token_centers(spec), seed=seed,
                 dtype=np.float32, routing=routing)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SceneSpec(classes=args.classes, max_objects=args.max_objects,
                     seed=args.seed)
    scenes = generate(spec, args.count)
    save(scenes, args.out)
    mean_objects = float(np.mean([len(s.classes) for s in scenes])) \
        if scenes else 0.0
    print(json.dumps({"command": "gen-data", "count": len(scenes),
                      "out": str(args.out), "seed": args.seed,
                      "classes": args.classes,
                      "max_objects": args.max_objects,
                      "mean_objects": mean_objects}, sort_keys=True))
    _err(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    values = _load_values(args.config)
    scenes = load(args.data)
    if not scenes:
        raise ConfigError(f"no scenes in {args.data}")
    _check_scenes_fit(scenes, values)
    routing = args.routing == "on"
    use_sup = args.suppressor == "on"
    use_del = args.delegator == "on"
    if not routing and (args.suppressor == "off" or args.delegator == "off"):
        _err("note: --suppressor/--delegator have no effect with --routing off")

    spec = scene_spec(values, seed=args.seed)
    model = _build_model(values, args.seed, routing)
    cfg = train_config(values, seed=args.seed)
    opt = OptimState(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    start_step, history = 0, []
    if args.resume:
        start_step, rng, history = load_checkpoint(args.resume, model, opt)
        _err(f"resumed from {args.resume} at step {start_step}")

    os.makedirs(args.out_dir, exist_ok=True)
    log_path = os.path.join(args.out_dir, "metrics.jsonl")
    ckpt_path = os.path.join(args.out_dir, "checkpoint.ckpt")
    meta = {"config": values, "seed": args.seed,
            "routing": routing, "suppressor": use_sup, "delegator": use_del}

    def progress(rec):
        aux = "" if rec["L_aux"] is None else f" L_aux={rec['L_aux']:.4f}"
        _err(f"step {rec['step']}/{cfg.steps} alpha={rec['alpha']:.3f} "
             f"L_main={rec['L_main']:.4f}{aux} ap={rec['ap']:.3f} "
             f"dup={rec['duplicate_rate']:.3f}")

    with open(log_path, "a" if args.resume else "w", encoding="utf-8") as fh:
        history = train(model, cfg, spec, scenes,
                        eval_scenes=scenes[:EVAL_SUBSET], use_sup=use_sup,
                        use_del=use_del, log_stream=fh, progress=progress,
                        opt=opt, rng=rng, start_step=start_step,
                        history=history)
    save_checkpoint(ckpt_path, model, opt, cfg.steps, rng, history, meta=meta)
    final = history[-1] if history else {}
    print(json.dumps({"command": "train", "out_dir": args.out_dir,
                      "checkpoint": ckpt_path, "log": log_path,
                      "final": final}, sort_keys=True))
    _err(f"finished {cfg.steps} steps; checkpoint at {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    meta = read_meta(args.checkpoint)
    if "config" not in meta:
        raise CheckpointError(f"{args.checkpoint} carries no run configuration")
    values = meta["config"]
    routing = bool(meta.get("routing", True))
    if args.mode == "aux" and not routing:
        raise ConfigError("checkpoint was trained with --routing off; "
                          "aux mode is unavailable")
    model = _build_model(values, int(meta.get("seed", 0)), routing)
    opt = OptimState(model.params)
    load_checkpoint(args.checkpoint, model, opt)
    scenes = load(args.data)
    if not scenes:
        raise ConfigError(f"no scenes in {args.data}")
    _check_scenes_fit(scenes, values)
    spec = scene_spec(values)
    rep = evaluate(model, spec, scenes, mode=args.mode,
                   use_sup=bool(meta.get("suppressor", True)),
                   use_del=bool(meta.get("delegator", True)))
    out = dict(rep.to_dict(), mode=args.mode, scenes=len(scenes),
               checkpoint=str(args.checkpoint))
    print(json.dumps(out, sort_keys=True))
    _err(f"{args.mode} mode on {len(scenes)} scenes: ap={rep.ap:.4f} "
         f"ap50={rep.ap50:.4f} dup={rep.duplicate_rate:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    prim = run_primitive_suite(seed=args.seed)
    model_rep = full_model_check(seed=args.seed)
    passed = model_rep.passed and all(r.passed for _, r in prim)

    for name, rep in prim:
        worst = rep.worst
        status = "ok" if rep.passed else "FAIL"
        _err(f"{status}  primitive/{name}  max_rel_err={worst[1]:.3e}")
    for line in model_rep.lines():
        _err(f"{line}")

    offenders = {f"primitive/{n}": r.worst[1] for n, r in prim if not r.passed}
    offenders.update({k: v for k, v in model_rep.per_param.items()
                      if v >= model_rep.tol})
    print(json.dumps({
        "command": "gradcheck", "passed": passed, "tol": model_rep.tol,
        "primitives": {n: r.worst[1] for n, r in prim},
        "model": model_rep.per_param,
        "worst_offenders": dict(sorted(offenders.items(),
                                       key=lambda kv: -kv[1])[:5]),
    }, sort_keys=True))
    if not passed:
        worst = max(offenders.items(), key=lambda kv: kv[1])
        _err(f"gradcheck FAILED; worst offender {worst[0]} "
             f"rel_err={worst[1]:.3e}")
        return 1
    _err(f"gradcheck passed: {len(prim)} primitives, "
         f"{len(model_rep.per_param)} model parameters")
    return 0


def _mid_duplicate_rate(history, steps):
    """Mean mid-training duplicate rate: aux branch when present, else main,
    over records in the middle half of the run (all records as fallback)."""
    window = [r for r in history if steps * 0.25 <= r["step"] <= steps * 0.75]
    if not window:
        window = history
    key = "aux_duplicate_rate" if "aux_duplicate_rate" in window[0] \
        else "duplicate_rate"
    return float(np.mean([r[key] for r in window]))


def cmd_ablate(args) -> int:
    values = _load_values(args.config)
    if args.data:
        scenes = load(args.data)
        if not scenes:
            raise ConfigError(f"no scenes in {args.data}")
    else:
        scenes = generate(scene_spec(values, seed=args.data_seed), args.count)
    _check_scenes_fit(scenes, values)
    spec = scene_spec(values, seed=args.data_seed)
    cfg0 = train_config(values)

    runs = []
    for seed in range(args.seeds):
        for variant, routing, use_sup, use_del in VARIANTS:
            _err(f"[ablate] variant={variant} seed={seed} "
                 f"({cfg0.steps} steps)...")
            model = _build_model(values, seed, routing)
            cfg = train_config(values, seed=seed)
            history = train(model, cfg, spec, scenes,
                            eval_scenes=scenes[:EVAL_SUBSET],
                            use_sup=use_sup, use_del=use_del)
            final = history[-1]
            runs.append({"variant": variant, "seed": seed,
                         "ap": final["ap"], "ap50": final["ap50"],
                         "duplicate_rate": final["duplicate_rate"],
                         "mid_duplicate_rate": _mid_duplicate_rate(history,
                                                                   cfg.steps)})
            _err(f"[ablate] variant={variant} seed={seed} done: "
                 f"ap={final['ap']:.4f} dup={final['duplicate_rate']:.4f}")

    def stats(variant, key):
        vals = [r[key] for r in runs if r["variant"] == variant]
        return float(np.mean(vals)), float(np.std(vals))

    fields = ["kind", "variant", "seed", "ap", "ap50", "duplicate_rate",
              "mid_duplicate_rate", "ap_mean", "ap_std",
              "duplicate_rate_mean", "duplicate_rate_std",
              "mid_duplicate_rate_mean"]
    sink = open(args.out, "w", newline="", encoding="utf-8") if args.out \
        else sys.stdout
    try:
        w = csv.DictWriter(sink, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in runs:
            w.writerow({"kind": "run", "variant": r["variant"],
                        "seed": r["seed"], "ap": f"{r['ap']:.10g}",
                        "ap50": f"{r['ap50']:.10g}",
                        "duplicate_rate": f"{r['duplicate_rate']:.10g}",
                        "mid_duplicate_rate":
                            f"{r['mid_duplicate_rate']:.10g}"})
        summary = {}
        for variant, *_ in VARIANTS:
            ap_m, ap_s = stats(variant, "ap")
            du_m, du_s = stats(variant, "duplicate_rate")
            mid_m, _ = stats(variant, "mid_duplicate_rate")
            summary[variant] = {"ap": ap_m, "dup": du_m, "mid": mid_m}
            w.writerow({"kind": "summary", "variant": variant,
                        "ap_mean": f"{ap_m:.10g}", "ap_std": f"{ap_s:.10g}",
                        "duplicate_rate_mean": f"{du_m:.10g}",
                        "duplicate_rate_std": f"{du_s:.10g}",
                        "mid_duplicate_rate_mean": f"{mid_m:.10g}"})
    finally:
        if args.out:
            sink.close()

    checks = {
        "baseline <= d_only (ap)": summary["none"]["ap"] <= summary["d_only"]["ap"],
        "baseline < s_only (ap)": summary["none"]["ap"] < summary["s_only"]["ap"],
        "baseline < s_plus_d (ap)": summary["none"]["ap"] < summary["s_plus_d"]["ap"],
        "s_plus_d mid-training aux duplicate rate < baseline":
            summary["s_plus_d"]["mid"] < summary["none"]["mid"],
    }
    for name, ok in checks.items():
        _err(f"[verdict] {'PASS' if ok else 'FAIL'}  {name}")
    if all(checks.values()):
        _err("[verdict] directional ablation PASSED")
        return 0
    _err("[verdict] directional ablation FAILED")
    return 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="route-detr",
        description="Toy detection-transformer with routed self-attention "
                    "biases: data generation, dual-branch training, "
                    "evaluation, gradient checks, and ablations.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a JSON-lines scene dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=512)
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--max-objects", type=int, default=5)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and write metrics + checkpoint")
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--routing", choices=("on", "off"), default="on")
    t.add_argument("--suppressor", choices=("on", "off"), default="on")
    t.add_argument("--delegator", choices=("on", "off"), default="on")
    t.add_argument("--resume", default=None,
                   help="checkpoint to continue from (pair with a config "
                        "whose steps exceed the checkpoint's)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("main", "aux"), default="main")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="run none/S/D/S+D over several seeds")
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--config", default=None)
    a.add_argument("--data", default=None,
                   help="dataset file; generated when omitted")
    a.add_argument("--count", type=int, default=512)
    a.add_argument("--data-seed", type=int, default=0)
    a.add_argument("--out", default=None, help="CSV path (default stdout)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _thread_cap()
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        _err(str(exc))
        return 2
    except OSError as exc:
        _err(str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
