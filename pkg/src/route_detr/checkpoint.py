"""Self-contained, byte-deterministic checkpoints.

A checkpoint is one file: a JSON manifest line (sorted keys, fixed
separators) followed by the raw little-endian concatenation of every array.
Entries are sorted by name, so identical state always serializes to
identical bytes — save -> load -> save round-trips exactly.
"""

from __future__ import annotations

import json

import numpy as np

from .decoder import Model
from .optim import OptimState

FORMAT_TAG = "route-detr-checkpoint-v1"


class CheckpointError(ValueError):
    pass


def _entries(model: Model, opt: OptimState):
    named = {}
    for k, p in model.params.items():
        named[f"param/{k}"] = p.data
        named[f"adam_m/{k}"] = opt.m[k]
        named[f"adam_v/{k}"] = opt.v[k]
    return dict(sorted(named.items()))


def save_checkpoint(path, model: Model, opt: OptimState, step: int,
                    rng: np.random.Generator, history: list,
                    meta: dict | None = None) -> None:
    """Serialize parameters, optimizer moments, loop position, rng state and
    metric history into a single deterministic file. meta is an arbitrary
    JSON-serializable dict (the CLI stores the resolved run configuration so
    evaluation can rebuild the model without the original config file)."""
    arrays = _entries(model, opt)
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"),
                                                copy=False).tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype),
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format": FORMAT_TAG,
        "step": int(step),
        "opt": {"step_count": opt.step_count, "lr": opt.lr,
                "weight_decay": opt.weight_decay, "beta1": opt.beta1,
                "beta2": opt.beta2, "eps": opt.eps},
        "rng": rng.bit_generator.state,
        "history": history,
        "meta": meta or {},
        "entries": entries,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def read_meta(path) -> dict:
    """Read only the manifest meta block (no arrays, no model needed)."""
    with open(path, "rb") as fh:
        header = fh.readline()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc
    if manifest.get("format") != FORMAT_TAG:
        raise CheckpointError(f"unrecognized checkpoint format "
                              f"{manifest.get('format')!r}")
    return manifest.get("meta", {})


def load_checkpoint(path, model: Model, opt: OptimState):
    """Restore model/opt in place; returns (step, rng, history).

    Every entry is validated against the live model before anything is
    mutated; mismatches and truncated blobs raise CheckpointError naming the
    offending entry.
    """
    with open(path, "rb") as fh:
        header = fh.readline()
        blob = fh.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc
    if manifest.get("format") != FORMAT_TAG:
        raise CheckpointError(f"unrecognized checkpoint format "
                              f"{manifest.get('format')!r}")

    want = _entries(model, opt)
    got_names = [e["name"] for e in manifest["entries"]]
    if got_names != list(want):
        missing = sorted(set(want) - set(got_names))
        extra = sorted(set(got_names) - set(want))
        raise CheckpointError(f"checkpoint entries do not match the model: "
                              f"missing={missing}, unexpected={extra}")

    decoded = {}
    for e in manifest["entries"]:
        arr = want[e["name"]]
        if list(arr.shape) != e["shape"] or str(arr.dtype) != e["dtype"]:
            raise CheckpointError(
                f"entry '{e['name']}': stored {e['shape']}/{e['dtype']} vs "
                f"model {list(arr.shape)}/{arr.dtype}")
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"entry '{e['name']}': blob truncated "
                                  f"(needs bytes up to {end}, have {len(blob)})")
        flat = np.frombuffer(blob[e["offset"]:end],
                             dtype=np.dtype(e["dtype"]).newbyteorder("<"))
        if flat.size != int(np.prod(e["shape"], dtype=np.int64)):
            raise CheckpointError(f"entry '{e['name']}': byte count does not "
                                  f"match shape {e['shape']}")
        decoded[e["name"]] = flat.reshape(e["shape"]).astype(e["dtype"])

    for k, p in model.params.items():
        p.data = decoded[f"param/{k}"].copy()
        opt.m[k] = decoded[f"adam_m/{k}"].copy()
        opt.v[k] = decoded[f"adam_v/{k}"].copy()
    o = manifest["opt"]
    opt.step_count = int(o["step_count"])
    opt.lr = float(o["lr"])
    opt.weight_decay = float(o["weight_decay"])
    opt.beta1, opt.beta2, opt.eps = (float(o["beta1"]), float(o["beta2"]),
                                     float(o["eps"]))
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng"]
    return int(manifest["step"]), rng, list(manifest["history"])
