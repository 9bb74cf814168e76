"""Toy detection-transformer decoder with optional routed self-attention bias.

Main mode runs standard attention and is the inference path; aux mode adds
the per-layer routed bias to every head's self-attention logits. Reference
boxes are carried in logit space, refined per layer by a box head, and
detached between layers; positional encodings and routing descriptors are
always computed from detached values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .routing import (PARAM_NAMES, RoutingConfig, compute_descriptors,
                      init_routing_params, routed_bias)
from .tensor import ContractError, Tensor

LOGIT_CLAMP = 11.5  # |logit| bound when re-detaching references between layers


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 3
    heads: int = 4
    width: int = 64
    queries: int = 20
    classes: int = 3
    ffn_width: int = 128
    encoder_layers: int = 0

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")
        if self.width % 8 != 0:
            raise ValueError("width must be a multiple of 8 for the box sinusoids")
        if not (0 <= self.encoder_layers <= 2):
            raise ValueError("encoder_layers must be 0, 1, or 2")


@dataclass
class Prediction:
    """Per-layer outputs: boxes (..., n, 4) cxcywh in (0,1), class logits (..., n, c+1).

    box_logits is the pre-sigmoid form of boxes; the next layer detaches it
    as its reference, which keeps zero-delta refinement exact.
    """

    class_logits: Tensor
    boxes: Tensor
    box_logits: Tensor


def sinusoid_features(vals: np.ndarray, d_per: int) -> np.ndarray:
    """Interleaved sin/cos features per scalar component: (..., K) -> (..., K*d_per)."""
    i = np.arange(d_per)
    dim_t = 10000.0 ** (2 * (i // 2) / d_per)
    ang = np.asarray(vals, dtype=np.float64)[..., None] * (2 * np.pi) / dim_t
    pe = np.where(i % 2 == 0, np.sin(ang), np.cos(ang))
    return pe.reshape(vals.shape[:-1] + (vals.shape[-1] * d_per,))


def box_pos_encoding(boxes: np.ndarray, d: int) -> np.ndarray:
    """4-component sinusoid over (cx, cy, w, h): (..., 4) -> (..., d)."""
    return sinusoid_features(boxes, d // 4)


def token_pos_encoding(centers: np.ndarray, d: int) -> np.ndarray:
    """2-component sinusoid over token (x, y) centers: (m, 2) -> (m, d)."""
    return sinusoid_features(centers, d // 2)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def inverse_sigmoid_np(x, eps=1e-5):
    x = np.clip(x, eps, 1 - eps)
    return np.log(x / (1 - x))


def _cached(cache, key, fn):
    """Freezeable detached intermediate: reuse across calls when a cache is given."""
    if cache is None:
        return fn()
    if key not in cache:
        cache[key] = fn()
    return cache[key]


class Model:
    """Parameter container plus the forward passes.

    Parameters live in a flat name -> Tensor dict. Transformer weights are
    drawn first so a routing-enabled and a routing-free model share identical
    shared weights at the same seed.
    """

    def __init__(self, cfg: DecoderConfig, rcfg: RoutingConfig | None,
                 token_dim: int, token_xy: np.ndarray, seed: int = 0,
                 dtype=np.float32, routing: bool = True):
        self.cfg = cfg
        self.rcfg = rcfg if rcfg is not None else RoutingConfig()
        self.dtype = np.dtype(dtype)
        self.routing = routing
        self.token_pos = token_pos_encoding(np.asarray(token_xy), cfg.width) \
            .astype(self.dtype)
        self.params: dict[str, Tensor] = {}

        rng = np.random.default_rng(seed)
        d, n = cfg.width, cfg.queries

        def uni(name, fan_in, shape):
            s = 1.0 / np.sqrt(fan_in)
            self.params[name] = Tensor(rng.uniform(-s, s, shape).astype(self.dtype),
                                       requires_grad=True)

        def zeros(name, shape):
            self.params[name] = Tensor(np.zeros(shape, dtype=self.dtype),
                                       requires_grad=True)

        def norm(prefix):
            self.params[f"{prefix}.gain"] = Tensor(np.ones(d, dtype=self.dtype),
                                                   requires_grad=True)
            zeros(f"{prefix}.offset", (d,))

        def attention(prefix):
            for nm in ("q", "k", "v", "o"):
                uni(f"{prefix}.{nm}w", d, (d, d))
                zeros(f"{prefix}.{nm}b", (d,))

        uni("encoder.patch.weight", token_dim, (token_dim, d))
        zeros("encoder.patch.bias", (d,))
        for j in range(1, cfg.encoder_layers + 1):
            attention(f"enc{j}.self")
            norm(f"enc{j}.norm1")
            uni(f"enc{j}.ffn.w1", d, (d, cfg.ffn_width))
            zeros(f"enc{j}.ffn.b1", (cfg.ffn_width,))
            uni(f"enc{j}.ffn.w2", cfg.ffn_width, (cfg.ffn_width, d))
            zeros(f"enc{j}.ffn.b2", (d,))
            norm(f"enc{j}.norm2")

        uni("query.content", d, (n, d))
        init_boxes = np.column_stack([rng.uniform(0.1, 0.9, (n, 2)),
                                      rng.uniform(0.15, 0.4, (n, 2))])
        self.params["query.ref_logits"] = Tensor(
            inverse_sigmoid_np(init_boxes).astype(self.dtype), requires_grad=True)

        for l in range(1, cfg.layers + 1):
            attention(f"layer{l}.self")
            norm(f"layer{l}.norm1")
            attention(f"layer{l}.cross")
            norm(f"layer{l}.norm2")
            uni(f"layer{l}.ffn.w1", d, (d, cfg.ffn_width))
            zeros(f"layer{l}.ffn.b1", (cfg.ffn_width,))
            uni(f"layer{l}.ffn.w2", cfg.ffn_width, (cfg.ffn_width, d))
            zeros(f"layer{l}.ffn.b2", (d,))
            norm(f"layer{l}.norm3")

        uni("head.class.weight", d, (d, cfg.classes + 1))
        zeros("head.class.bias", (cfg.classes + 1,))
        uni("head.box.w1", d, (d, d))
        zeros("head.box.b1", (d,))
        uni("head.box.w2", d, (d, 4))
        zeros("head.box.b2", (4,))

        # routing parameters come last so shared weights match a routing-free
        # model built from the same seed
        if routing:
            for l in range(1, cfg.layers + 1):
                sub = init_routing_params(rng, d, d, self.rcfg, dtype=self.dtype)
                for key, tensor in sub.items():
                    self.params[f"layer{l}.routing.{key}"] = tensor

    # ------------------------------------------------------------------
    # parameter access
    # ------------------------------------------------------------------

    def routing_params(self, layer: int) -> dict:
        if not self.routing:
            raise ContractError("model was built without the routing module")
        return {key: self.params[f"layer{layer}.routing.{key}"] for key in PARAM_NAMES}

    def routing_param_names(self):
        return [k for k in self.params if ".routing." in k]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # ------------------------------------------------------------------
    # building blocks
    # ------------------------------------------------------------------

    def _mha(self, prefix, q_in, q_pos, k_in, k_pos, v_in, bias=None):
        """Multi-head attention; positions add to Q/K inputs, bias to all heads."""
        p = self.params
        q_src = T.add(q_in, Tensor(q_pos)) if q_pos is not None else q_in
        k_src = T.add(k_in, Tensor(k_pos)) if k_pos is not None else k_in
        q = T.add(T.matmul(q_src, p[f"{prefix}.qw"]), p[f"{prefix}.qb"])
        k = T.add(T.matmul(k_src, p[f"{prefix}.kw"]), p[f"{prefix}.kb"])
        v = T.add(T.matmul(v_in, p[f"{prefix}.vw"]), p[f"{prefix}.vb"])

        h = self.cfg.heads
        bs, nq, d = q.data.shape
        nk = k.data.shape[1]
        dh = d // h
        qh = T.permute(T.reshape(q, (bs, nq, h, dh)), (0, 2, 1, 3))
        kh = T.permute(T.reshape(k, (bs, nk, h, dh)), (0, 2, 1, 3))
        vh = T.permute(T.reshape(v, (bs, nk, h, dh)), (0, 2, 1, 3))

        scores = T.mul(T.matmul(qh, T.swap_last2(kh)), 1.0 / math.sqrt(dh))
        if bias is not None:
            if bias.data.shape[-2:] != (nq, nk):
                raise T.DimensionError(
                    f"attention bias shape {bias.data.shape} does not match ({nq}, {nk})")
            scores = T.add(scores, T.reshape(bias, (bs, 1, nq, nk)))
        attn = T.softmax_rows(scores)
        out = T.matmul(attn, vh)
        out = T.reshape(T.permute(out, (0, 2, 1, 3)), (bs, nq, d))
        out = T.add(T.matmul(out, p[f"{prefix}.ow"]), p[f"{prefix}.ob"])
        return out, attn

    def _ffn(self, prefix, x):
        p = self.params
        hidden = T.relu(T.add(T.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return T.add(T.matmul(hidden, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _ln(self, prefix, x):
        return T.layer_norm(x, self.params[f"{prefix}.gain"],
                            self.params[f"{prefix}.offset"])

    # ------------------------------------------------------------------
    # forward passes
    # ------------------------------------------------------------------

    def encode_memory(self, tokens: np.ndarray) -> Tensor:
        """(bs, m, token_dim) raw patches -> (bs, m, width) memory tokens."""
        p = self.params
        t = Tensor(np.asarray(tokens, dtype=self.dtype))
        mem = T.add(T.matmul(t, p["encoder.patch.weight"]), p["encoder.patch.bias"])
        for j in range(1, self.cfg.encoder_layers + 1):
            sa, _ = self._mha(f"enc{j}.self", mem, self.token_pos, mem,
                              self.token_pos, mem)
            mem = self._ln(f"enc{j}.norm1", T.add(mem, sa))
            mem = self._ln(f"enc{j}.norm2", T.add(mem, self._ffn(f"enc{j}.ffn", mem)))
        return mem

    def predict_heads(self, queries: Tensor, base) -> Prediction:
        """Shared heads: class logits, plus box deltas added to logit-space refs."""
        p = self.params
        logits = T.add(T.matmul(queries, p["head.class.weight"]), p["head.class.bias"])
        hidden = T.relu(T.add(T.matmul(queries, p["head.box.w1"]), p["head.box.b1"]))
        delta = T.add(T.matmul(hidden, p["head.box.w2"]), p["head.box.b2"])
        base_t = base if isinstance(base, Tensor) else Tensor(np.asarray(base, self.dtype))
        box_logits = T.add(delta, base_t)
        boxes = T.sigmoid(box_logits)
        return Prediction(class_logits=logits, boxes=boxes, box_logits=box_logits)

    def decode(self, mem: Tensor, mode: str = "main", routing_layers=None,
               use_sup: bool = True, use_del: bool = True, cache=None):
        """Run all decoder layers; returns (per-layer Predictions, per-layer queries).

        mode "aux" adds the routed bias in every layer enabled by
        routing_layers (default: all). `cache` freezes the detached
        intermediates (reference logits, descriptors) across repeated calls.
        """
        if mode not in ("main", "aux"):
            raise ContractError(f"unknown mode {mode!r}")
        if mode == "aux" and not self.routing:
            raise ContractError("aux mode requires a model built with routing")
        cfg = self.cfg
        if routing_layers is None:
            routing_layers = [True] * cfg.layers
        bs = mem.data.shape[0]
        n, d = cfg.queries, cfg.width

        x = T.add(self.params["query.content"],
                  Tensor(np.zeros((bs, n, d), dtype=self.dtype)))
        base_t = self.params["query.ref_logits"]
        base_np = _cached(cache, ("base", mode, 1), lambda: base_t.data.copy())

        preds, layer_queries = [], []
        for l in range(1, cfg.layers + 1):
            ref = np.broadcast_to(_sigmoid_np(base_np.astype(np.float64)), (bs, n, 4))
            pos = box_pos_encoding(ref, d).astype(self.dtype)

            bias = None
            if mode == "aux" and routing_layers[l - 1]:
                rp = self.routing_params(l)
                descriptors = _cached(cache, ("desc", mode, l), lambda: compute_descriptors(
                    x.data,
                    np.einsum("...ik,kj->...ij", x.data,
                              self.params["head.class.weight"].data, optimize=False)
                    + self.params["head.class.bias"].data,
                    ref, self.rcfg))
                rb = routed_bias(x, Tensor(pos), None, None, rp, self.rcfg,
                                 use_sup=use_sup, use_del=use_del,
                                 descriptors=descriptors)
                bias = rb.bias

            sa, _ = self._mha(f"layer{l}.self", x, pos, x, pos, x, bias)
            x = self._ln(f"layer{l}.norm1", T.add(x, sa))
            ca, _ = self._mha(f"layer{l}.cross", x, pos, mem, self.token_pos, mem)
            x = self._ln(f"layer{l}.norm2", T.add(x, ca))
            x = self._ln(f"layer{l}.norm3", T.add(x, self._ffn(f"layer{l}.ffn", x)))

            pred = self.predict_heads(x, base_t)
            preds.append(pred)
            layer_queries.append(x)

            if l < cfg.layers:
                logit_data = pred.box_logits.data
                base_np = _cached(cache, ("base", mode, l + 1), lambda: np.clip(
                    logit_data, -LOGIT_CLAMP, LOGIT_CLAMP))
                base_t = Tensor(base_np)
        return preds, layer_queries

    def forward(self, tokens: np.ndarray, mode: str = "main", **kw):
        """Convenience: encode memory then decode."""
        return self.decode(self.encode_memory(tokens), mode=mode, **kw)

    # ------------------------------------------------------------------
    # weight IO
    # ------------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)}, "
                             f"unexpected={sorted(extra)}")
        for k, p in self.params.items():
            a = np.asarray(arrays[k])
            if a.shape != p.data.shape or a.dtype != p.data.dtype:
                raise ValueError(f"parameter '{k}': stored {a.shape}/{a.dtype} vs "
                                 f"model {p.data.shape}/{p.data.dtype}")
            p.data = a.copy()
