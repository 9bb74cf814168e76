"""Adaptive pairwise query routing for decoder self-attention.

Pipeline per layer: route embeddings Z from content + position, two low-rank
pairwise deltas (suppressor and delegator), a bilinear gate over detached
query descriptors choosing between them per pair, softplus magnitudes of
opposing sign, and the combined additive bias B with a zeroed diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

PARAM_NAMES = ("w_phi", "b_phi", "w_u_sup", "w_v_sup", "w_u_del", "w_v_del",
               "w_a", "w_b", "gamma_sup", "gamma_del")


@dataclass(frozen=True)
class RoutingConfig:
    d_z: int = 16          # route-embedding width
    r: int = 16            # delta rank
    r_g: int = 32          # gate rank
    descriptor_eps: float = 1e-7  # stabilizer inside the log-area descriptor

    def __post_init__(self):
        if min(self.d_z, self.r, self.r_g) < 1:
            raise ValueError("d_z, r, r_g must all be >= 1")


@dataclass
class RoutedBias:
    """Intermediate products of one bias computation, for inspection."""

    z: Tensor            # (..., n, d_z)
    delta_sup: Tensor    # (..., n, n)
    delta_del: Tensor    # (..., n, n)
    p_sup: Tensor        # (..., n, n) in (0, 1)
    gamma_sup: Tensor    # (1,) strictly negative
    gamma_del: Tensor    # (1,) strictly positive
    bias: Tensor         # (..., n, n), zero diagonal


def init_routing_params(rng: np.random.Generator, d: int, d_pos: int,
                        cfg: RoutingConfig, dtype=np.float32) -> dict:
    """Fresh per-layer parameter set; gate starts near the zero-bias regime."""
    def uni(fan_in, shape):
        s = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-s, s, shape).astype(dtype), requires_grad=True)

    return {
        "w_phi": uni(d + d_pos, (d + d_pos, cfg.d_z)),
        "b_phi": Tensor(np.zeros(cfg.d_z, dtype=dtype), requires_grad=True),
        "w_u_sup": uni(cfg.d_z, (cfg.d_z, cfg.r)),
        "w_v_sup": uni(cfg.d_z, (cfg.d_z, cfg.r)),
        "w_u_del": uni(cfg.d_z, (cfg.d_z, cfg.r)),
        "w_v_del": uni(cfg.d_z, (cfg.d_z, cfg.r)),
        "w_a": uni(3, (3, cfg.r_g)),
        "w_b": uni(3, (3, cfg.r_g)),
        "gamma_sup": Tensor(np.full(1, -2.0, dtype=dtype), requires_grad=True),
        "gamma_del": Tensor(np.full(1, -2.0, dtype=dtype), requires_grad=True),
    }


def route_embed(queries: Tensor, pos, params: dict) -> Tensor:
    """Z = affine(concat(queries, pos)): (..., n, d) x (..., n, d_pos) -> (..., n, d_z)."""
    pos_t = pos if isinstance(pos, Tensor) else Tensor(np.asarray(pos, queries.data.dtype))
    joint = T.concat_last(queries, pos_t)
    if joint.data.shape[-1] != params["w_phi"].data.shape[0]:
        raise DimensionError(
            f"route_embed: got width {joint.data.shape[-1]}, "
            f"params expect {params['w_phi'].data.shape[0]}")
    return T.add(T.matmul(joint, params["w_phi"]), params["b_phi"])


def low_rank_delta(z: Tensor, which: str, params: dict) -> Tensor:
    """Delta = (Z W_U)(Z W_V)^T, numerical rank <= r."""
    u = T.matmul(z, params[f"w_u_{which}"])
    v = T.matmul(z, params[f"w_v_{which}"])
    return T.matmul(u, T.swap_last2(v))


def compute_descriptors(queries: np.ndarray, class_logits: np.ndarray,
                        boxes: np.ndarray, cfg: RoutingConfig) -> np.ndarray:
    """Detached per-query routing signals x_i = [s_i, c_i, g_i], (..., n, 3).

    s: mean cosine similarity to the other queries (zero-norm rows contribute
    0); c: max foreground softmax probability; g: log box area, stabilized.
    Computed in plain numpy so no gradient can ever flow through it.
    """
    q = np.asarray(queries, dtype=np.float64)
    n = q.shape[-2]
    norm = np.sqrt((q * q).sum(axis=-1, keepdims=True))
    qn = np.where(norm > 1e-12, q / np.maximum(norm, 1e-12), 0.0)
    sim = np.einsum("...ik,...jk->...ij", qn, qn, optimize=False)
    diag = np.diagonal(sim, axis1=-2, axis2=-1)
    s = (sim.sum(axis=-1) - diag) / max(n - 1, 1)

    logits = np.asarray(class_logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    c = probs[..., :-1].max(axis=-1)

    b = np.asarray(boxes, dtype=np.float64)
    g = np.log(b[..., 2] * b[..., 3] + cfg.descriptor_eps)
    return np.stack([s, c, g], axis=-1)


def pairwise_gate(x, params: dict) -> Tensor:
    """P_sup[i, j] = sigmoid((x_i W_a) . (x_j W_b)); complement is the delegator gate."""
    x_t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    a = T.matmul(x_t, params["w_a"])
    b = T.matmul(x_t, params["w_b"])
    return T.sigmoid(T.matmul(a, T.swap_last2(b)))


def magnitudes(params: dict):
    """(gamma_sup, gamma_del) = (-softplus, +softplus): strictly opposing signs."""
    return (T.neg(T.softplus(params["gamma_sup"])),
            T.softplus(params["gamma_del"]))


def routed_bias(queries: Tensor, pos, class_logits, boxes, params: dict,
                cfg: RoutingConfig, use_sup: bool = True, use_del: bool = True,
                descriptors: np.ndarray | None = None) -> RoutedBias:
    """Full pipeline to the combined bias B, diagonal zeroed.

    `descriptors` overrides the detached descriptor computation (callers that
    freeze detached inputs, e.g. for finite-difference checks, pass it in).
    """
    dtype = queries.data.dtype
    z = route_embed(queries, pos, params)
    d_sup = low_rank_delta(z, "sup", params)
    d_del = low_rank_delta(z, "del", params)
    if descriptors is None:
        descriptors = compute_descriptors(queries.data, class_logits, boxes, cfg)
    p_sup = pairwise_gate(Tensor(descriptors.astype(dtype)), params)
    g_sup, g_del = magnitudes(params)

    terms = []
    if use_sup:
        terms.append(T.mul(p_sup, T.mul(d_sup, g_sup)))
    if use_del:
        terms.append(T.mul(T.add(T.neg(p_sup), 1.0), T.mul(d_del, g_del)))
    if terms:
        bias = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
        n = bias.data.shape[-1]
        off_diag = (1.0 - np.eye(n)).astype(dtype)
        bias = T.mul(bias, Tensor(off_diag))
    else:
        n = queries.data.shape[-2]
        bias = Tensor(np.zeros(queries.data.shape[:-1] + (n,), dtype=dtype))
    return RoutedBias(z=z, delta_sup=d_sup, delta_del=d_del, p_sup=p_sup,
                      gamma_sup=g_sup, gamma_del=g_del, bias=bias)
