"""The gradient-integrity suite run by `route-detr gradcheck` and the
acceptance tests: finite-difference checks for every differentiable primitive
plus the end-to-end dual-branch loss on a small model.

Inputs are drawn away from the non-smooth points of relu/abs/max/min so the
central difference measures the derivative, not a kink.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, Model
from .gradcheck import GradCheckReport, grad_check
from .losses import set_loss
from .routing import RoutingConfig
from .synthdata import Scene
from .tensor import Tensor


def _rand(rng, shape, low=-2.0, high=2.0):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def _pos(rng, shape):
    return Tensor(rng.uniform(0.5, 3.0, shape), requires_grad=True)


def primitive_cases(seed=0):
    """(name, params, loss-builder) for every differentiable primitive op."""
    rng = np.random.default_rng(seed)
    x = _rand(rng, (3, 4))
    y = _rand(rng, (3, 4))
    ygap = Tensor(y.data + np.where(np.abs(y.data - x.data) < 0.2, 0.5, 0.0),
                  requires_grad=True)
    xoff = Tensor(np.where(np.abs(x.data) < 0.2, x.data + 0.5, x.data),
                  requires_grad=True)
    p = _pos(rng, (3, 4))
    a = _rand(rng, (2, 3, 4))
    b = _rand(rng, (2, 4, 5))
    m = _rand(rng, (4, 5))
    gain = _pos(rng, (4,))
    offset = _rand(rng, (4,))
    row = _rand(rng, (1, 4))
    amean = float(np.mean(a.data))

    def case(name, params, f):
        return name, params, f

    return [
        case("add", {"x": x, "y": y}, lambda: T.mean_all(T.add(x, y))),
        case("add_broadcast", {"x": x, "row": row},
             lambda: T.mean_all(T.add(x, row))),
        case("sub", {"x": x, "y": y}, lambda: T.mean_all(T.sub(x, y))),
        case("mul", {"x": x, "y": y}, lambda: T.mean_all(T.mul(x, y))),
        case("scale", {"x": x}, lambda: T.mean_all(T.scale(x, 1.7))),
        case("div", {"x": x, "p": p}, lambda: T.mean_all(T.div(x, p))),
        case("neg", {"x": x}, lambda: T.mean_all(T.neg(x))),
        case("maximum", {"x": x, "ygap": ygap},
             lambda: T.mean_all(T.maximum(x, ygap))),
        case("minimum", {"x": x, "ygap": ygap},
             lambda: T.mean_all(T.minimum(x, ygap))),
        case("relu", {"xoff": xoff}, lambda: T.mean_all(T.relu(xoff))),
        case("abs", {"xoff": xoff}, lambda: T.mean_all(T.abs_(xoff))),
        case("sigmoid", {"x": x}, lambda: T.mean_all(T.sigmoid(x))),
        case("softplus", {"x": x}, lambda: T.mean_all(T.softplus(x))),
        case("sqrt", {"p": p}, lambda: T.mean_all(T.sqrt(p))),
        case("reshape", {"x": x},
             lambda: T.mean_all(T.mul(T.reshape(x, (2, 6)), 1.3))),
        case("permute", {"a": a},
             lambda: T.mean_all(T.mul(T.permute(a, (1, 2, 0)), amean))),
        case("swap_last2", {"a": a},
             lambda: T.mean_all(T.matmul(T.swap_last2(a), a))),
        case("concat_last", {"x": x, "y": y},
             lambda: T.mean_all(T.sigmoid(T.concat_last(x, y)))),
        case("slice_last", {"x": x},
             lambda: T.mean_all(T.mul(T.slice_last(x, 1, 3), 2.0))),
        case("select0", {"a": a}, lambda: T.mean_all(T.select0(a, 1))),
        case("matmul", {"a": a, "b": b}, lambda: T.mean_all(T.matmul(a, b))),
        case("matmul_unbatched", {"x": x, "m": m},
             lambda: T.mean_all(T.matmul(x, m))),
        case("sum_all", {"x": x}, lambda: T.sum_all(T.sigmoid(x))),
        case("mean_all", {"x": x}, lambda: T.mean_all(T.sigmoid(x))),
        case("sum_last", {"x": x},
             lambda: T.mean_all(T.sum_last(T.sigmoid(x)))),
        case("sum_last_keepdims", {"x": x},
             lambda: T.mean_all(T.sum_last(x, keepdims=True))),
        case("mean_last", {"x": x}, lambda: T.mean_all(T.mean_last(x))),
        case("softmax_rows", {"x": x},
             lambda: T.mean_all(T.mul(T.softmax_rows(x), Tensor(y.data)))),
        case("log_softmax_rows", {"x": x},
             lambda: T.mean_all(T.mul(T.log_softmax_rows(x), Tensor(y.data)))),
        case("layer_norm", {"x": x, "gain": gain, "offset": offset},
             lambda: T.mean_all(T.mul(T.layer_norm(x, gain, offset),
                                      Tensor(y.data)))),
    ]


def run_primitive_suite(seed=0, h=1e-5, tol=1e-4):
    """grad_check every primitive case; returns [(name, GradCheckReport)]."""
    return [(name, grad_check(f, params, h=h, tol=tol))
            for name, params, f in primitive_cases(seed)]


def build_check_model(seed=0):
    """Small f64 dual-branch model: n=4 queries, L=2 layers, 2x2 token grid."""
    token_xy = np.array([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])
    cfg = DecoderConfig(layers=2, heads=2, width=8, queries=4, classes=2,
                        ffn_width=8)
    rcfg = RoutingConfig(d_z=3, r=2, r_g=3)
    return Model(cfg, rcfg, token_dim=12, token_xy=token_xy, seed=seed,
                 dtype=np.float64)


def full_model_check(seed=0, h=1e-5, tol=1e-4) -> GradCheckReport:
    """FD-check the dual-branch loss of the small model w.r.t. every parameter.

    Detached intermediates (reference boxes, positional encodings, routing
    descriptors) and the Hungarian matchings are frozen across evaluations so
    the finite differences probe exactly the function the backward pass
    differentiates. Routing magnitudes are lifted from their near-zero init so
    the bias path carries enough signal for the finite differences to resolve.
    """
    model = build_check_model(seed)
    for l in (1, 2):
        model.params[f"layer{l}.routing.gamma_sup"].data[:] = 0.5
        model.params[f"layer{l}.routing.gamma_del"].data[:] = 0.5
        for key in ("w_u_sup", "w_v_sup", "w_u_del", "w_v_del", "w_a", "w_b"):
            model.params[f"layer{l}.routing.{key}"].data *= 3.0
    rng = np.random.default_rng(seed + 1)
    tokens = rng.uniform(0, 1, (1, 4, 12))
    scenes = [Scene(np.array([[0.35, 0.4, 0.3, 0.25], [0.7, 0.65, 0.2, 0.3]]),
                    np.array([1, 2]))]
    cache = {}
    matchings = {}

    def f():
        mem = model.encode_memory(tokens)
        total = None
        for branch in ("main", "aux"):
            preds, _ = model.decode(mem, mode=branch, cache=cache)
            for s, scene in enumerate(scenes):
                sliced = [(T.select0(pr.class_logits, s), T.select0(pr.boxes, s))
                          for pr in preds]
                bd = set_loss(sliced, scene,
                              fixed_matchings=matchings.get((branch, s)))
                matchings.setdefault((branch, s), bd.matchings)
                term = bd.tensor if branch == "main" else T.mul(bd.tensor, 0.5)
                total = term if total is None else T.add(total, term)
        return total

    return grad_check(f, model.params, h=h, tol=tol)
