"""Gradient checker: catches correct and corrupted gradients, reports per-param."""

import numpy as np
import pytest

from route_detr import tensor as T
from route_detr.gradcheck import grad_check
from route_detr.tensor import ContractError, Tensor


def test_quadratic_tiny_error():
    w = Tensor(np.array([1.5, -0.3, 0.8]), requires_grad=True)
    rep = grad_check(lambda: T.sum_all(T.mul(w, w)), {"w": w})
    assert rep.passed
    assert rep.per_param["w"] < 1e-8


def test_mlp_passes():
    rng = np.random.default_rng(4)
    params = {
        "w1": Tensor(rng.standard_normal((5, 6)) * 0.3, requires_grad=True),
        "b1": Tensor(np.zeros(6), requires_grad=True),
        "w2": Tensor(rng.standard_normal((6, 2)) * 0.3, requires_grad=True),
    }
    x = Tensor(rng.standard_normal((3, 5)))

    def f():
        h = T.sigmoid(T.add(T.matmul(x, params["w1"]), params["b1"]))
        out = T.softmax_rows(T.matmul(h, params["w2"]))
        return T.mean_all(T.mul(out, out))

    rep = grad_check(f, params)
    assert rep.passed
    assert set(rep.per_param) == {"w1", "b1", "w2"}
    assert all(e < 1e-4 for e in rep.per_param.values())


def test_detects_corrupted_gradient():
    w = Tensor(np.array([0.4, 1.1]), requires_grad=True)

    def f():
        # deliberately wrong backward: treat w as 2*w in the forward only
        out = T.mul(T.mul(w.detach(), w), 1.0)  # grad flows through one factor
        return T.sum_all(out)

    rep = grad_check(f, {"w": w})  # analytic = w, true derivative = 2w
    assert not rep.passed
    name, err = rep.worst
    assert name == "w" and err > 1e-2


def test_rejects_f32_params():
    w = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(ContractError, match="f64"):
        grad_check(lambda: T.sum_all(w), {"w": w})


def test_rejects_nondeterministic_f():
    w = Tensor(np.array([1.0]), requires_grad=True)
    state = {"n": 0.0}

    def f():
        state["n"] += 1.0
        return T.sum_all(T.mul(w, state["n"]))

    with pytest.raises(ContractError, match="deterministic"):
        grad_check(f, {"w": w})


def test_report_lines_format():
    w = Tensor(np.array([2.0]), requires_grad=True)
    rep = grad_check(lambda: T.sum_all(T.mul(w, w)), {"w": w})
    lines = list(rep.lines())
    assert len(lines) == 1
    assert lines[0].startswith("ok") and "max_rel_err=" in lines[0]
