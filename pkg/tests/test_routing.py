"""Routing pipeline: oracles for each stage, algebraic invariants, gradients."""

import numpy as np
import pytest

from route_detr import tensor as T
from route_detr.gradcheck import grad_check
from route_detr.routing import (RoutingConfig, compute_descriptors,
                                init_routing_params, low_rank_delta,
                                magnitudes, pairwise_gate, route_embed,
                                routed_bias)
from route_detr.tensor import Graph, Tensor, backward

CFG = RoutingConfig(d_z=4, r=2, r_g=3)


def make_params(seed=0, d=6, d_pos=6, cfg=CFG):
    rng = np.random.default_rng(seed)
    return init_routing_params(rng, d, d_pos, cfg, dtype=np.float64)


def rand_inputs(seed, n=5, d=6, c=3):
    rng = np.random.default_rng(seed)
    q = Tensor(rng.standard_normal((n, d)), requires_grad=True)
    pos = rng.standard_normal((n, d))
    logits = rng.standard_normal((n, c + 1))
    boxes = np.column_stack([rng.uniform(0.2, 0.8, (n, 2)),
                             rng.uniform(0.05, 0.4, (n, 2))])
    return q, pos, logits, boxes


# ---------------------------------------------------------------------------
# route_embed
# ---------------------------------------------------------------------------

def test_route_embed_zero_map():
    params = make_params()
    params["w_phi"].data[:] = 0.0
    params["b_phi"].data[:] = 0.0
    q, pos, _, _ = rand_inputs(1)
    assert np.array_equal(route_embed(q, pos, params).data, np.zeros((5, CFG.d_z)))


def test_route_embed_row_equivariance():
    params = make_params()
    q, pos, _, _ = rand_inputs(2)
    z = route_embed(q, pos, params).data
    perm = np.array([3, 0, 4, 1, 2])
    z_perm = route_embed(Tensor(q.data[perm]), pos[perm], params).data
    assert np.allclose(z_perm, z[perm], atol=0)


def test_route_embed_affine_oracle():
    cfg = RoutingConfig(d_z=3, r=2, r_g=2)
    params = make_params(d=2, d_pos=2, cfg=cfg)
    q = Tensor(np.array([[1.0, 2.0], [0.5, -1.0]]))
    pos = np.array([[0.1, 0.2], [0.3, 0.4]])
    z = route_embed(q, pos, params).data
    joint = np.concatenate([q.data, pos], axis=-1)
    want = joint @ params["w_phi"].data + params["b_phi"].data
    assert np.max(np.abs(z - want)) < 1e-12


def test_route_embed_width_mismatch():
    params = make_params(d=6, d_pos=6)
    q = Tensor(np.zeros((4, 3)))
    with pytest.raises(Exception):
        route_embed(q, np.zeros((4, 3)), params)


# ---------------------------------------------------------------------------
# low_rank_delta
# ---------------------------------------------------------------------------

def test_delta_zero_embeddings():
    params = make_params()
    z = Tensor(np.zeros((5, CFG.d_z)))
    assert np.array_equal(low_rank_delta(z, "sup", params).data, np.zeros((5, 5)))


def test_delta_rank1_outer_product_oracle():
    cfg = RoutingConfig(d_z=4, r=1, r_g=2)
    params = make_params(cfg=cfg)
    rng = np.random.default_rng(7)
    z = rng.standard_normal((3, 4))
    got = low_rank_delta(Tensor(z), "del", params).data
    u = z @ params["w_u_del"].data  # (3, 1)
    v = z @ params["w_v_del"].data
    assert np.max(np.abs(got - np.outer(u[:, 0], v[:, 0]))) < 1e-12


@pytest.mark.parametrize("which", ["sup", "del"])
def test_delta_rank_law(which):
    cfg = RoutingConfig(d_z=8, r=4, r_g=2)
    params = make_params(d=8, d_pos=8, cfg=cfg)
    rng = np.random.default_rng(9)
    z = Tensor(rng.standard_normal((12, 8)))
    delta = low_rank_delta(z, which, params).data
    s = np.linalg.svd(delta, compute_uv=False)
    assert s[4] / s[0] < 1e-6


# ---------------------------------------------------------------------------
# descriptors
# ---------------------------------------------------------------------------

def test_descriptors_identical_queries():
    q = np.tile(np.array([1.0, 2.0, 3.0]), (4, 1))
    x = compute_descriptors(q, np.zeros((4, 3)), np.full((4, 4), 0.5), CFG)
    assert np.allclose(x[:, 0], 1.0, atol=1e-12)


def test_descriptors_orthogonal_queries():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    x = compute_descriptors(q, np.zeros((2, 3)), np.full((2, 4), 0.5), CFG)
    assert np.allclose(x[:, 0], 0.0, atol=1e-15)


def test_descriptors_zero_norm_row_contributes_zero():
    q = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    x = compute_descriptors(q, np.zeros((3, 3)), np.full((3, 4), 0.5), CFG)
    # rows 0 and 2: pairs are (each other: cos 1) and (zero row: 0) -> mean 0.5
    assert np.allclose(x[:, 0], [0.5, 0.0, 0.5], atol=1e-12)


def test_descriptors_single_query():
    q = np.array([[1.0, 1.0]])
    x = compute_descriptors(q, np.zeros((1, 3)), np.full((1, 4), 0.5), CFG)
    assert x[0, 0] == 0.0


def test_descriptor_confidence_excludes_background():
    logits = np.array([[0.0, 0.0, 0.0, 50.0]])  # all mass on background
    x = compute_descriptors(np.ones((1, 2)), logits, np.full((1, 4), 0.5), CFG)
    assert x[0, 1] < 1e-20
    logits2 = np.array([[50.0, 0.0, 0.0, 0.0]])
    x2 = compute_descriptors(np.ones((1, 2)), logits2, np.full((1, 4), 0.5), CFG)
    assert x2[0, 1] > 1 - 1e-12


def test_descriptor_log_area_unit_box():
    boxes = np.array([[0.5, 0.5, 1.0, 1.0]])
    x = compute_descriptors(np.ones((1, 2)), np.zeros((1, 3)), boxes,
                            RoutingConfig(descriptor_eps=1e-7))
    assert abs(x[0, 2] - np.log(1 + 1e-7)) < 1e-18


# ---------------------------------------------------------------------------
# gate and magnitudes
# ---------------------------------------------------------------------------

def test_gate_zero_weights_half():
    params = make_params()
    params["w_a"].data[:] = 0.0
    x = np.random.default_rng(3).standard_normal((4, 3))
    assert np.array_equal(pairwise_gate(x, params).data, np.full((4, 4), 0.5))


def test_gate_complementarity_exact():
    params = make_params()
    x = np.random.default_rng(4).standard_normal((6, 3))
    p = pairwise_gate(x, params).data
    assert np.array_equal(p + (1.0 - p), np.ones_like(p))
    assert np.all((p > 0) & (p < 1))


def test_gate_asymmetric_in_general():
    params = make_params(seed=5)
    x = np.random.default_rng(5).standard_normal((4, 3)) * 3
    p = pairwise_gate(x, params).data
    assert np.max(np.abs(p - p.T)) > 1e-4


def test_gate_scalar_sigmoid_oracle():
    cfg = RoutingConfig(d_z=2, r=1, r_g=2)
    params = make_params(cfg=cfg)
    x = np.array([[0.3, -0.7, 1.1], [0.9, 0.2, -0.4]])
    p = pairwise_gate(x, params).data
    a = x @ params["w_a"].data
    b = x @ params["w_b"].data
    for i in range(2):
        for j in range(2):
            want = 1.0 / (1.0 + np.exp(-(a[i] @ b[j])))
            assert abs(p[i, j] - want) < 1e-12


def test_magnitudes_at_zero():
    params = make_params()
    params["gamma_sup"].data[:] = 0.0
    params["gamma_del"].data[:] = 0.0
    gs, gd = magnitudes(params)
    ln2 = 0.6931471805599453
    assert abs(gs.data[0] + ln2) < 1e-15
    assert abs(gd.data[0] - ln2) < 1e-15


def test_magnitudes_asymptotic():
    params = make_params()
    params["gamma_sup"].data[:] = -30.0
    params["gamma_del"].data[:] = -30.0
    gs, gd = magnitudes(params)
    assert -1e-13 < gs.data[0] < 0
    assert 0 < gd.data[0] < 1e-13


def test_magnitudes_softplus5_oracle():
    params = make_params()
    params["gamma_del"].data[:] = 5.0
    _, gd = magnitudes(params)
    assert abs(gd.data[0] - 5.006715348489118) < 1e-5


def test_sign_law_1000_random():
    params = make_params()
    rng = np.random.default_rng(6)
    for v in rng.uniform(-50, 50, 1000):
        params["gamma_sup"].data[:] = v
        params["gamma_del"].data[:] = -v
        gs, gd = magnitudes(params)
        assert gs.data[0] < 0 < gd.data[0]


# ---------------------------------------------------------------------------
# routed_bias
# ---------------------------------------------------------------------------

def test_bias_zero_magnitude_limit():
    params = make_params()
    params["gamma_sup"].data[:] = -30.0
    params["gamma_del"].data[:] = -30.0
    q, pos, logits, boxes = rand_inputs(8)
    rb = routed_bias(q, pos, logits, boxes, params, CFG)
    assert np.max(np.abs(rb.bias.data)) < 1e-12


def test_bias_zero_phi_gives_zero():
    params = make_params()
    params["w_phi"].data[:] = 0.0
    params["b_phi"].data[:] = 0.0
    q, pos, logits, boxes = rand_inputs(9)
    rb = routed_bias(q, pos, logits, boxes, params, CFG)
    assert np.array_equal(rb.bias.data, np.zeros((5, 5)))


def test_bias_diagonal_zero():
    params = make_params()
    q, pos, logits, boxes = rand_inputs(10)
    rb = routed_bias(q, pos, logits, boxes, params, CFG)
    assert np.array_equal(np.diag(rb.bias.data), np.zeros(5))


def test_bias_straight_line_oracle():
    cfg = RoutingConfig(d_z=3, r=2, r_g=2)
    params = make_params(seed=11, d=4, d_pos=4, cfg=cfg)
    rng = np.random.default_rng(11)
    n = 3
    q = Tensor(rng.standard_normal((n, 4)))
    pos = rng.standard_normal((n, 4))
    logits = rng.standard_normal((n, 4))
    boxes = np.column_stack([rng.uniform(0.3, 0.7, (n, 2)), rng.uniform(0.1, 0.4, (n, 2))])
    rb = routed_bias(q, pos, logits, boxes, params, cfg)

    # independent straight-line recomputation in plain numpy
    def np_softplus(v):
        return np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))

    z = np.concatenate([q.data, pos], -1) @ params["w_phi"].data + params["b_phi"].data
    dsup = (z @ params["w_u_sup"].data) @ (z @ params["w_v_sup"].data).T
    ddel = (z @ params["w_u_del"].data) @ (z @ params["w_v_del"].data).T
    x = compute_descriptors(q.data, logits, boxes, cfg)
    gate = 1.0 / (1.0 + np.exp(-(x @ params["w_a"].data) @ (x @ params["w_b"].data).T))
    gsup = -np_softplus(params["gamma_sup"].data[0])
    gdel = np_softplus(params["gamma_del"].data[0])
    b = gate * (gsup * dsup) + (1 - gate) * (gdel * ddel)
    np.fill_diagonal(b, 0.0)
    assert np.max(np.abs(rb.bias.data - b)) < 1e-10


def test_bias_asymmetry_constructible():
    params = make_params(seed=12)
    q, pos, logits, boxes = rand_inputs(12)
    q = Tensor(q.data * 3)
    rb = routed_bias(q, pos, logits, boxes, params, CFG)
    assert np.max(np.abs(rb.bias.data - rb.bias.data.T)) > 1e-6


def test_bias_single_route_toggles():
    params = make_params(seed=13)
    q, pos, logits, boxes = rand_inputs(13)
    full = routed_bias(q, pos, logits, boxes, params, CFG).bias.data
    s_only = routed_bias(q, pos, logits, boxes, params, CFG, use_del=False).bias.data
    d_only = routed_bias(q, pos, logits, boxes, params, CFG, use_sup=False).bias.data
    assert np.allclose(s_only + d_only, full, atol=1e-12)
    none = routed_bias(q, pos, logits, boxes, params, CFG,
                       use_sup=False, use_del=False).bias
    assert np.array_equal(none.data, np.zeros((5, 5)))
    assert not none.requires_grad


def test_bias_batched_matches_per_sample():
    params = make_params(seed=14)
    rng = np.random.default_rng(14)
    qs = rng.standard_normal((2, 5, 6))
    pos = rng.standard_normal((2, 5, 6))
    logits = rng.standard_normal((2, 5, 4))
    boxes = np.concatenate([rng.uniform(0.3, 0.7, (2, 5, 2)),
                            rng.uniform(0.1, 0.4, (2, 5, 2))], axis=-1)
    batched = routed_bias(Tensor(qs), pos, logits, boxes, params, CFG).bias.data
    for s in range(2):
        single = routed_bias(Tensor(qs[s]), pos[s], logits[s], boxes[s],
                             params, CFG).bias.data
        assert np.allclose(batched[s], single, atol=1e-12)


def test_gradients_reach_every_routing_parameter():
    params = make_params(seed=15)
    q, pos, logits, boxes = rand_inputs(15)
    with Graph():
        rb = routed_bias(q, pos, logits, boxes, params, CFG)
        loss = T.sum_all(T.mul(rb.bias, rb.bias))
        backward(loss)
    for name, p in params.items():
        assert p.grad is not None, name
        assert np.any(p.grad != 0), name
    assert q.grad is not None and np.any(q.grad != 0)


def test_bias_gradcheck_all_params():
    params = make_params(seed=16)
    q, pos, logits, boxes = rand_inputs(16)
    x_frozen = compute_descriptors(q.data, logits, boxes, CFG)

    def f():
        rb = routed_bias(q, pos, logits, boxes, params, CFG, descriptors=x_frozen)
        return T.sum_all(T.mul(rb.bias, rb.bias))

    rep = grad_check(f, {**params, "queries": q})
    assert rep.passed, dict(rep.per_param)


def test_descriptor_path_carries_no_gradient():
    # perturbing descriptors changes the value but never the recorded graph:
    # gradients flow only through Z and the gate weights, by construction
    params = make_params(seed=17)
    q, pos, logits, boxes = rand_inputs(17)
    with Graph():
        rb = routed_bias(q, pos, logits, boxes, params, CFG)
        backward(T.sum_all(rb.bias))
    g_q_with_desc_path = q.grad.copy()
    q.zero_grad()
    for p in params.values():
        p.zero_grad()
    # same computation with descriptors frozen to the identical values
    x = compute_descriptors(q.data, logits, boxes, CFG)
    with Graph():
        rb2 = routed_bias(q, pos, logits, boxes, params, CFG, descriptors=x)
        backward(T.sum_all(rb2.bias))
    assert np.array_equal(q.grad, g_q_with_desc_path)
