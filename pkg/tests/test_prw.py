import math

import numpy as np
import pytest

from prweave import autodiff as ad
from prweave.autodiff import Tensor
from prweave.prw import (
    ExpertPool, LatentTriple, LowRankExpert, ModelConfig, PRWBlock, PRWModel, Projections,
    RouterParams, RoutingDecision, adapt_kv, compute_router_logits, select_expert,
    source_self_attention, stem_attention,
)


def _decision(probs):
    logits = Tensor(np.log(np.asarray(probs, dtype=float)))
    return RoutingDecision(logits=logits, noise_draw=np.zeros(logits.shape))


def _naive_attention(q, k, v, heads):
    """Explicit-loop multi-head attention over numpy arrays (B, L, d)."""
    b, lq, d = q.shape
    lk = k.shape[1]
    dh = d // heads
    out = np.zeros((b, lq, d))
    for bi in range(b):
        for h in range(heads):
            lo = h * dh
            for i in range(lq):
                s = [sum(q[bi, i, lo + c] * k[bi, j, lo + c] for c in range(dh)) / math.sqrt(dh)
                     for j in range(lk)]
                m = max(s)
                w = [math.exp(x - m) for x in s]
                z = sum(w)
                for j in range(lk):
                    for c in range(dh):
                        out[bi, i, lo + c] += w[j] / z * v[bi, j, lo + c]
    return out


# --- router -------------------------------------------------------------


def test_router_zero_projection_gives_zero_logits():
    r = RouterParams(4, 3)
    h = Tensor(np.random.default_rng(0).normal(size=(1, 5, 4)))
    d = compute_router_logits(h, r, None, noise_enabled=False)
    np.testing.assert_array_equal(d.logits.data, np.zeros((1, 5, 3)))
    np.testing.assert_array_equal(d.noise_draw, 0.0)


def test_router_hand_product():
    r = RouterParams(2, 2)
    r.w_r = Tensor([[1.0, 2.0], [3.0, 4.0]])
    d = compute_router_logits(Tensor([[[1.0, 0.0]]]), r, None, noise_enabled=False)
    np.testing.assert_array_equal(d.logits.data, [[[1.0, 2.0]]])
    np.testing.assert_array_equal(d.logits.data[0], np.array([[1.0, 0.0]]) @ r.w_r.data)


def test_router_noise_scale_is_ln2_monte_carlo():
    r = RouterParams(3, 2)
    h = Tensor(np.ones((1, 100_000, 3)))
    d = compute_router_logits(h, r, np.random.default_rng(11), noise_enabled=True)
    std = d.logits.data.reshape(-1, 2).std(axis=0)
    np.testing.assert_allclose(std, math.log(2.0), rtol=0.02)
    np.testing.assert_array_equal(d.logits.data, d.noise_draw * math.log(2.0))


def test_router_dimension_mismatch():
    with pytest.raises(ad.ShapeError):
        compute_router_logits(Tensor(np.ones((1, 2, 5))), RouterParams(4, 2), None, False)


# --- selection ----------------------------------------------------------


def test_select_argmax():
    d = select_expert(_decision([[[0.2, 0.5, 0.3]]]))
    assert d.selected[0, 0] == 1
    assert d.gate_value.data[0, 0, 0] == pytest.approx(0.5)


def test_select_single_expert():
    d = select_expert(RoutingDecision(Tensor(np.array([[[0.7]]])), np.zeros((1, 1, 1))))
    assert d.selected[0, 0] == 0
    assert d.gate_value.data[0, 0, 0] == 1.0


def test_select_tie_breaks_low():
    d = select_expert(_decision([[[0.5, 0.5]]]))
    assert d.selected[0, 0] == 0


def test_gate_probs_normalised_and_gate_in_unit_interval():
    rng = np.random.default_rng(5)
    r = RouterParams(8, 4)
    r.w_r = Tensor(rng.normal(size=(8, 4)))
    r.w_n = Tensor(rng.normal(size=(8, 4)))
    d = select_expert(compute_router_logits(Tensor(rng.normal(size=(3, 7, 8))), r, rng, True))
    np.testing.assert_allclose(d.gate_probs.data.sum(-1), 1.0, atol=1e-12)
    assert ((d.gate_value.data > 0) & (d.gate_value.data <= 1)).all()
    np.testing.assert_array_equal(d.selected, d.gate_probs.data.argmax(-1))


# --- adapt_kv -----------------------------------------------------------


def _pool(d, n, rank=2, seed=0):
    rng = np.random.default_rng(seed)
    return ExpertPool([LowRankExpert(d, rank, 2 * rank, rng) for _ in range(n)])


def test_zero_init_experts_leave_base_projection():
    rng = np.random.default_rng(1)
    h = Tensor(rng.normal(size=(2, 4, 6)))
    wk, wv = Tensor(rng.normal(size=(6, 6))), Tensor(rng.normal(size=(6, 6)))
    pool = _pool(6, 3)
    d = select_expert(_decision(rng.dirichlet(np.ones(3), size=(2, 4))))
    k, v = adapt_kv(h, pool, d, wk, wv)
    np.testing.assert_array_equal(k.data, h.data @ wk.data)
    np.testing.assert_array_equal(v.data, h.data @ wv.data)


def test_rank_one_hand_residual():
    e = LowRankExpert(2, 1, 2, np.random.default_rng(0))
    e.a_k = Tensor([[1.0], [0.0]])
    e.b_k = Tensor([[0.0, 1.0]])
    pool = ExpertPool([e])
    d = select_expert(RoutingDecision(Tensor(np.zeros((1, 1, 1))), np.zeros((1, 1, 1))))
    d.gate_value = Tensor([[[0.5]]])
    zero = Tensor(np.zeros((2, 2)))
    k, v = adapt_kv(Tensor([[[1.0, 0.0]]]), pool, d, zero, zero)
    # dense oracle: 0.5 * scale * (h @ a) @ b
    dense = 0.5 * e.scale * (np.array([[1.0, 0.0]]) @ e.a_k.data @ e.b_k.data)
    np.testing.assert_array_equal(k.data[0], dense)
    assert k.data[0, 0, 1] == 0.5 * 2.0
    np.testing.assert_array_equal(v.data, 0.0)


def test_tokens_use_only_their_own_expert():
    rng = np.random.default_rng(2)
    pool = _pool(4, 2)
    for e in pool.experts:
        e.b_k = Tensor(rng.normal(size=e.b_k.shape))
        e.b_v = Tensor(rng.normal(size=e.b_v.shape))
    h = Tensor(rng.normal(size=(1, 2, 4)))
    wk, wv = Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4)))
    d = select_expert(_decision([[[0.9, 0.1], [0.2, 0.8]]]))
    k1, v1 = adapt_kv(h, pool, d, wk, wv)
    pool.experts[1].b_k = Tensor(np.zeros_like(pool.experts[1].b_k.data))
    pool.experts[1].b_v = Tensor(np.zeros_like(pool.experts[1].b_v.data))
    k2, v2 = adapt_kv(h, pool, d, wk, wv)
    np.testing.assert_array_equal(k1.data[0, 0], k2.data[0, 0])
    assert not np.array_equal(k1.data[0, 1], k2.data[0, 1])
    np.testing.assert_array_equal(k2.data[0, 1], (h.data @ wk.data)[0, 1])


def test_adapt_kv_index_out_of_range():
    d = RoutingDecision(Tensor(np.zeros((1, 1, 3))), np.zeros((1, 1, 3)))
    d = select_expert(d)
    d.selected = np.array([[2]])
    with pytest.raises(IndexError):
        adapt_kv(Tensor(np.ones((1, 1, 4))), _pool(4, 2), d, Tensor(np.eye(4)), Tensor(np.eye(4)))


# --- attention steps ----------------------------------------------------


def test_source_attention_single_token():
    rng = np.random.default_rng(4)
    h = Tensor(rng.normal(size=(1, 1, 4)))
    k_hat, v_hat = Tensor(rng.normal(size=(1, 1, 4))), Tensor(rng.normal(size=(1, 1, 4)))
    out = source_self_attention(h, k_hat, v_hat, Tensor(rng.normal(size=(1, 1, 4))), Tensor(np.eye(4)), 1)
    np.testing.assert_allclose(out.data, h.data + v_hat.data, atol=1e-15)


def test_source_attention_matches_loop_oracle():
    rng = np.random.default_rng(8)
    h, q, k, v = (rng.normal(size=(1, 4, 6)) for _ in range(4))
    wo = rng.normal(size=(6, 6))
    out = source_self_attention(Tensor(h), Tensor(k), Tensor(v), Tensor(q), Tensor(wo), 2)
    np.testing.assert_allclose(out.data, h + _naive_attention(q, k, v, 2) @ wo, atol=1e-12)


def _proj(rng, d):
    return Projections(*(Tensor(rng.normal(size=(d, d)) / np.sqrt(d)) for _ in range(4)))


def test_stem_attention_reduces_to_self_attention_without_y_h():
    rng = np.random.default_rng(9)
    d = 4
    shared, text = _proj(rng, d), _proj(rng, d)
    x = rng.normal(size=(1, 3, d))
    xo, yo = stem_attention(Tensor(x), Tensor(np.zeros((1, 0, d))), Tensor(np.zeros((1, 0, d))),
                            shared, text, 2)
    q, k, v = x @ shared.q.data, x @ shared.k.data, x @ shared.v.data
    np.testing.assert_allclose(xo.data, x + _naive_attention(q, k, v, 2) @ shared.o.data, atol=1e-12)
    assert yo.shape == (1, 0, d)


def test_stem_attention_matches_three_stream_oracle():
    rng = np.random.default_rng(10)
    d = 6
    shared, text = _proj(rng, d), _proj(rng, d)
    x, y, h = rng.normal(size=(2, 3, d)), rng.normal(size=(2, 2, d)), rng.normal(size=(2, 4, d))
    xo, yo = stem_attention(Tensor(x), Tensor(y), Tensor(h), shared, text, 3)
    S, T = shared, text
    q = np.concatenate([x @ S.q.data, y @ T.q.data], axis=1)
    k = np.concatenate([x @ S.k.data, y @ T.k.data, h @ S.k.data], axis=1)
    v = np.concatenate([x @ S.v.data, y @ T.v.data, h @ S.v.data], axis=1)
    o = _naive_attention(q, k, v, 3)
    np.testing.assert_allclose(xo.data, x + o[:, :3] @ S.o.data, atol=1e-12)
    np.testing.assert_allclose(yo.data, y + o[:, 3:] @ T.o.data, atol=1e-12)


# --- block ----------------------------------------------------------------


def _block(d=8, heads=2, n_experts=3, seed=0):
    rng = np.random.default_rng(seed)
    blk = PRWBlock(d, heads, rng)
    for _ in range(n_experts):
        blk.add_expert(2, 4, rng)
    blk.router.w_r = Tensor(rng.normal(size=blk.router.w_r.shape), requires_grad=True)
    blk.router.w_n = Tensor(rng.normal(size=blk.router.w_n.shape) * 0.3, requires_grad=True)
    return blk


def _triple(rng, d=8, b=2, lx=3, ly=2, lh=4):
    return LatentTriple(*(Tensor(rng.normal(size=(b, n, d))) for n in (lx, ly, lh)))


def test_identity_configuration():
    blk = _block()
    for proj in (blk.shared, blk.text):
        proj.o = Tensor(np.zeros_like(proj.o.data))
    tri = _triple(np.random.default_rng(1))
    out, _ = blk.forward(tri, np.random.default_rng(2), training=True)
    for a, b in ((out.x, tri.x), (out.y, tri.y), (out.h, tri.h)):
        np.testing.assert_array_equal(a.data, b.data)


def test_zero_experts_bit_equal_to_prw_free_block():
    blk = _block()
    for seed in range(20):
        tri = _triple(np.random.default_rng(seed))
        with_prw, _ = blk.forward(tri, np.random.default_rng(seed), training=True)
        without, _ = blk.forward(tri, None, training=False, use_prw=False)
        for a, b in ((with_prw.x, without.x), (with_prw.y, without.y), (with_prw.h, without.h)):
            np.testing.assert_array_equal(a.data, b.data)


def test_inference_is_deterministic():
    blk = _block()
    for e in blk.pool.experts:
        e.b_k = Tensor(np.random.default_rng(3).normal(size=e.b_k.shape))
    tri = _triple(np.random.default_rng(4))
    o1, d1 = blk.forward(tri, np.random.default_rng(0), training=False)
    o2, d2 = blk.forward(tri, np.random.default_rng(99), training=False)
    np.testing.assert_array_equal(o1.x.data, o2.x.data)
    np.testing.assert_array_equal(d1.selected, d2.selected)
    np.testing.assert_array_equal(d1.noise_draw, 0.0)


def test_weight_sharing_same_object():
    blk = _block()
    tri = _triple(np.random.default_rng(5))
    _, d = blk.forward(tri, None, training=False)
    # the key projection applied to x and to h is one tensor
    k = blk.shared.k
    base_x = tri.x.data @ k.data
    base_h = tri.h.data @ k.data
    k.data = k.data + 1.0
    np.testing.assert_allclose(tri.x.data @ k.data - base_x, tri.x.data.sum(-1, keepdims=True) * np.ones(8))
    np.testing.assert_allclose(tri.h.data @ k.data - base_h, tri.h.data.sum(-1, keepdims=True) * np.ones(8))
    names = blk.parameters()
    assert "shared.k" in names and not any(n.startswith("source") for n in names)


def _trained_block(seed=0):
    blk = _block(seed=seed)
    rng = np.random.default_rng(seed + 100)
    for e in blk.pool.experts:
        e.b_k = Tensor(rng.normal(size=e.b_k.shape) * 0.5, requires_grad=True)
        e.b_v = Tensor(rng.normal(size=e.b_v.shape) * 0.5, requires_grad=True)
    blk.pool.freeze_veterans()
    return blk


def test_block_gradients_match_finite_differences_with_fixed_routing():
    blk = _trained_block()
    tri = _triple(np.random.default_rng(6))
    target = np.random.default_rng(7).normal(size=tri.x.shape)
    _, dec = blk.forward(tri, np.random.default_rng(1), training=True)
    forced = dec.selected.copy()
    # make sure the trainable (last) expert is used by some tokens
    forced[0, :2] = 2

    def loss():
        out, _ = blk.forward(tri, np.random.default_rng(1), training=True, forced=forced)
        return ad.mse(out.x, target)

    params = blk.parameters()
    ad.zero_grads(params.values())
    ad.backward(loss())
    groups = ["router.w_r", "router.w_n", "experts.2.a_k", "experts.2.b_k", "experts.2.a_v",
              "experts.2.b_v", "shared.q", "shared.k", "shared.v", "shared.o", "text.q"]
    for name in groups:
        p = params[name]
        fd = ad.finite_difference_gradient(lambda: loss().item(), p, 1e-5)
        assert ad.relative_error(p.grad, fd) < 1e-4, name


def test_frozen_expert_gradient_is_zero():
    blk = _trained_block()
    tri = _triple(np.random.default_rng(6))
    _, dec = blk.forward(tri, np.random.default_rng(1), training=True)
    forced = np.zeros_like(dec.selected)  # every token routed to frozen expert 0
    out, _ = blk.forward(tri, np.random.default_rng(1), training=True, forced=forced)
    ad.zero_grads(blk.parameters().values())
    ad.backward(ad.mse(out.x, np.zeros(out.x.shape)))
    for name, p in blk.parameters().items():
        if name.startswith("experts.0") or name.startswith("experts.1"):
            assert p.grad is None and not p.requires_grad
    g = blk.pool.experts[2].b_k.grad
    np.testing.assert_array_equal(np.zeros_like(blk.pool.experts[2].b_k.data) if g is None else g, 0.0)


def test_ablating_unselected_expert_changes_nothing():
    blk = _trained_block()
    tri = _triple(np.random.default_rng(12))
    ref, dec = blk.forward(tri, None, training=False)
    used = set(np.unique(dec.selected).tolist())
    for k in range(3):
        if k in used:
            continue
        e = blk.pool.experts[k]
        saved = e.b_k, e.b_v
        e.b_k = Tensor(np.zeros_like(e.b_k.data))
        e.b_v = Tensor(np.zeros_like(e.b_v.data))
        out, _ = blk.forward(tri, None, training=False)
        np.testing.assert_array_equal(out.x.data, ref.x.data)
        e.b_k, e.b_v = saved


def test_model_forward_shapes_and_length_check():
    cfg = ModelConfig(d_model=8, n_blocks=2, n_heads=2, len_x=4, len_y=3, len_h=4,
                      x_features=5, y_features=6, h_features=7)
    m = PRWModel(cfg)
    m.add_expert(2, 4, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x, y, h = rng.normal(size=(2, 4, 5)), rng.normal(size=(2, 3, 6)), rng.normal(size=(2, 4, 7))
    pred, decisions = m.forward(x, y, h, np.array([0.3, 0.7]), rng)
    assert pred.shape == (2, 4, 5)
    assert len(decisions) == 2
    with pytest.raises(ad.ShapeError):
        m.forward(x[:, :3], y, h, np.array([0.3, 0.7]), rng)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(n_blocks=0)
    with pytest.raises(ValueError):
        LowRankExpert(4, 5, 10, np.random.default_rng(0))
