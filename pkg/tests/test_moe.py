import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from moefold.errors import ConfigError
from moefold.gradcheck import grad_check
from moefold.moe import (DispatchResult, ExpertFFN, GateConfig, MoELayer, RouterParams,
                         dispatch, expert_capacity, ffn_forward, gate_mixtral, gate_st,
                         keep_top_k, moe_forward, router_logits, top_k_mask)
from moefold.rng import Rng
from moefold.tensor import Tensor, cross_entropy, matmul

logit_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 8)),
                    elements=st.floats(-30, 30))


def _random_layer(rng: Rng, hidden: int, ffn: int, n: int, identical: bool = False) -> MoELayer:
    router = RouterParams(w_g=Tensor(rng.normal((hidden, n), 0.5), requires_grad=True),
                          w_noise=Tensor(rng.normal((hidden, n), 0.1), requires_grad=True))
    mats = [tuple(Tensor(rng.normal(s, 0.3), requires_grad=True)
                  for s in (((hidden, ffn)), (ffn, hidden), (hidden, ffn)))
            for _ in range(1 if identical else n)]
    if identical:
        mats = [tuple(Tensor(m.data.copy(), requires_grad=True) for m in mats[0]) for _ in range(n)]
    experts = [ExpertFFN(w1=m[0], w2=m[1], w3=m[2]) for m in mats]
    return MoELayer(router=router, experts=experts)


# ---------------------------------------------------------------------------
# router logits
# ---------------------------------------------------------------------------

def test_router_logits_noise_off_is_pure_matmul():
    rng = Rng(1, 0)
    x = Tensor(rng.standard_normal((5, 4)))
    sel = np.zeros((4, 3))
    sel[1, 0] = sel[2, 1] = sel[3, 2] = 1.0
    p = RouterParams(w_g=Tensor(sel), w_noise=Tensor(np.zeros((4, 3))))
    h = router_logits(x, p, noise_enabled=False)
    assert np.array_equal(h.data, x.data[:, 1:4])


def test_router_logits_zero_noise_matrix_gives_ln2_scaled_normals():
    rng = Rng(2, 0)
    x = Tensor(rng.standard_normal((7, 4)))
    p = RouterParams(w_g=Tensor(rng.standard_normal((4, 5))),
                     w_noise=Tensor(np.zeros((4, 5))))
    clean = matmul(x, p.w_g).data
    noisy = router_logits(x, p, noise_enabled=True, rng=Rng(3, 0)).data
    z = Rng(3, 0).standard_normal((7, 5))
    assert np.allclose(noisy - clean, z * math.log(2), rtol=1e-13, atol=1e-15)


def test_router_logits_deterministic_for_fixed_seed():
    rng = Rng(4, 0)
    x = Tensor(rng.standard_normal((3, 4)))
    p = RouterParams(w_g=Tensor(rng.standard_normal((4, 2))),
                     w_noise=Tensor(rng.standard_normal((4, 2))))
    a = router_logits(x, p, True, Rng(9, 1)).data
    b = router_logits(x, p, True, Rng(9, 1)).data
    assert a.tobytes() == b.tobytes()


def test_router_noise_requires_rng():
    p = RouterParams(w_g=Tensor(np.zeros((2, 2))), w_noise=Tensor(np.zeros((2, 2))))
    with pytest.raises(ConfigError):
        router_logits(Tensor(np.zeros((1, 2))), p, noise_enabled=True, rng=None)


# ---------------------------------------------------------------------------
# keep_top_k
# ---------------------------------------------------------------------------

def test_keep_top_k_example():
    out = keep_top_k(np.array([1.0, 3.0, 2.0, 0.0]), 2)
    assert out.keep.tolist() == [False, True, True, False]
    assert np.array_equal(out.masked_values(), [-np.inf, 3.0, 2.0, -np.inf])


def test_keep_top_k_k_equals_n_is_identity():
    out = keep_top_k(np.array([4.0, -1.0, 2.0]), 3)
    assert out.keep.all()


def test_keep_top_k_tie_break_lowest_index():
    out = keep_top_k(np.array([5.0, 5.0, 5.0, 5.0]), 2)
    assert out.keep.tolist() == [True, True, False, False]


def test_keep_top_k_out_of_range():
    for k in (0, 5):
        with pytest.raises(ConfigError):
            keep_top_k(np.zeros(4), k)


@given(logit_rows, st.integers(1, 8))
def test_top_k_mask_keeps_exactly_k(h, k):
    n = h.shape[1]
    k = min(k, n)
    mask = top_k_mask(h, k)
    assert np.all(mask.sum(axis=1) == k)
    # every kept value >= every masked value
    kept_min = np.where(mask, h, np.inf).min(axis=1)
    masked_max = np.where(mask, -np.inf, h).max(axis=1)
    assert np.all(kept_min >= masked_max - 1e-12)


# ---------------------------------------------------------------------------
# gates
# ---------------------------------------------------------------------------

def test_gate_mixtral_uniform_row_tie_break():
    g = gate_mixtral(Tensor(np.zeros((1, 4))), 2).data
    assert np.allclose(g, [[0.5, 0.5, 0.0, 0.0]], atol=1e-15)


def test_gate_mixtral_example_row():
    g = gate_mixtral(Tensor(np.array([[1.0, 3.0, 2.0, 0.0]])), 2).data
    e = math.e
    assert g[0, 1] == pytest.approx(e / (e + 1), abs=1e-12)
    assert g[0, 2] == pytest.approx(1 / (e + 1), abs=1e-12)
    assert g[0, 0] == 0.0 and g[0, 3] == 0.0


def test_gate_mixtral_k1_one_hot():
    h = Tensor(np.array([[0.3, -2.0, 1.7], [5.0, 4.0, -1.0]]))
    g = gate_mixtral(h, 1).data
    assert np.array_equal(g, [[0, 0, 1], [1, 0, 0]])


def test_gate_st_uniform_row():
    g = gate_st(Tensor(np.zeros((1, 8))), 2).data
    assert np.allclose(g[0, :2], 0.125, atol=1e-15)
    assert g.sum() == pytest.approx(0.25, abs=1e-12)


def test_gate_st_k_equals_n_is_full_softmax():
    h = np.array([[0.5, -1.0, 2.0]])
    g = gate_st(Tensor(h), 3).data
    assert np.allclose(g.sum(axis=1), 1.0, atol=1e-12)


def test_gate_st_hand_computed_row():
    row = np.array([1.0, 3.0, 2.0, 0.0])
    e = np.exp(row - row.max())
    full = e / e.sum()
    g = gate_st(Tensor(row[None, :]), 2).data[0]
    assert g[0] == 0.0 and g[3] == 0.0
    assert g[1] == pytest.approx(full[1], abs=1e-14)
    assert g[2] == pytest.approx(full[2], abs=1e-14)


@given(logit_rows, st.integers(1, 8))
def test_gate_mixtral_rows_sum_to_one(h, k):
    k = min(k, h.shape[1])
    gm = gate_mixtral(Tensor(h), k).data
    assert np.allclose(gm.sum(axis=1), 1.0, atol=1e-12)
    gs = gate_st(Tensor(h), k).data
    assert np.all(gs.sum(axis=1) <= 1.0 + 1e-12)


# strictness of the st sum needs the dropped probability mass to stay above
# float resolution, hence the tighter logit range here
bounded_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 8)),
                      elements=st.floats(-12, 12))


@given(bounded_rows, st.integers(1, 8))
def test_gate_st_sum_below_one_iff_k_below_n(h, k):
    n = h.shape[1]
    k = min(k, n)
    st_sums = gate_st(Tensor(h), k).data.sum(axis=1)
    if k == n:
        assert np.allclose(st_sums, 1.0, atol=1e-12)
    else:
        assert np.all(st_sums < 1.0)


@given(logit_rows)
def test_top1_argmax_agreement(h):
    gm = gate_mixtral(Tensor(h), 1).data
    gs = gate_st(Tensor(h), 1).data
    assert np.array_equal(gm.argmax(axis=1), gs.argmax(axis=1))


# ---------------------------------------------------------------------------
# capacity and dispatch
# ---------------------------------------------------------------------------

def test_expert_capacity_examples():
    assert expert_capacity(64, 8, 2) == 16
    assert expert_capacity(100, 8, 1) == 13
    assert expert_capacity(64, 8, None) is None


def test_expert_capacity_exact_ratio_no_float_excess():
    # 10 * 0.7 / 7 is 1 exactly in rationals; the float product overshoots
    assert expert_capacity(10, 7, 0.7) == 1


def test_dispatch_dropless_bound():
    gates = gate_mixtral(Tensor(Rng(5, 0).standard_normal((10, 4))), 2).data
    res = dispatch(gates, capacity=None)
    assert res.stats.dropped == 0
    assert res.stats.total_slots == 10 * 2
    assert res.stats.assigned.sum() == 20


def test_dispatch_position_policy_forced_overflow():
    t, cap = 6, 3
    gates = np.zeros((t, 2))
    gates[:, 0] = 0.9  # every token picks expert 0 first
    gates[:, 1] = 0.1
    res = dispatch(gates, capacity=cap, drop_policy="position")
    assert res.kept[:, 0].tolist() == [True] * cap + [False] * (t - cap)


def test_dispatch_score_policy():
    gates = np.zeros((3, 2))
    gates[:, 0] = [0.9, 0.5, 0.7]
    res = dispatch(gates, capacity=2, drop_policy="score")
    assert res.kept[:, 0].tolist() == [True, False, True]


def test_dispatch_score_ties_break_by_position():
    gates = np.zeros((3, 1))
    gates[:, 0] = [0.5, 0.5, 0.5]
    res = dispatch(gates, capacity=2, drop_policy="score")
    assert res.kept[:, 0].tolist() == [True, True, False]


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.floats(0.1, 3.0))
def test_dispatch_capacity_and_accounting_invariants(seed, k, cf):
    rng = Rng(seed, 0)
    t, n = 16, 8
    k = min(k, n)
    gates = gate_mixtral(Tensor(rng.standard_normal((t, n))), k).data
    cap = expert_capacity(t, n, cf)
    res = dispatch(gates, cap)
    assert np.all(res.stats.assigned <= cap)
    assert res.stats.dropped + res.stats.assigned.sum() == t * k
    # monotonicity: a larger capacity factor never drops more
    res2 = dispatch(gates, expert_capacity(t, n, cf * 2))
    assert res2.stats.dropped <= res.stats.dropped


# ---------------------------------------------------------------------------
# moe_forward
# ---------------------------------------------------------------------------

def test_identical_experts_mixtral_dropless_equals_dense_ffn():
    rng = Rng(6, 0)
    layer = _random_layer(rng, hidden=8, ffn=16, n=4, identical=True)
    x = Tensor(rng.standard_normal((10, 8)))
    cfg = GateConfig(n_experts=4, top_k=2)
    out = moe_forward(x, layer, cfg)
    dense = ffn_forward(x, layer.experts[0].w1, layer.experts[0].w2, layer.experts[0].w3).data
    rel = np.max(np.abs(out.output.data - dense) / np.maximum(np.abs(dense), 1e-30))
    assert rel <= 1e-12
    assert out.stats.dropped == 0


def test_identical_experts_st_uniform_logits_quarter_scale():
    rng = Rng(7, 0)
    layer = _random_layer(rng, hidden=8, ffn=16, n=8, identical=True)
    layer.router.w_g.data[:] = 0.0  # uniform logits
    x = Tensor(rng.standard_normal((5, 8)))
    cfg = GateConfig(n_experts=8, top_k=2, router_type="st")
    out = moe_forward(x, layer, cfg)
    dense = ffn_forward(x, layer.experts[0].w1, layer.experts[0].w2, layer.experts[0].w3).data
    assert np.allclose(out.output.data, 0.25 * dense, rtol=1e-12, atol=1e-14)


def test_moe_forward_respects_capacity_and_drops_contribute_zero():
    rng = Rng(8, 0)
    n, t = 4, 12
    layer = _random_layer(rng, hidden=8, ffn=16, n=n)
    x = Tensor(rng.standard_normal((t, 8)))
    cfg = GateConfig(n_experts=n, top_k=2, capacity_factor=0.5)
    out = moe_forward(x, layer, cfg)
    cap = expert_capacity(t, n, 0.5)
    assert np.all(out.stats.assigned <= cap)
    assert out.stats.dropped > 0
    # tokens whose every slot was dropped produce exactly zero output
    kept_any = dispatch(out.gates.data, cap).kept.any(axis=1)
    fully_dropped = ~kept_any
    if fully_dropped.any():
        assert np.all(out.output.data[fully_dropped] == 0.0)


def test_moe_forward_gradients_mixtral_and_st_with_frozen_noise():
    rng = Rng(9, 0)
    n, hidden, ffn, t = 4, 8, 12, 6
    x_data = rng.standard_normal((t, hidden))
    targets = np.arange(t) % 3
    for router_type in ("mixtral", "st"):
        layer = _random_layer(Rng(10, 0), hidden, ffn, n)
        head = Tensor(Rng(11, 0).standard_normal((hidden, 3)), requires_grad=True)
        cfg = GateConfig(n_experts=n, top_k=2, router_type=router_type, noise_enabled=True)
        params = {"wg": layer.router.w_g, "wnoise": layer.router.w_noise, "head": head}
        for e in range(n):
            params[f"e{e}w1"] = layer.experts[e].w1
            params[f"e{e}w2"] = layer.experts[e].w2
            params[f"e{e}w3"] = layer.experts[e].w3

        def f(_):
            out = moe_forward(Tensor(x_data), layer, cfg, rng=Rng(12, 0), training=True)
            return cross_entropy(matmul(out.output, head), targets)

        report = grad_check(f, params, tol=1e-4, samples_per_param=5)
        assert report.passed, f"{router_type}: {report}"


def test_moe_forward_expert_count_mismatch():
    layer = _random_layer(Rng(13, 0), 8, 16, 4)
    cfg = GateConfig(n_experts=8, top_k=2)
    with pytest.raises(ConfigError):
        moe_forward(Tensor(np.zeros((2, 8))), layer, cfg)
