import numpy as np
import pytest
from hypothesis import given, strategies as st

from moefold.errors import ConfigError, InputError
from moefold.model import ModelConfig, forward_logits, init_dense
from moefold.moe import GateConfig
from moefold.plan import (ParallelPlan, build_groups, comm_volume, count_params,
                          forward_flops, intra_node_report, memory_estimate,
                          pipeline_bubble, validate_plan)
from moefold.rng import Rng
from moefold.tensor import count_macs
from moefold.upcycle import upcycle_full

PAPER_EXAMPLE = ParallelPlan(world=8, node_size=8, tp=2, cp=2, dp=2, pp=1,
                             etp=1, ep=8, edp=1)


# ---------------------------------------------------------------------------
# validation and group building
# ---------------------------------------------------------------------------

def test_validate_folding_example():
    validate_plan(PAPER_EXAMPLE)


def test_validate_product_error_shows_both_sides():
    with pytest.raises(ConfigError, match=r"3\*1\*1\*1 = 3 != world = 8"):
        validate_plan(ParallelPlan(world=8, tp=3, cp=1, dp=1, pp=1, etp=1, ep=8, edp=1))


def test_validate_divisibility_errors():
    plan = ParallelPlan(world=8, tp=1, dp=8, etp=1, ep=8, edp=1)
    model = ModelConfig()
    with pytest.raises(ConfigError, match="n_experts"):
        validate_plan(ParallelPlan(world=3, tp=1, dp=3, etp=1, ep=3, edp=1),
                      model, GateConfig(n_experts=8, top_k=2))
    with pytest.raises(ConfigError, match="heads"):
        validate_plan(ParallelPlan(world=8, tp=8, dp=1, etp=1, ep=8, edp=1),
                      ModelConfig(heads=4, kv_heads=2), None)
    with pytest.raises(ConfigError, match="ffn_hidden"):
        validate_plan(ParallelPlan(world=8, tp=1, dp=8, etp=8, ep=1, edp=1),
                      ModelConfig(ffn_hidden=252), None)


def test_folding_example_groups():
    groups = build_groups(PAPER_EXAMPLE)
    # the EP group is one full 8-rank node; TP and CP groups nest inside it
    assert groups.groups["ep"] == [list(range(8))]
    assert groups.groups["tp"] == [[0, 1], [2, 3], [4, 5], [6, 7]]
    assert groups.groups["cp"] == [[0, 2], [1, 3], [4, 6], [5, 7]]
    intra = intra_node_report(groups)
    assert intra["tp"] and intra["cp"] and intra["ep"]


def test_world_one_all_groups_are_rank_zero():
    groups = build_groups(ParallelPlan(world=1, tp=1, cp=1, dp=1, pp=1, etp=1, ep=1, edp=1))
    for kind, gs in groups.groups.items():
        assert gs == [[0]], kind


def test_ep_spanning_two_nodes_flagged():
    plan = ParallelPlan(world=16, node_size=8, tp=1, cp=1, dp=16, pp=1, etp=1, ep=16, edp=1)
    groups = build_groups(plan)
    assert groups.groups["ep"] == [list(range(16))]
    assert intra_node_report(groups)["ep"] is False


def test_dp_spanning_nodes_flagged():
    plan = ParallelPlan(world=16, node_size=8, tp=8, cp=1, dp=2, pp=1, etp=8, ep=2, edp=1)
    groups = build_groups(plan)
    assert intra_node_report(groups)["dp"] is False
    assert intra_node_report(groups)["tp"] is True


def test_node_size_equal_world_everything_intra():
    plan = ParallelPlan(world=16, node_size=16, tp=2, cp=2, dp=2, pp=2, etp=2, ep=2, edp=2)
    assert all(intra_node_report(build_groups(plan)).values())


def _random_plan(rng) -> ParallelPlan:
    def pick_divisor(n):
        divisors = [d for d in range(1, n + 1) if n % d == 0]
        return divisors[int(rng.integers(0, len(divisors)))]

    def split(n, parts):
        out = []
        for _ in range(parts - 1):
            d = pick_divisor(n)
            out.append(d)
            n //= d
        out.append(n)
        return out

    world = int(2 ** rng.integers(0, 7))
    pp = pick_divisor(world)
    rem = world // pp
    tp, cp, dp = split(rem, 3)
    etp, ep, edp = split(rem, 3)
    return ParallelPlan(world=world, node_size=8, tp=tp, cp=cp, dp=dp, pp=pp,
                        etp=etp, ep=ep, edp=edp)


@given(st.integers(0, 2**32 - 1))
def test_group_partition_property_random_plans(seed):
    plan = _random_plan(Rng(seed, 0))
    validate_plan(plan)
    groups = build_groups(plan)
    for kind, gs in groups.groups.items():
        ranks = sorted(r for g in gs for r in g)
        assert ranks == list(range(plan.world)), f"{kind} does not partition the world"
    # determinism
    again = build_groups(plan)
    assert again.groups == groups.groups


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------

def test_count_params_matches_enumeration_toy_default(toy_dense, gate8):
    counts = count_params(toy_dense.config, gate8)
    moe = upcycle_full(toy_dense, gate8.n_experts, gate8.top_k, router_seed=1)
    enumerated = sum(t.data.size for t in moe.tensors.values())
    assert counts.total == enumerated
    active_enum = sum(t.data.size for n, t in moe.tensors.items() if ".experts." not in n)
    active_enum += sum(t.data.size for n, t in moe.tensors.items()
                       if ".experts." in n and int(n.split(".experts.")[1][:3]) < gate8.top_k)
    assert counts.active == active_enum


def test_count_params_dense_equals_degenerate_moe():
    cfg = ModelConfig()
    dense = count_params(cfg)
    degenerate = count_params(cfg, GateConfig(n_experts=1, top_k=1))
    # one expert + its router: total exceeds dense by exactly the router mass
    assert degenerate.total == dense.total + cfg.layers * 2 * cfg.hidden
    assert degenerate.total == degenerate.active


def test_count_params_llama3_8b_dims():
    llama = ModelConfig(vocab=128256, hidden=4096, layers=32, heads=32, kv_heads=8,
                        ffn_hidden=14336, seq_len=8192)
    counts = count_params(llama)
    assert abs(counts.total - 8.0e9) / 8.0e9 <= 0.01


# ---------------------------------------------------------------------------
# flops
# ---------------------------------------------------------------------------

def test_forward_flops_base_case_no_attention_term():
    cfg = ModelConfig(vocab=16, hidden=8, layers=1, heads=2, kv_heads=2, ffn_hidden=16, seq_len=8)
    counts = count_params(cfg)
    assert forward_flops(cfg, None, 1, "2P", include_attention_quadratic=False) == 2 * counts.matmul_active


def test_forward_flops_tokens_must_be_positive():
    with pytest.raises(InputError):
        forward_flops(ModelConfig(), None, 0)


def test_forward_flops_matches_instrumented_counter_dense(toy_dense):
    tokens = Rng(80, 0).integers(0, toy_dense.config.vocab, 128)
    with count_macs() as c:
        forward_logits(toy_dense, tokens)
    formula = forward_flops(toy_dense.config, None, 128, "2P", True)
    assert abs(formula - 2 * c.macs) / (2 * c.macs) <= 0.05


def test_forward_flops_matches_instrumented_counter_moe(toy_dense, gate8):
    moe = upcycle_full(toy_dense, gate8.n_experts, gate8.top_k, router_seed=2)
    tokens = Rng(81, 0).integers(0, toy_dense.config.vocab, 128)
    with count_macs() as c:
        forward_logits(moe, tokens)
    formula = forward_flops(toy_dense.config, gate8, 128, "2P", True)
    assert abs(formula - 2 * c.macs) / (2 * c.macs) <= 0.05


def test_flops_ratio_llama_e8t2():
    llama = ModelConfig(vocab=128256, hidden=4096, layers=32, heads=32, kv_heads=8,
                        ffn_hidden=14336, seq_len=8192)
    gate = GateConfig(n_experts=8, top_k=2)
    ratio = forward_flops(llama, gate, 8192) / forward_flops(llama, None, 8192)
    assert abs(ratio - 1.6) <= 0.15


def test_six_p_convention_is_three_times_two_p():
    cfg = ModelConfig()
    assert forward_flops(cfg, None, 64, "6P") == 3 * forward_flops(cfg, None, 64, "2P")


# ---------------------------------------------------------------------------
# communication
# ---------------------------------------------------------------------------

def test_comm_volume_ep1_no_dispatch(gate8):
    plan = ParallelPlan(world=4, tp=2, cp=1, dp=2, pp=1, etp=2, ep=1, edp=2)
    report = comm_volume(plan, ModelConfig(), gate8, tokens_per_rank=1024)
    assert report.moe_dispatch_combine == 0.0


def test_comm_alltoall_vs_allgather_ratio(gate8):
    cfg = ModelConfig()
    base = dict(world=8, tp=1, cp=1, dp=8, pp=1, etp=1, ep=8, edp=1)
    a2a = comm_volume(ParallelPlan(dispatcher="alltoall", **base), cfg, gate8, 1024)
    ag = comm_volume(ParallelPlan(dispatcher="allgather", **base), cfg, gate8, 1024)
    # k=2, ep=8: alltoall moves k/ep of the allgather volume
    assert a2a.moe_dispatch_combine / ag.moe_dispatch_combine == pytest.approx(0.25, abs=1e-12)
    assert a2a.moe_dispatch_combine < ag.moe_dispatch_combine


def test_comm_cp_kv_scales_with_gqa_ratio():
    plan = ParallelPlan(world=4, tp=1, cp=4, dp=1, pp=1, etp=1, ep=4, edp=1)
    full = comm_volume(plan, ModelConfig(heads=4, kv_heads=4), None, 512)
    quarter = comm_volume(plan, ModelConfig(heads=4, kv_heads=1), None, 512)
    assert full.cp_kv_exchange == pytest.approx(4 * quarter.cp_kv_exchange, rel=1e-12)


def test_comm_attention_tp_allreduce_formula():
    plan = ParallelPlan(world=2, tp=2, cp=1, dp=1, pp=1, etp=1, ep=2, edp=1)
    report = comm_volume(plan, ModelConfig(hidden=64), None, tokens_per_rank=100, bytes_per_value=2)
    assert report.attn_tp_allreduce == pytest.approx(2 * 2 * 100 * 64 * 2 * 0.5, rel=1e-12)


# ---------------------------------------------------------------------------
# bubble and memory
# ---------------------------------------------------------------------------

def test_pipeline_bubble_values():
    assert pipeline_bubble(1, 1, 8) == 0.0
    assert pipeline_bubble(4, 1, 4) == 3 / 7
    assert pipeline_bubble(4, 8, 4) == 3 / 35
    assert pipeline_bubble(4, 8, 4) < pipeline_bubble(4, 1, 4)


@given(st.integers(2, 16), st.integers(1, 8), st.integers(1, 16))
def test_pipeline_bubble_monotone_in_vp_and_mb(pp, vp, mb):
    b = pipeline_bubble(pp, vp, mb)
    assert pipeline_bubble(pp, vp + 1, mb) < b
    assert pipeline_bubble(pp, vp, mb + 1) < b


def test_pipeline_bubble_input_validation():
    with pytest.raises(InputError):
        pipeline_bubble(0, 1, 1)


def test_memory_world_one_closed_form(gate8):
    plan = ParallelPlan(world=1, tp=1, cp=1, dp=1, pp=1, etp=1, ep=1, edp=1)
    cfg = ModelConfig()
    counts = count_params(cfg, gate8)
    mem = memory_estimate(plan, cfg, gate8, bytes_per_param=2, optimizer_multiplier=12)
    assert mem.total_bytes == pytest.approx((2 + 12) * 2 * counts.total, rel=1e-12)


def test_memory_doubling_dp_halves_only_optimizer_term(gate8):
    cfg = ModelConfig()
    p1 = ParallelPlan(world=8, tp=2, cp=1, dp=4, pp=1, etp=2, ep=4, edp=1)
    p2 = ParallelPlan(world=16, tp=2, cp=1, dp=8, pp=1, etp=2, ep=4, edp=2)
    m1 = memory_estimate(p1, cfg, gate8)
    # shared params: dp doubles 4 -> 8; expert params: edp doubles 1 -> 2
    m2 = memory_estimate(p2, cfg, gate8)
    assert m2.weights_bytes == m1.weights_bytes
    assert m2.grads_bytes == m1.grads_bytes
    assert m2.optimizer_bytes == pytest.approx(m1.optimizer_bytes / 2, rel=1e-12)


def test_memory_expert_bytes_partitioned_by_etp_ep_pp(gate8):
    cfg = ModelConfig()
    plan = ParallelPlan(world=8, tp=2, cp=1, dp=2, pp=2, etp=2, ep=2, edp=1)
    counts = count_params(cfg, gate8)
    mem = memory_estimate(plan, cfg, gate8, bytes_per_param=2)
    expert_weight_bytes = 2 * counts.expert / (2 * 2 * 2)
    shared_weight_bytes = 2 * counts.non_expert / (2 * 2)
    assert mem.weights_bytes == pytest.approx(expert_weight_bytes + shared_weight_bytes, rel=1e-12)
