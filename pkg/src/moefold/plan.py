"""Hybrid-parallelism planner and analytic calculators.

Attention and MoE components get independent 4-D parallel mappings over
the same world: attention tp x cp x dp x pp, MoE etp x ep x edp x pp (the
pipeline dimension is shared). Ranks are laid out with a fixed nesting
order, fastest to slowest: tp, cp, dp, pp on the attention side and etp,
ep, edp, pp on the MoE side. With that layout, e.g. attention TP2xCP2 and
MoE EP8 on an 8-rank node fold the TP and CP groups inside the EP group.

The communication, bubble and memory formulas are standard analytic cost
models (ring/pairwise collectives, interleaved-1F1B bubble, ZeRO-1
optimizer sharding); they predict bytes and fractions, not wall-clock.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError, InputError
from .model import ModelConfig
from .moe import GateConfig

DISPATCHERS = ("alltoall", "allgather")

ATTENTION_KINDS = ("tp", "cp", "dp", "pp")
MOE_KINDS = ("etp", "ep", "edp")
GROUP_KINDS = ATTENTION_KINDS + MOE_KINDS


@dataclass(frozen=True)
class ParallelPlan:
    world: int
    node_size: int = 8
    tp: int = 1
    cp: int = 1
    dp: int = 1
    pp: int = 1
    etp: int = 1
    ep: int = 1
    edp: int = 1
    vp: int = 1
    dispatcher: str = "alltoall"


def validate_plan(plan: ParallelPlan, model_cfg: ModelConfig | None = None,
                  gate_cfg: GateConfig | None = None) -> None:
    """Product and divisibility checks; raises ConfigError showing both sides."""
    for name in ("world", "node_size", "tp", "cp", "dp", "pp", "etp", "ep", "edp", "vp"):
        if getattr(plan, name) < 1:
            raise ConfigError(f"{name} must be >= 1, got {getattr(plan, name)}")
    if plan.dispatcher not in DISPATCHERS:
        raise ConfigError(f"dispatcher must be one of {DISPATCHERS}, got {plan.dispatcher!r}")
    attn = plan.tp * plan.cp * plan.dp * plan.pp
    if attn != plan.world:
        raise ConfigError(f"attention product tp*cp*dp*pp = {plan.tp}*{plan.cp}*{plan.dp}*{plan.pp} "
                          f"= {attn} != world = {plan.world}")
    moe = plan.etp * plan.ep * plan.edp * plan.pp
    if moe != plan.world:
        raise ConfigError(f"moe product etp*ep*edp*pp = {plan.etp}*{plan.ep}*{plan.edp}*{plan.pp} "
                          f"= {moe} != world = {plan.world}")
    if model_cfg is not None:
        if model_cfg.heads % plan.tp != 0:
            raise ConfigError(f"heads = {model_cfg.heads} not divisible by tp = {plan.tp}")
        if model_cfg.ffn_hidden % plan.etp != 0:
            raise ConfigError(f"ffn_hidden = {model_cfg.ffn_hidden} not divisible by etp = {plan.etp}")
    if gate_cfg is not None and gate_cfg.n_experts % plan.ep != 0:
        raise ConfigError(f"n_experts = {gate_cfg.n_experts} not divisible by ep = {plan.ep}")


@dataclass
class GroupMap:
    """Rank lists per group kind; groups of one kind partition the world."""

    world: int
    node_size: int
    groups: dict[str, list[list[int]]]

    def group_of(self, kind: str, rank: int) -> list[int]:
        for g in self.groups[kind]:
            if rank in g:
                return g
        raise KeyError(f"rank {rank} not found in {kind} groups")


def _axis_groups(sizes: list[int], axis: int) -> list[list[int]]:
    """Groups varying one axis of a mixed-radix rank layout (axis 0 fastest)."""
    strides = [1] * len(sizes)
    for i in range(1, len(sizes)):
        strides[i] = strides[i - 1] * sizes[i - 1]
    groups = []
    other = [i for i in range(len(sizes)) if i != axis]
    # enumerate all combinations of the fixed axes in ascending rank order
    def rec(pos, base):
        if pos == len(other):
            groups.append([base + j * strides[axis] for j in range(sizes[axis])])
            return
        i = other[pos]
        for v in range(sizes[i]):
            rec(pos + 1, base + v * strides[i])
    rec(0, 0)
    return sorted(groups, key=lambda g: g[0])


def build_groups(plan: ParallelPlan) -> GroupMap:
    """Deterministic rank -> group assignment for both 4-D mappings."""
    validate_plan(plan)
    attn_sizes = [plan.tp, plan.cp, plan.dp, plan.pp]
    moe_sizes = [plan.etp, plan.ep, plan.edp, plan.pp]
    groups = {
        "tp": _axis_groups(attn_sizes, 0),
        "cp": _axis_groups(attn_sizes, 1),
        "dp": _axis_groups(attn_sizes, 2),
        "pp": _axis_groups(attn_sizes, 3),
        "etp": _axis_groups(moe_sizes, 0),
        "ep": _axis_groups(moe_sizes, 1),
        "edp": _axis_groups(moe_sizes, 2),
    }
    return GroupMap(world=plan.world, node_size=plan.node_size, groups=groups)


def intra_node_report(groups: GroupMap, node_size: int | None = None) -> dict[str, bool]:
    """Per group kind: does every group of that kind fit inside one node?"""
    ns = groups.node_size if node_size is None else node_size
    report = {}
    for kind, gs in groups.groups.items():
        report[kind] = all(len({r // ns for r in g}) == 1 for g in gs)
    return report


# ---------------------------------------------------------------------------
# parameter and FLOP accounting
# ---------------------------------------------------------------------------

@dataclass
class ParamCounts:
    total: int
    active: int
    expert: int       # expert FFN mass only (sharded by etp x ep)
    non_expert: int   # everything else, routers included
    matmul_total: int    # params participating in matmuls (no embedding/norms)
    matmul_active: int

    def __iter__(self):  # allows: total, active = count_params(...)
        return iter((self.total, self.active))


def count_params(model_cfg: ModelConfig, gate_cfg: GateConfig | None = None,
                 moe_layers=None) -> ParamCounts:
    """Closed-form parameter totals; matches exhaustive tensor enumeration.

    `active` replaces each MoE layer's N-expert mass with top_k experts
    (the router stays, both matrices). gate_cfg None counts a dense model.
    """
    c = model_cfg
    embed = c.vocab * c.hidden
    head = c.hidden * c.vocab
    attn = 2 * c.hidden * c.hidden + 2 * c.hidden * c.kv_width
    norms = 2 * c.hidden
    ffn = 3 * c.hidden * c.ffn_hidden

    if gate_cfg is None:
        moe_set = set()
        n = k = 0
        router = 0
    else:
        moe_set = set(range(c.layers)) if moe_layers is None else set(moe_layers)
        n, k = gate_cfg.n_experts, gate_cfg.top_k
        router = 2 * c.hidden * n

    total = embed + head + c.hidden
    active = embed + head + c.hidden
    mm_total = head
    mm_active = head
    expert = 0
    for i in range(c.layers):
        if i in moe_set:
            total += attn + norms + n * ffn + router
            active += attn + norms + k * ffn + router
            mm_total += attn + n * ffn + c.hidden * n  # only W_g multiplies at eval
            mm_active += attn + k * ffn + c.hidden * n
            expert += n * ffn
        else:
            total += attn + norms + ffn
            active += attn + norms + ffn
            mm_total += attn + ffn
            mm_active += attn + ffn
    return ParamCounts(total=total, active=active, expert=expert, non_expert=total - expert,
                       matmul_total=mm_total, matmul_active=mm_active)


FLOP_CONVENTIONS = {"2P": 2, "6P": 6}


def forward_flops(model_cfg: ModelConfig, gate_cfg: GateConfig | None, tokens: int,
                  convention: str = "2P", include_attention_quadratic: bool = True,
                  moe_layers=None) -> int:
    """Matmul-dominated FLOP count for `tokens` tokens.

    flops = m * (tokens * P_mm + quad) with m the convention multiplier
    (2P forward, 6P forward+backward), P_mm the active parameters that
    participate in matmuls (embedding gather and norm gains excluded), and
    quad = layers * 2 * tokens * min(tokens, seq_len) * hidden the
    attention score/value term (full TxT, matching the computed matrices).
    """
    if tokens < 1:
        raise InputError(f"tokens must be >= 1, got {tokens}")
    if convention not in FLOP_CONVENTIONS:
        raise ConfigError(f"convention must be one of {tuple(FLOP_CONVENTIONS)}, got {convention!r}")
    counts = count_params(model_cfg, gate_cfg, moe_layers)
    macs = tokens * counts.matmul_active
    if include_attention_quadratic:
        t_eff = min(tokens, model_cfg.seq_len)
        macs += model_cfg.layers * 2 * tokens * t_eff * model_cfg.hidden
    return FLOP_CONVENTIONS[convention] * macs


# ---------------------------------------------------------------------------
# communication, bubble, memory
# ---------------------------------------------------------------------------

@dataclass
class CommReport:
    """Bytes per layer per rank for the communication-heavy collectives."""

    dispatcher: str
    moe_dispatch_combine: float
    attn_tp_allreduce: float
    cp_kv_exchange: float


def comm_volume(plan: ParallelPlan, model_cfg: ModelConfig, gate_cfg: GateConfig | None,
                tokens_per_rank: int, bytes_per_value: int = 2) -> CommReport:
    """Analytic per-layer, per-rank communication volumes.

    alltoall dispatch+combine: 2 * t * k * hidden * B * (ep-1)/ep
    allgather dispatch+combine: 2 * t * (ep-1) * hidden * B
    attention TP (two all-reduces per layer, ring): 2 * 2 * t * hidden * B * (tp-1)/tp
    CP KV ring exchange (GQA-scaled):  2 * t * hidden * (kv/heads) * B * (cp-1)
    """
    h = model_cfg.hidden
    b = bytes_per_value
    t = tokens_per_rank
    if gate_cfg is None or plan.ep == 1:
        moe = 0.0
    elif plan.dispatcher == "alltoall":
        moe = 2.0 * t * gate_cfg.top_k * h * b * (plan.ep - 1) / plan.ep
    else:
        moe = 2.0 * t * (plan.ep - 1) * h * b
    attn_tp = 2.0 * 2.0 * t * h * b * (plan.tp - 1) / plan.tp
    kv_frac = model_cfg.kv_heads / model_cfg.heads
    cp_kv = 2.0 * t * h * kv_frac * b * (plan.cp - 1)
    return CommReport(dispatcher=plan.dispatcher, moe_dispatch_combine=moe,
                      attn_tp_allreduce=attn_tp, cp_kv_exchange=cp_kv)


def pipeline_bubble(pp: int, vp: int, microbatches: int) -> float:
    """Interleaved-1F1B bubble fraction: (pp-1) / (vp*mb + pp - 1)."""
    if pp < 1 or vp < 1 or microbatches < 1:
        raise InputError(f"pp, vp, microbatches must be >= 1, got ({pp}, {vp}, {microbatches})")
    return (pp - 1) / (vp * microbatches + pp - 1)


@dataclass
class MemoryReport:
    weights_bytes: float
    grads_bytes: float
    optimizer_bytes: float

    @property
    def total_bytes(self) -> float:
        return self.weights_bytes + self.grads_bytes + self.optimizer_bytes


def memory_estimate(plan: ParallelPlan, model_cfg: ModelConfig, gate_cfg: GateConfig | None = None,
                    moe_layers=None, bytes_per_param: int = 2,
                    optimizer_multiplier: float = 12.0) -> MemoryReport:
    """Per-rank memory: weights + grads after tp/etp/ep/pp partitioning,
    optimizer states additionally sharded over the applicable data-parallel
    dimension (ZeRO-1): dp for shared params, edp for expert params.
    """
    validate_plan(plan, model_cfg, gate_cfg)
    counts = count_params(model_cfg, gate_cfg, moe_layers)
    shared_local = counts.non_expert / (plan.tp * plan.pp)
    expert_local = counts.expert / (plan.etp * plan.ep * plan.pp)
    weights = bytes_per_param * (shared_local + expert_local)
    grads = weights
    optimizer = optimizer_multiplier * bytes_per_param * (shared_local / plan.dp + expert_local / plan.edp)
    return MemoryReport(weights_bytes=weights, grads_bytes=grads, optimizer_bytes=optimizer)
