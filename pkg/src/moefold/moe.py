"""Sparse mixture-of-experts layer: noisy gating, top-k selection with both
softmax/top-k orderings, capacity-limited dispatch, and the gate-weighted
expert combination.

Gating orderings:
  * "mixtral": top-k mask first, softmax over the survivors; selected gates
    sum to 1, so a freshly upcycled layer with identical experts reproduces
    the dense FFN output.
  * "st": softmax over all experts first, then top-k masking with NO
    renormalization; selected gates sum to less than 1 whenever 1 < k < N,
    so the initial output is a scaled-down dense FFN.

Capacity: each expert accepts at most ceil(tokens / N * CF) slots per
batch; overflowing slots are dropped and contribute nothing to the token's
output (the residual connection carries the token through unchanged when
every slot is dropped). CF None means dropless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Tensor, matmul, mul, silu, softmax, softplus_t, take_rows, put_rows, slice_cols

ROUTER_TYPES = ("mixtral", "st")
DROP_POLICIES = ("position", "score")


@dataclass(frozen=True)
class GateConfig:
    """Routing knobs: expert count, fan-out, ordering, noise, capacity."""

    n_experts: int
    top_k: int
    router_type: str = "mixtral"
    noise_enabled: bool = False
    capacity_factor: float | None = None  # None = dropless
    drop_policy: str = "position"

    def __post_init__(self):
        if self.n_experts < 1:
            raise ConfigError(f"n_experts must be >= 1, got {self.n_experts}")
        if not (1 <= self.top_k <= self.n_experts):
            raise ConfigError(f"top_k must be in [1, {self.n_experts}], got {self.top_k}")
        if self.router_type not in ROUTER_TYPES:
            raise ConfigError(f"router_type must be one of {ROUTER_TYPES}, got {self.router_type!r}")
        if self.capacity_factor is not None and not (self.capacity_factor > 0):
            raise ConfigError(f"capacity_factor must be positive or None, got {self.capacity_factor}")
        if self.drop_policy not in DROP_POLICIES:
            raise ConfigError(f"drop_policy must be one of {DROP_POLICIES}, got {self.drop_policy!r}")


@dataclass
class RouterParams:
    """Router weight matrix plus the trainable noise-scale matrix."""

    w_g: Tensor
    w_noise: Tensor

    def __post_init__(self):
        if self.w_g.shape != self.w_noise.shape:
            raise ShapeError(f"router matrices differ in shape: {self.w_g.shape} vs {self.w_noise.shape}")
        if not (np.isfinite(self.w_g.data).all() and np.isfinite(self.w_noise.data).all()):
            raise ConfigError("router weights must be finite")


@dataclass
class ExpertFFN:
    """One expert's SwiGLU parameter set: gate (w1), down (w2), up (w3)."""

    w1: Tensor
    w2: Tensor
    w3: Tensor


@dataclass
class MoELayer:
    router: RouterParams
    experts: list[ExpertFFN]

    def __post_init__(self):
        if not self.experts:
            raise ConfigError("MoELayer needs at least one expert")
        s0 = (self.experts[0].w1.shape, self.experts[0].w2.shape, self.experts[0].w3.shape)
        for e in self.experts[1:]:
            if (e.w1.shape, e.w2.shape, e.w3.shape) != s0:
                raise ShapeError(f"experts disagree in shape: {s0} vs {(e.w1.shape, e.w2.shape, e.w3.shape)}")


@dataclass
class RoutingStats:
    """Per-batch routing outcome for one MoE layer."""

    assigned: np.ndarray          # [N] kept slots per expert
    dropped: int                  # slots excluded by capacity
    total_slots: int              # tokens * k
    gate_mass: np.ndarray         # [N] summed gate values of kept slots
    capacity: int | None

    @property
    def drop_rate(self) -> float:
        return self.dropped / self.total_slots if self.total_slots else 0.0

    @property
    def load_entropy(self) -> float:
        """Entropy (nats) of the kept-slot distribution over experts."""
        total = int(self.assigned.sum())
        if total == 0:
            return 0.0
        p = self.assigned[self.assigned > 0] / total
        return float(-(p * np.log(p)).sum())


@dataclass
class TopKMask:
    """Top-k selection result: original values plus the keep mask."""

    values: np.ndarray
    keep: np.ndarray

    def masked_values(self) -> np.ndarray:
        """Values with masked positions materialized as -inf (display only)."""
        return np.where(self.keep, self.values, -np.inf)


def ffn_forward(x: Tensor, w1: Tensor, w2: Tensor, w3: Tensor) -> Tensor:
    """SwiGLU feed-forward: down(silu(gate(x)) * up(x))."""
    return matmul(mul(silu(matmul(x, w1)), matmul(x, w3)), w2)


def router_logits(x: Tensor, p: RouterParams, noise_enabled: bool, rng: Rng | None = None) -> Tensor:
    """Per-token expert logits: x @ W_g, plus optional learned-scale noise.

    With noise enabled, one standard-normal draw per (token, expert) is
    taken from rng in row-major order and scaled by softplus(x @ W_noise);
    gradients flow through both matmuls (the draw itself is a constant).
    """
    clean = matmul(x, p.w_g)
    if not noise_enabled:
        return clean
    if rng is None:
        raise ConfigError("router noise enabled but no rng supplied")
    z = rng.standard_normal((x.shape[0], p.w_g.shape[1]))
    return clean + mul(Tensor(z.astype(x.dtype)), softplus_t(matmul(x, p.w_noise)))


def top_k_mask(values: np.ndarray, k: int) -> np.ndarray:
    """Boolean keep-mask of the k largest entries per row, lowest index wins ties."""
    v = np.atleast_2d(np.asarray(values))
    n = v.shape[-1]
    if not (1 <= k <= n):
        raise ConfigError(f"top-k out of range: k={k}, n={n}")
    order = np.argsort(-v, axis=-1, kind="stable")  # stable: ties keep low index first
    keep = np.zeros_like(v, dtype=bool)
    rows = np.arange(v.shape[0])[:, None]
    keep[rows, order[:, :k]] = True
    return keep.reshape(np.asarray(values).shape)


def keep_top_k(v: np.ndarray | Tensor, k: int) -> TopKMask:
    """Top-k selection over a logit vector (or rows); non-survivors masked."""
    data = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    return TopKMask(values=data.copy(), keep=top_k_mask(data, k))


def gate_mixtral(h: Tensor, k: int) -> Tensor:
    """Top-k mask first, then softmax over the survivors; rows sum to 1."""
    return softmax(h, mask=top_k_mask(h.data, k))


def gate_st(h: Tensor, k: int) -> Tensor:
    """Softmax over all experts, then top-k masking without renormalization.

    Selection runs on the logits: softmax is strictly monotone per row, so
    this is the same set as top-k by gate value, but it stays correct where
    float softmax rounds tiny logit gaps into exact gate ties (and it keeps
    the lowest-index tie-break aligned with the mixtral ordering).
    """
    s = softmax(h)
    keep = top_k_mask(h.data, k)
    return mul(s, Tensor(keep.astype(s.dtype)))


def expert_capacity(tokens_per_batch: int, n_experts: int, cf: float | None) -> int | None:
    """Slots per expert: ceil(tokens / N * CF); None (dropless) is unbounded."""
    if tokens_per_batch < 1:
        raise ConfigError(f"tokens_per_batch must be >= 1, got {tokens_per_batch}")
    if cf is None:
        return None
    # tiny epsilon guards ceil() against 1-ulp float excess on exact ratios
    return int(math.ceil(tokens_per_batch * cf / n_experts - 1e-9))


@dataclass
class DispatchResult:
    kept: np.ndarray     # [T, N] slot survives
    dropped: np.ndarray  # [T, N] slot existed (positive gate) but was cut
    stats: RoutingStats


def dispatch(gates: np.ndarray | Tensor, capacity: int | None, drop_policy: str = "position") -> DispatchResult:
    """Resolve per-expert capacity: which (token, expert) slots survive.

    A slot exists wherever the gate is positive. Overflow resolution:
    'position' keeps the earliest batch positions, 'score' keeps the
    highest gates (position breaks ties). Dropped slots contribute zero
    to their token's output; surviving slots of the same token still count.
    """
    if drop_policy not in DROP_POLICIES:
        raise ConfigError(f"drop_policy must be one of {DROP_POLICIES}, got {drop_policy!r}")
    g = gates.data if isinstance(gates, Tensor) else np.asarray(gates)
    t, n = g.shape
    slots = g > 0
    kept = slots.copy()
    if capacity is not None:
        for e in range(n):
            idx = np.nonzero(slots[:, e])[0]
            if idx.shape[0] <= capacity:
                continue
            if drop_policy == "score":
                # stable sort on -gate keeps earlier positions first among ties
                order = idx[np.argsort(-g[idx, e], kind="stable")]
            else:
                order = idx
            kept[order[capacity:], e] = False
    dropped = slots & ~kept
    assigned = kept.sum(axis=0).astype(np.int64)
    stats = RoutingStats(
        assigned=assigned,
        dropped=int(dropped.sum()),
        total_slots=int(slots.sum()),
        gate_mass=np.where(kept, g, 0.0).sum(axis=0),
        capacity=capacity,
    )
    return DispatchResult(kept=kept, dropped=dropped, stats=stats)


@dataclass
class MoEForwardResult:
    output: Tensor
    stats: RoutingStats
    gates: Tensor  # post-masking gates, for optional balance penalties


def moe_forward(x: Tensor, layer: MoELayer, cfg: GateConfig, rng: Rng | None = None,
                training: bool = False) -> MoEForwardResult:
    """Route tokens, run surviving slots through their experts, combine by gate.

    Differentiable through the gate softmax and the experts; top-k selection
    and capacity dropping act as constant masks. Noise applies only when
    both cfg.noise_enabled and training are set. Experts are reduced in
    expert-index order, so the output is schedule-independent.
    """
    n = cfg.n_experts
    if len(layer.experts) != n:
        raise ConfigError(f"layer has {len(layer.experts)} experts, config says {n}")
    if x.shape[1] != layer.router.w_g.shape[0]:
        raise ShapeError(f"input width {x.shape[1]} != router input {layer.router.w_g.shape[0]}")
    t = x.shape[0]

    h = router_logits(x, layer.router, cfg.noise_enabled and training, rng)
    gates = gate_mixtral(h, cfg.top_k) if cfg.router_type == "mixtral" else gate_st(h, cfg.top_k)
    capacity = expert_capacity(t, n, cfg.capacity_factor)
    disp = dispatch(gates.data, capacity, cfg.drop_policy)

    y: Tensor | None = None
    for e in range(n):
        idx = np.nonzero(disp.kept[:, e])[0]
        if idx.shape[0] == 0:
            continue
        xe = take_rows(x, idx)
        out_e = ffn_forward(xe, layer.experts[e].w1, layer.experts[e].w2, layer.experts[e].w3)
        w_e = take_rows(slice_cols(gates, e, e + 1), idx)  # [M, 1]
        contrib = put_rows(mul(out_e, w_e), idx, t)
        y = contrib if y is None else y + contrib
    if y is None:
        y = Tensor(np.zeros_like(x.data))
    return MoEForwardResult(output=y, stats=disp.stats, gates=gates)
