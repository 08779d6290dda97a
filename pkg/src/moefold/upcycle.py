"""Dense-to-MoE checkpoint conversion.

Whole-model path: every converted layer's experts are bitwise copies of
the source FFN; the router is drawn from a seeded stream; everything else
is copied untouched.

Online (per-rank) path: the dense checkpoint is first sharded (FFN w1/w3
split along ffn_hidden columns, w2 along ffn_hidden rows across TP; full
FFN replicated across EP), then each rank instantiates only the experts it
owns by copying its local FFN slice, and draws the full router from the
same (router_seed, layer) stream as every other rank. No cross-rank weight
movement is needed, and gathering the shards reproduces the whole-model
result bitwise.

Rank numbering for a (tp, ep) grid: rank = ep_index * tp_size + tp_index.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, IntegrityError, SchemaError
from .model import DenseCheckpoint, ModelConfig, dense_schema
from .moe import GateConfig
from .rng import Rng
from .tensor import Tensor

ROUTER_INIT_STD = 0.02


@dataclass
class MoECheckpoint:
    config: ModelConfig
    gate: GateConfig
    moe_layers: tuple[int, ...]
    tensors: dict[str, Tensor]
    kind = "moe"

    def validate(self) -> None:
        from .model import _check_schema
        _check_schema(self.tensors, moe_schema(self.config, self.gate, self.moe_layers))


def moe_schema(cfg: ModelConfig, gate: GateConfig, moe_layers: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    """Dense schema with converted layers' FFN replaced by router + experts."""
    schema = dense_schema(cfg)
    for i in moe_layers:
        for w in ("w1", "w2", "w3"):
            del schema[f"layers.{i}.ffn.{w}"]
        p = f"layers.{i}.moe"
        schema[f"{p}.router.wg"] = (cfg.hidden, gate.n_experts)
        schema[f"{p}.router.wnoise"] = (cfg.hidden, gate.n_experts)
        for e in range(gate.n_experts):
            schema[f"{p}.experts.{e:03d}.w1"] = (cfg.hidden, cfg.ffn_hidden)
            schema[f"{p}.experts.{e:03d}.w2"] = (cfg.ffn_hidden, cfg.hidden)
            schema[f"{p}.experts.{e:03d}.w3"] = (cfg.hidden, cfg.ffn_hidden)
    return schema


def _normalize_moe_layers(cfg: ModelConfig, moe_layers) -> tuple[int, ...]:
    if moe_layers is None:
        return tuple(range(cfg.layers))
    layers = tuple(sorted(set(int(i) for i in moe_layers)))
    for i in layers:
        if not (0 <= i < cfg.layers):
            raise ConfigError(f"moe layer index {i} outside [0, {cfg.layers})")
    return layers


def router_weights(cfg: ModelConfig, n_experts: int, layer: int, router_seed: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Seeded router init for one layer, identical on every rank.

    W_g ~ N(0, 0.02) drawn row-major from Rng(router_seed, layer); W_noise
    starts at zero so noise is inactive until trained, even when enabled.
    """
    rng = Rng(router_seed, stream=layer)
    w_g = rng.normal((cfg.hidden, n_experts), ROUTER_INIT_STD).astype(dtype)
    w_noise = np.zeros((cfg.hidden, n_experts), dtype=dtype)
    return w_g, w_noise


def upcycle_full(dense: DenseCheckpoint, n_experts: int, top_k: int, moe_layers=None,
                 router_seed: int = 0, router_type: str = "mixtral",
                 noise_enabled: bool = False, capacity_factor: float | None = None,
                 drop_policy: str = "position") -> MoECheckpoint:
    """Convert a whole dense checkpoint: experts are bitwise FFN copies."""
    if n_experts < 2:
        raise ConfigError(f"upcycling needs n_experts >= 2, got {n_experts}")
    gate = GateConfig(n_experts=n_experts, top_k=top_k, router_type=router_type,
                      noise_enabled=noise_enabled, capacity_factor=capacity_factor,
                      drop_policy=drop_policy)
    cfg = dense.config
    layers = _normalize_moe_layers(cfg, moe_layers)
    layer_set = set(layers)

    tensors: dict[str, Tensor] = {}
    for name, t in dense.tensors.items():
        li = _layer_index(name)
        if li in layer_set and ".ffn.w" in name:
            continue  # replaced by experts below
        tensors[name] = Tensor(t.data.copy(), requires_grad=True)
    for i in layers:
        src = {w: dense.tensors[f"layers.{i}.ffn.{w}"].data for w in ("w1", "w2", "w3")}
        p = f"layers.{i}.moe"
        w_g, w_noise = router_weights(cfg, n_experts, i, router_seed, src["w1"].dtype)
        tensors[f"{p}.router.wg"] = Tensor(w_g, requires_grad=True)
        tensors[f"{p}.router.wnoise"] = Tensor(w_noise, requires_grad=True)
        for e in range(n_experts):
            for w in ("w1", "w2", "w3"):
                tensors[f"{p}.experts.{e:03d}.{w}"] = Tensor(src[w].copy(), requires_grad=True)
    out = MoECheckpoint(config=cfg, gate=gate, moe_layers=layers, tensors=tensors)
    out.validate()
    return out


def _layer_index(name: str) -> int | None:
    if not name.startswith("layers."):
        return None
    return int(name.split(".")[1])


# ---------------------------------------------------------------------------
# sharding
# ---------------------------------------------------------------------------

@dataclass
class DenseShard:
    """One rank's slice of a dense checkpoint under a (tp, ep) grid."""

    rank: int
    tp_index: int
    tp_size: int
    ep_index: int
    ep_size: int
    config: ModelConfig
    tensors: dict[str, Tensor]


@dataclass
class MoEShard:
    """One rank's slice of an upcycled checkpoint (locally instantiated experts)."""

    rank: int
    tp_index: int
    tp_size: int
    ep_index: int
    ep_size: int
    config: ModelConfig
    gate: GateConfig
    moe_layers: tuple[int, ...]
    tensors: dict[str, Tensor]


def shard_dense(dense: DenseCheckpoint, tp_size: int, ep_size: int) -> list[DenseShard]:
    """Slice a dense checkpoint across a tp x ep grid.

    FFN w1/w3 are column-split and w2 row-split along ffn_hidden over TP;
    the (sliced) FFN is replicated across EP ranks, as are attention,
    embeddings and norms.
    """
    cfg = dense.config
    if tp_size < 1 or ep_size < 1:
        raise ConfigError(f"tp and ep sizes must be >= 1, got tp={tp_size}, ep={ep_size}")
    if cfg.ffn_hidden % tp_size != 0:
        raise ConfigError(f"ffn.w1 columns ({cfg.ffn_hidden}) not divisible by tp={tp_size}")
    cols = cfg.ffn_hidden // tp_size
    shards = []
    for ep_i in range(ep_size):
        for tp_i in range(tp_size):
            tensors: dict[str, Tensor] = {}
            j0, j1 = tp_i * cols, (tp_i + 1) * cols
            for name, t in dense.tensors.items():
                if ".ffn.w1" in name or ".ffn.w3" in name:
                    data = t.data[:, j0:j1].copy()
                elif ".ffn.w2" in name:
                    data = t.data[j0:j1, :].copy()
                else:
                    data = t.data.copy()
                tensors[name] = Tensor(data)
            shards.append(DenseShard(rank=ep_i * tp_size + tp_i, tp_index=tp_i, tp_size=tp_size,
                                     ep_index=ep_i, ep_size=ep_size, config=cfg, tensors=tensors))
    return shards


def upcycle_shard(shard: DenseShard, n_experts: int, top_k: int, moe_layers=None,
                  router_seed: int = 0, router_type: str = "mixtral",
                  noise_enabled: bool = False, capacity_factor: float | None = None,
                  drop_policy: str = "position") -> MoEShard:
    """Upcycle one rank in place: no data from any other rank is needed.

    The rank instantiates only the experts its EP index owns (a contiguous
    block of N // ep) by copying its local FFN slice; the router is drawn
    whole from (router_seed, layer), so all ranks hold identical routers.
    """
    if n_experts < 2:
        raise ConfigError(f"upcycling needs n_experts >= 2, got {n_experts}")
    if n_experts % shard.ep_size != 0:
        raise ConfigError(f"n_experts ({n_experts}) not divisible by ep={shard.ep_size}")
    gate = GateConfig(n_experts=n_experts, top_k=top_k, router_type=router_type,
                      noise_enabled=noise_enabled, capacity_factor=capacity_factor,
                      drop_policy=drop_policy)
    cfg = shard.config
    layers = _normalize_moe_layers(cfg, moe_layers)
    layer_set = set(layers)
    block = n_experts // shard.ep_size
    owned = range(shard.ep_index * block, (shard.ep_index + 1) * block)

    tensors: dict[str, Tensor] = {}
    for name, t in shard.tensors.items():
        li = _layer_index(name)
        if li in layer_set and ".ffn.w" in name:
            continue
        tensors[name] = Tensor(t.data.copy())
    for i in layers:
        src = {w: shard.tensors[f"layers.{i}.ffn.{w}"].data for w in ("w1", "w2", "w3")}
        p = f"layers.{i}.moe"
        w_g, w_noise = router_weights(cfg, n_experts, i, router_seed, src["w1"].dtype)
        tensors[f"{p}.router.wg"] = Tensor(w_g)
        tensors[f"{p}.router.wnoise"] = Tensor(w_noise)
        for e in owned:
            for w in ("w1", "w2", "w3"):
                tensors[f"{p}.experts.{e:03d}.{w}"] = Tensor(src[w].copy())
    return MoEShard(rank=shard.rank, tp_index=shard.tp_index, tp_size=shard.tp_size,
                    ep_index=shard.ep_index, ep_size=shard.ep_size, config=cfg,
                    gate=gate, moe_layers=layers, tensors=tensors)


def _bitwise_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def gather_moe(shards: list[MoEShard]) -> MoECheckpoint:
    """Reassemble per-rank MoE shards into a whole checkpoint.

    Fails if any tile is missing or duplicated, or if a replicated tensor
    (anything except FFN/expert slices) differs between two ranks.
    """
    if not shards:
        raise IntegrityError("gather needs at least one shard")
    ref = shards[0]
    tp, ep = ref.tp_size, ref.ep_size
    expected = set(range(tp * ep))
    seen = {}
    for s in shards:
        if (s.tp_size, s.ep_size) != (tp, ep) or s.config != ref.config or s.gate != ref.gate or s.moe_layers != ref.moe_layers:
            raise IntegrityError(f"shard rank {s.rank} disagrees with rank {ref.rank} on grid or config")
        if s.rank in seen:
            raise IntegrityError(f"duplicate shard for rank {s.rank}")
        seen[s.rank] = s
    missing = sorted(expected - set(seen))
    if missing:
        raise IntegrityError(f"missing shard tile for rank {missing[0]} (of {sorted(expected - set(seen))})")

    grid = {(s.ep_index, s.tp_index): s for s in shards}
    cfg, gate, layers = ref.config, ref.gate, ref.moe_layers
    schema = moe_schema(cfg, gate, layers)
    tensors: dict[str, Tensor] = {}
    block = gate.n_experts // ep

    for name in sorted(schema):
        if ".ffn.w" in name or ".experts." in name:
            axis = 0 if ".w2" in name else 1
            if ".experts." in name:
                e = int(name.split(".experts.")[1].split(".")[0])
                owner_ep = e // block
                row = [grid[(owner_ep, tp_i)] for tp_i in range(tp)]
            else:
                row = [grid[(0, tp_i)] for tp_i in range(tp)]
                for ep_i in range(1, ep):  # sliced FFN replicated across EP
                    for tp_i in range(tp):
                        if not _bitwise_equal(grid[(ep_i, tp_i)].tensors[name].data, grid[(0, tp_i)].tensors[name].data):
                            raise IntegrityError(f"replica mismatch for {name} between ranks "
                                                 f"{grid[(ep_i, tp_i)].rank} and {grid[(0, tp_i)].rank}")
            parts = [s.tensors[name].data for s in row]
            data = parts[0].copy() if len(parts) == 1 else np.concatenate(parts, axis=axis)
            tensors[name] = Tensor(data, requires_grad=True)
        else:
            first = shards[0].tensors[name].data
            for s in shards[1:]:
                if not _bitwise_equal(s.tensors[name].data, first):
                    raise IntegrityError(f"replica mismatch for {name} between ranks {s.rank} and {shards[0].rank}")
            tensors[name] = Tensor(first.copy(), requires_grad=True)

    out = MoECheckpoint(config=cfg, gate=gate, moe_layers=layers, tensors=tensors)
    out.validate()
    return out


# ---------------------------------------------------------------------------
# equivalence oracle
# ---------------------------------------------------------------------------

@dataclass
class EquivalenceReport:
    equal: bool
    first_diff: tuple[str, int] | None
    tensors_compared: int

    def __str__(self) -> str:
        if self.equal:
            return f"checkpoints identical ({self.tensors_compared} tensors)"
        name, idx = self.first_diff
        return f"checkpoints differ at {name}[{idx}] ({self.tensors_compared} tensors compared)"


def verify_equivalence(a, b) -> EquivalenceReport:
    """Bitwise per-tensor comparison of two checkpoints with equal schema."""
    if type(a).__name__ != type(b).__name__ or a.config != b.config:
        raise SchemaError("checkpoints have different kind or model config")
    if getattr(a, "gate", None) != getattr(b, "gate", None) or getattr(a, "moe_layers", None) != getattr(b, "moe_layers", None):
        raise SchemaError("checkpoints have different gate config or MoE layer sets")
    if set(a.tensors) != set(b.tensors):
        raise SchemaError(f"tensor sets differ: only-a={sorted(set(a.tensors) - set(b.tensors))[:4]}, "
                          f"only-b={sorted(set(b.tensors) - set(a.tensors))[:4]}")
    first_diff = None
    for name in sorted(a.tensors):
        ta, tb = a.tensors[name].data, b.tensors[name].data
        if ta.shape != tb.shape or ta.dtype != tb.dtype:
            raise SchemaError(f"tensor {name} shape/dtype mismatch: {ta.shape}/{ta.dtype} vs {tb.shape}/{tb.dtype}")
        if ta.tobytes() != tb.tobytes():
            byte_view = np.frombuffer(ta.tobytes(), dtype=np.uint8) != np.frombuffer(tb.tobytes(), dtype=np.uint8)
            idx = int(np.nonzero(byte_view)[0][0] // ta.itemsize)
            first_diff = (name, idx)
            break
    return EquivalenceReport(equal=first_diff is None, first_diff=first_diff,
                             tensors_compared=len(a.tensors))
