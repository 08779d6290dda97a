"""Toy Llama-style decoder: causal GQA attention, pre-RMSNorm, SwiGLU FFN,
untied embedding/head. Small enough for finite-difference oracles, big
enough to exercise tensor-parallel sharding and MoE conversion.

The same forward pass serves dense checkpoints and upcycled MoE
checkpoints; MoE layers report routing statistics alongside the logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, SchemaError
from .moe import ExpertFFN, GateConfig, MoELayer, MoEForwardResult, RouterParams, RoutingStats, ffn_forward, moe_forward
from .rng import Rng
from .tensor import Tensor, attention, cross_entropy, embedding, matmul, rmsnorm

POSITIONAL_KINDS = ("none", "rotary")

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 512
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    kv_heads: int = 2
    ffn_hidden: int = 256
    seq_len: int = 128
    positional: str = "none"

    def __post_init__(self):
        for name in ("vocab", "hidden", "layers", "heads", "kv_heads", "ffn_hidden", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.heads % self.kv_heads != 0:
            raise ConfigError(f"heads ({self.heads}) must be a multiple of kv_heads ({self.kv_heads})")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden ({self.hidden}) must be a multiple of heads ({self.heads})")
        if self.positional not in POSITIONAL_KINDS:
            raise ConfigError(f"positional must be one of {POSITIONAL_KINDS}, got {self.positional!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def kv_width(self) -> int:
        return self.kv_heads * self.head_dim


def dense_schema(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor name -> shape map for a dense checkpoint."""
    schema: dict[str, tuple[int, ...]] = {
        "embedding": (cfg.vocab, cfg.hidden),
        "lm_head": (cfg.hidden, cfg.vocab),
        "final_norm": (cfg.hidden,),
    }
    for i in range(cfg.layers):
        p = f"layers.{i}"
        schema[f"{p}.attn_norm"] = (cfg.hidden,)
        schema[f"{p}.attn.wq"] = (cfg.hidden, cfg.hidden)
        schema[f"{p}.attn.wk"] = (cfg.hidden, cfg.kv_width)
        schema[f"{p}.attn.wv"] = (cfg.hidden, cfg.kv_width)
        schema[f"{p}.attn.wo"] = (cfg.hidden, cfg.hidden)
        schema[f"{p}.ffn_norm"] = (cfg.hidden,)
        schema[f"{p}.ffn.w1"] = (cfg.hidden, cfg.ffn_hidden)
        schema[f"{p}.ffn.w2"] = (cfg.ffn_hidden, cfg.hidden)
        schema[f"{p}.ffn.w3"] = (cfg.hidden, cfg.ffn_hidden)
    return schema


def _check_schema(tensors: dict[str, Tensor], schema: dict[str, tuple[int, ...]]) -> None:
    missing = sorted(set(schema) - set(tensors))
    extra = sorted(set(tensors) - set(schema))
    if missing or extra:
        raise SchemaError(f"tensor set does not match schema: missing={missing[:4]}, extra={extra[:4]}")
    for name, shape in schema.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise SchemaError(f"tensor {name} has shape {tensors[name].shape}, schema says {shape}")
        if not np.isfinite(tensors[name].data).all():
            raise SchemaError(f"tensor {name} contains non-finite values")


@dataclass
class DenseCheckpoint:
    config: ModelConfig
    tensors: dict[str, Tensor]
    kind = "dense"

    def validate(self) -> None:
        _check_schema(self.tensors, dense_schema(self.config))


def init_dense(cfg: ModelConfig, seed: int, dtype=np.float64) -> DenseCheckpoint:
    """Fresh dense checkpoint: weights ~ N(0, 0.02), norm gains 1.

    Draws come from Rng(seed, 0) in sorted tensor-name order (norm gains
    consume no draws), so the same seed always builds the same model.
    """
    rng = Rng(seed, 0)
    tensors: dict[str, Tensor] = {}
    for name, shape in sorted(dense_schema(cfg).items()):
        if name.endswith("norm"):
            data = np.ones(shape, dtype=dtype)
        else:
            data = rng.normal(shape, INIT_STD).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return DenseCheckpoint(config=cfg, tensors=tensors)


@dataclass
class ForwardResult:
    logits: Tensor
    stats: list[RoutingStats] = field(default_factory=list)
    gates: list[Tensor] = field(default_factory=list)


def _flatten_tokens(cfg: ModelConfig, tokens) -> tuple[np.ndarray, int]:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise InputError(f"tokens must be 1-D or 2-D, got shape {ids.shape}")
    t = ids.shape[1]
    if t < 1 or t > cfg.seq_len:
        raise InputError(f"sequence length {t} outside [1, {cfg.seq_len}]")
    return ids.reshape(-1), t


def forward_with_stats(ckpt, tokens, rng: Rng | None = None, training: bool = False) -> ForwardResult:
    """Run the transformer; tokens may be one sequence or a [batch, seq] array.

    Works on both dense and MoE checkpoints. Routing noise applies only in
    training mode with an rng supplied; evaluation is always noise-free.
    """
    cfg: ModelConfig = ckpt.config
    ids, seq = _flatten_tokens(cfg, tokens)
    ts = ckpt.tensors
    moe_layers = set(getattr(ckpt, "moe_layers", ()) or ())
    gate_cfg: GateConfig | None = getattr(ckpt, "gate", None)
    rotary = cfg.positional == "rotary"

    result = ForwardResult(logits=None)  # filled below
    x = embedding(ts["embedding"], ids)
    for i in range(cfg.layers):
        p = f"layers.{i}"
        h = rmsnorm(x, ts[f"{p}.attn_norm"])
        q = matmul(h, ts[f"{p}.attn.wq"])
        k = matmul(h, ts[f"{p}.attn.wk"])
        v = matmul(h, ts[f"{p}.attn.wv"])
        a = attention(q, k, v, cfg.heads, cfg.kv_heads, seq, rotary=rotary)
        x = x + matmul(a, ts[f"{p}.attn.wo"])
        h2 = rmsnorm(x, ts[f"{p}.ffn_norm"])
        if i in moe_layers:
            layer = _moe_layer_view(ts, i, gate_cfg.n_experts)
            r: MoEForwardResult = moe_forward(h2, layer, gate_cfg, rng=rng, training=training)
            x = x + r.output
            result.stats.append(r.stats)
            result.gates.append(r.gates)
        else:
            x = x + ffn_forward(h2, ts[f"{p}.ffn.w1"], ts[f"{p}.ffn.w2"], ts[f"{p}.ffn.w3"])
    x = rmsnorm(x, ts["final_norm"])
    result.logits = matmul(x, ts["lm_head"])
    return result


def forward_logits(ckpt, tokens, rng: Rng | None = None, training: bool = False) -> Tensor:
    """Logits [tokens, vocab] for a dense or MoE checkpoint."""
    return forward_with_stats(ckpt, tokens, rng=rng, training=training).logits


def _moe_layer_view(tensors: dict[str, Tensor], layer: int, n_experts: int) -> MoELayer:
    p = f"layers.{layer}.moe"
    router = RouterParams(w_g=tensors[f"{p}.router.wg"], w_noise=tensors[f"{p}.router.wnoise"])
    experts = [
        ExpertFFN(
            w1=tensors[f"{p}.experts.{e:03d}.w1"],
            w2=tensors[f"{p}.experts.{e:03d}.w2"],
            w3=tensors[f"{p}.experts.{e:03d}.w3"],
        )
        for e in range(n_experts)
    ]
    return MoELayer(router=router, experts=experts)


__all__ = [
    "ModelConfig", "DenseCheckpoint", "ForwardResult", "dense_schema", "init_dense",
    "forward_logits", "forward_with_stats", "cross_entropy", "INIT_STD",
]
