"""moefold: dense-to-MoE checkpoint upcycling, sparse top-k routing with
capacity-factor token dropping, and an attention/MoE parallel-folding
planner, all verifiable at desk scale on a seeded numpy substrate."""

from .errors import MoefoldError
from .model import DenseCheckpoint, ModelConfig, forward_logits, init_dense
from .moe import GateConfig, MoELayer, RouterParams, RoutingStats, expert_capacity, moe_forward
from .plan import ParallelPlan, build_groups, count_params, forward_flops, pipeline_bubble, validate_plan
from .rng import Rng
from .tensor import Tensor
from .train import BlendSpec, Schedule, TrainConfig, eval_perplexity, lr_at, train
from .upcycle import MoECheckpoint, gather_moe, shard_dense, upcycle_full, upcycle_shard, verify_equivalence

__version__ = "0.1.0"

__all__ = [
    "MoefoldError", "Rng", "Tensor",
    "ModelConfig", "DenseCheckpoint", "init_dense", "forward_logits",
    "GateConfig", "RouterParams", "MoELayer", "RoutingStats", "moe_forward", "expert_capacity",
    "MoECheckpoint", "upcycle_full", "shard_dense", "upcycle_shard", "gather_moe", "verify_equivalence",
    "ParallelPlan", "validate_plan", "build_groups", "count_params", "forward_flops", "pipeline_bubble",
    "Schedule", "BlendSpec", "TrainConfig", "lr_at", "train", "eval_perplexity",
    "__version__",
]
