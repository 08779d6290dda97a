"""Command-line front end.

One JSON config file drives every command; each command reads only its
own sections, unknown keys are rejected, and command-line flags override
file values (flags > config file > built-in defaults). All seeds come
from the config (or --seed), so every command is deterministic.

Exit codes: 0 ok, 2 config error, 3 I/O error (including refusing to
overwrite without --force), 4 verification failure, 5 folding-check
failure, 6 numeric abort during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import checkpoint as ckpt_io
from . import figures
from .errors import (CheckpointError, ConfigError, FoldingError, InputError,
                     MoefoldError, NumericAbort, VerificationError)
from .model import DenseCheckpoint, ModelConfig, init_dense
from .moe import GateConfig
from .plan import (ParallelPlan, build_groups, comm_volume, count_params, forward_flops,
                   intra_node_report, memory_estimate, pipeline_bubble, validate_plan)
from .train import (AblationConfig, BlendSpec, RunMetrics, Schedule, TrainConfig, ablate,
                    eval_perplexity, run_value_id, sample_eval_sequences, train)
from .upcycle import (MoECheckpoint, gather_moe, shard_dense, upcycle_full, upcycle_shard,
                      verify_equivalence)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VERIFY = 4
EXIT_FOLDING = 5
EXIT_NUMERIC = 6

# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

DEFAULT_CONFIG = {
    "seed": 0,
    "seeds": {},  # optional explicit overrides: model, router, data, noise
    "model": {
        "vocab": 512, "hidden": 64, "layers": 4, "heads": 4, "kv_heads": 2,
        "ffn_hidden": 256, "seq_len": 128, "positional": "none",
    },
    "gate": None,       # presence turns train/flops into MoE mode
    "moe_layers": "all",
    "plan": {
        "world": 8, "node_size": 8, "tp": 1, "cp": 1, "dp": 8, "pp": 1,
        "etp": 1, "ep": 8, "edp": 1, "vp": 1, "dispatcher": "alltoall",
        "microbatches": 8, "tokens_per_rank": 8192, "bytes_per_value": 2,
        "bytes_per_param": 2, "optimizer_multiplier": 12.0,
    },
    "schedule": {"lr_max": 3e-5, "lr_min": 3e-7, "warmup_steps": 100, "total_steps": 2000},
    "blend": {"sources": [["corpus0", 7.0], ["corpus1", 3.0]]},
    "train": {
        "steps": 200, "batch_size": 32, "seq_len": 128, "optimizer": "adam",
        "aux_loss_coeff": 0.0, "corpus_branching": 4, "checkpoint": None,
    },
    "eval": {"checkpoint": None, "sequences": 64, "seq_len": 128},
    "upcycle": {"input": None, "tp": 1, "ep": 1, "verify": False},
    "ablate": {"axis": "router_type", "values": ["mixtral", "st"]},
    "flops": {"tokens": 8192, "convention": "2P", "attention_quadratic": True},
}

GATE_DEFAULTS = {
    "n_experts": 8, "top_k": 2, "router_type": "mixtral", "noise_enabled": False,
    "capacity_factor": None, "drop_policy": "position",
}


def _merge_section(name: str, defaults: dict, user: dict) -> dict:
    unknown = sorted(set(user) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key(s) in config section {name!r}: {unknown}")
    merged = dict(defaults)
    merged.update(user)
    return merged


def load_config(path: str | None) -> dict:
    """Read the JSON config and merge over defaults, rejecting unknown keys."""
    user = {}
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path) as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    unknown = sorted(set(user) - set(DEFAULT_CONFIG))
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {unknown}")
    cfg = {}
    for key, default in DEFAULT_CONFIG.items():
        value = user.get(key, default)
        if key == "gate":
            cfg[key] = None if value is None else _merge_section("gate", GATE_DEFAULTS, value)
        elif isinstance(default, dict) and key != "seeds":
            cfg[key] = _merge_section(key, default, value if value is not None else {})
        elif key == "seeds":
            extra = sorted(set(value) - {"model", "router", "data", "noise"})
            if extra:
                raise ConfigError(f"unknown key(s) in config section 'seeds': {extra}")
            cfg[key] = dict(value)
        else:
            cfg[key] = value
    return cfg


def effective_seeds(cfg: dict) -> dict:
    """model/router/data/noise seeds derived from the base seed unless set."""
    base = int(cfg["seed"])
    derived = {"model": base, "router": base + 1, "data": base + 2, "noise": base + 3}
    derived.update({k: int(v) for k, v in cfg["seeds"].items()})
    return derived


def build_model(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**cfg["model"])
    except TypeError as e:
        raise ConfigError(f"bad model section: {e}") from e


def build_gate(cfg: dict) -> GateConfig | None:
    g = cfg["gate"]
    if g is None:
        return None
    g = dict(g)
    if g.get("capacity_factor") == "dropless":
        g["capacity_factor"] = None
    try:
        return GateConfig(**g)
    except TypeError as e:
        raise ConfigError(f"bad gate section: {e}") from e


def build_moe_layers(cfg: dict, model: ModelConfig) -> tuple[int, ...] | None:
    v = cfg["moe_layers"]
    if v == "all" or v is None:
        return None  # upcycle_full treats None as all layers
    if not isinstance(v, list):
        raise ConfigError(f"moe_layers must be 'all' or a list of layer indices, got {v!r}")
    return tuple(int(i) for i in v)


def build_plan(cfg: dict) -> ParallelPlan:
    p = dict(cfg["plan"])
    for extra_key in ("microbatches", "tokens_per_rank", "bytes_per_value",
                      "bytes_per_param", "optimizer_multiplier"):
        p.pop(extra_key)
    try:
        return ParallelPlan(**p)
    except TypeError as e:
        raise ConfigError(f"bad plan section: {e}") from e


def build_schedule(cfg: dict) -> Schedule:
    try:
        return Schedule(**cfg["schedule"])
    except TypeError as e:
        raise ConfigError(f"bad schedule section: {e}") from e


def build_blend(cfg: dict, data_seed: int) -> BlendSpec:
    b = cfg["blend"]
    try:
        sources = tuple((str(name), float(w)) for name, w in b["sources"])
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"bad blend section: {e}") from e
    return BlendSpec(sources=sources, seed=data_seed)


def build_train_config(cfg: dict, seeds: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t.pop("checkpoint")
    try:
        return TrainConfig(schedule=build_schedule(cfg), blend=build_blend(cfg, seeds["data"]),
                           noise_seed=seeds["noise"], **t)
    except TypeError as e:
        raise ConfigError(f"bad train section: {e}") from e


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _require_out(args) -> str:
    if not args.out:
        raise ConfigError(f"command {args.command!r} writes files; pass --out <dir>")
    return args.out


def _ensure_absent(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise FileExistsError(f"output already exists (use --force to overwrite): {path}")


def _check_input_path(path: str | None, what: str) -> str:
    if not path:
        raise ConfigError(f"missing required path: {what}")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _write_report_csv(path_or_stdout, rows: list[tuple[str, object]]) -> None:
    """Machine-readable report: one `metric,value` record per row."""
    if path_or_stdout is None:
        w = csv.writer(sys.stdout)
        w.writerow(["metric", "value"])
        w.writerows(rows)
    else:
        with open(path_or_stdout, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "value"])
            w.writerows(rows)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_print_config(args, cfg: dict) -> int:
    out = dict(cfg)
    out["seeds"] = effective_seeds(cfg)
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_upcycle(args, cfg: dict) -> int:
    seeds = effective_seeds(cfg)
    up = cfg["upcycle"]
    input_path = _check_input_path(args.input or up["input"], "upcycle input checkpoint")
    out_dir = _require_out(args)
    gate_cfg = cfg["gate"] if cfg["gate"] is not None else dict(GATE_DEFAULTS)
    n_experts = args.experts if args.experts is not None else gate_cfg["n_experts"]
    top_k = args.top_k if args.top_k is not None else gate_cfg["top_k"]
    capacity = gate_cfg["capacity_factor"]
    if capacity == "dropless":
        capacity = None
    tp = args.tp if args.tp is not None else up["tp"]
    ep = args.ep if args.ep is not None else up["ep"]
    verify = args.verify or up["verify"]

    dense = ckpt_io.load_checkpoint(input_path)
    if not isinstance(dense, DenseCheckpoint):
        raise ConfigError(f"upcycle input must be a dense checkpoint, got kind {dense.kind!r}")
    moe_layers = build_moe_layers(cfg, dense.config)
    kwargs = dict(moe_layers=moe_layers, router_seed=seeds["router"],
                  router_type=gate_cfg["router_type"], noise_enabled=gate_cfg["noise_enabled"],
                  capacity_factor=capacity, drop_policy=gate_cfg["drop_policy"])

    full = upcycle_full(dense, n_experts, top_k, **kwargs)
    if tp == 1 and ep == 1:
        _ensure_absent(os.path.join(out_dir, "manifest.json"), args.force)
        ckpt_io.save_checkpoint(full, out_dir)
        print(f"wrote MoE checkpoint ({len(full.tensors)} tensors) to {out_dir}")
        written = full
    else:
        shards = [upcycle_shard(s, n_experts, top_k, **kwargs) for s in shard_dense(dense, tp, ep)]
        for s in shards:
            shard_dir = os.path.join(out_dir, f"rank_{s.rank:05d}")
            _ensure_absent(os.path.join(shard_dir, "manifest.json"), args.force)
            ckpt_io.save_shard(s, shard_dir)
        print(f"wrote {len(shards)} shards (tp={tp}, ep={ep}) to {out_dir}")
        written = gather_moe(shards)
    if verify:
        report = verify_equivalence(full, written)
        print(f"verify: {report}")
        if not report.equal:
            raise VerificationError(str(report))
    return EXIT_OK


def _format_groups(groups, world: int) -> str:
    if world <= 16:
        return " ".join("[" + ",".join(str(r) for r in g) + "]" for g in groups)
    return f"{len(groups)} groups of {len(groups[0])}"


def cmd_plan(args, cfg: dict) -> int:
    plan = build_plan(cfg)
    model = build_model(cfg)
    gate = build_gate(cfg)
    moe_layers = build_moe_layers(cfg, model)
    validate_plan(plan, model, gate)
    groups = build_groups(plan)
    intra = intra_node_report(groups)
    extras = cfg["plan"]

    print(f"plan ok: world={plan.world} node_size={plan.node_size}")
    print(f"  attention: tp={plan.tp} cp={plan.cp} dp={plan.dp} pp={plan.pp}")
    print(f"  moe:       etp={plan.etp} ep={plan.ep} edp={plan.edp} pp={plan.pp} "
          f"(dispatcher={plan.dispatcher}, vp={plan.vp})")
    print(f"{'kind':<6} {'intra-node':<10} groups")
    for kind in ("tp", "cp", "dp", "pp", "etp", "ep", "edp"):
        print(f"{kind:<6} {('yes' if intra[kind] else 'NO'):<10} {_format_groups(groups.groups[kind], plan.world)}")

    rows: list[tuple[str, object]] = [(f"intra_node.{k}", v) for k, v in intra.items()]
    counts = count_params(model, gate, moe_layers)
    tokens = int(extras["tokens_per_rank"])
    flops = forward_flops(model, gate, tokens, moe_layers=moe_layers)
    comm = comm_volume(plan, model, gate, tokens, int(extras["bytes_per_value"]))
    bubble = pipeline_bubble(plan.pp, plan.vp, int(extras["microbatches"]))
    mem = memory_estimate(plan, model, gate, moe_layers,
                          int(extras["bytes_per_param"]), float(extras["optimizer_multiplier"]))
    print(f"params: total={counts.total:,} active={counts.active:,}")
    print(f"forward flops ({tokens} tokens, 2P, attention term on): {flops:.4e}")
    print(f"comm bytes/layer/rank: moe_dispatch_combine={comm.moe_dispatch_combine:.3e} "
          f"attn_tp_allreduce={comm.attn_tp_allreduce:.3e} cp_kv_exchange={comm.cp_kv_exchange:.3e}")
    print(f"pipeline bubble (pp={plan.pp}, vp={plan.vp}, mb={extras['microbatches']}): {bubble:.4f}")
    print(f"memory/rank bytes: weights={mem.weights_bytes:.3e} grads={mem.grads_bytes:.3e} "
          f"optimizer={mem.optimizer_bytes:.3e} total={mem.total_bytes:.3e}")
    rows += [
        ("params.total", counts.total), ("params.active", counts.active),
        ("flops.forward", flops), ("flops.tokens", tokens),
        ("comm.moe_dispatch_combine", comm.moe_dispatch_combine),
        ("comm.attn_tp_allreduce", comm.attn_tp_allreduce),
        ("comm.cp_kv_exchange", comm.cp_kv_exchange),
        ("pipeline.bubble", bubble),
        ("memory.weights", mem.weights_bytes), ("memory.grads", mem.grads_bytes),
        ("memory.optimizer", mem.optimizer_bytes), ("memory.total", mem.total_bytes),
    ]

    if args.out:
        report_path = os.path.join(args.out, "report.csv")
        os.makedirs(args.out, exist_ok=True)
        _ensure_absent(report_path, args.force)
        _write_report_csv(report_path, rows)
        print(f"wrote {report_path}")
    else:
        _write_report_csv(None, rows)

    if args.check_folding:
        kinds = [k.strip() for k in args.check_folding.split(",") if k.strip()]
        for kind in kinds:
            if kind not in intra:
                raise ConfigError(f"--check-folding: unknown group kind {kind!r} "
                                  f"(choose from {sorted(intra)})")
            if not intra[kind]:
                raise FoldingError(f"group kind {kind!r} spans nodes "
                                   f"(node_size={plan.node_size})")
        print(f"folding check passed for: {', '.join(kinds)}")
    return EXIT_OK


def _load_or_init_model(cfg: dict, seeds: dict, checkpoint_path: str | None):
    if checkpoint_path:
        _check_input_path(checkpoint_path, "train checkpoint")
        return ckpt_io.load_checkpoint(checkpoint_path)
    model = build_model(cfg)
    dense = init_dense(model, seeds["model"])
    gate = build_gate(cfg)
    if gate is None:
        return dense
    return upcycle_full(dense, gate.n_experts, gate.top_k, build_moe_layers(cfg, model),
                        router_seed=seeds["router"], router_type=gate.router_type,
                        noise_enabled=gate.noise_enabled, capacity_factor=gate.capacity_factor,
                        drop_policy=gate.drop_policy)


def cmd_train(args, cfg: dict) -> int:
    seeds = effective_seeds(cfg)
    out_dir = _require_out(args)
    tc = build_train_config(cfg, seeds)
    if args.steps is not None:
        tc = replace(tc, steps=args.steps)
    ckpt = _load_or_init_model(cfg, seeds, cfg["train"]["checkpoint"])

    os.makedirs(out_dir, exist_ok=True)
    outputs = [os.path.join(out_dir, n) for n in
               ("metrics.csv", "loss_curve.png", "drop_rate.png", "lr.png", "model")]
    is_moe = isinstance(ckpt, MoECheckpoint)
    if is_moe:
        outputs.append(os.path.join(out_dir, "routing_stats.csv"))
    for p in outputs:
        _ensure_absent(p, args.force)

    metrics = train(ckpt, tc, run_id=args.run_id)
    metrics.write_metrics_csv(os.path.join(out_dir, "metrics.csv"))
    if is_moe:
        metrics.write_routing_csv(os.path.join(out_dir, "routing_stats.csv"), ckpt.gate.n_experts)
    figures.save_loss_figure({metrics.run_id: metrics}, os.path.join(out_dir, "loss_curve.png"))
    figures.save_drop_rate_figure({metrics.run_id: metrics}, os.path.join(out_dir, "drop_rate.png"))
    figures.save_lr_figure(metrics, os.path.join(out_dir, "lr.png"))
    ckpt_io.save_checkpoint(ckpt, os.path.join(out_dir, "model"))
    print(f"trained {tc.steps} steps; final loss {metrics.loss[-1]:.4f}; outputs in {out_dir}")
    return EXIT_OK


def cmd_eval(args, cfg: dict) -> int:
    seeds = effective_seeds(cfg)
    ev = cfg["eval"]
    path = _check_input_path(args.input or ev["checkpoint"], "eval checkpoint")
    ckpt = ckpt_io.load_checkpoint(path)
    blend = build_blend(cfg, seeds["data"])
    seqs = sample_eval_sequences(blend, ckpt.config.vocab, int(ev["sequences"]),
                                 min(int(ev["seq_len"]), ckpt.config.seq_len),
                                 branching=cfg["train"]["corpus_branching"])
    ppl = eval_perplexity(ckpt, seqs)
    print(f"perplexity: {ppl:.6f} ({ev['sequences']} sequences)")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report_path = os.path.join(args.out, "eval.csv")
        _ensure_absent(report_path, args.force)
        _write_report_csv(report_path, [("perplexity", ppl), ("sequences", ev["sequences"])])
    return EXIT_OK


def cmd_ablate(args, cfg: dict) -> int:
    seeds = effective_seeds(cfg)
    out_dir = _require_out(args)
    ab = cfg["ablate"]
    axis = args.axis or ab["axis"]
    values = ab["values"]
    if axis == "cf":
        values = [None if v in (None, "dropless") else float(v) for v in values]
    gate = build_gate(cfg)
    if gate is None:
        raise ConfigError("ablate needs a gate section (MoE runs)")
    model = build_model(cfg)
    acfg = AblationConfig(model=model, gate=gate, train=build_train_config(cfg, seeds),
                          moe_layers=build_moe_layers(cfg, model),
                          model_seed=seeds["model"], router_seed=seeds["router"])

    os.makedirs(out_dir, exist_ok=True)
    run_ids = [run_value_id(axis, v) for v in values]
    outputs = [os.path.join(out_dir, f"metrics_{rid}.csv") for rid in run_ids]
    outputs += [os.path.join(out_dir, "loss_curve.png"), os.path.join(out_dir, "drop_rate.png")]
    for p in outputs:
        _ensure_absent(p, args.force)

    runs = ablate(axis, values, acfg)
    for rid, metrics in runs.items():
        metrics.write_metrics_csv(os.path.join(out_dir, f"metrics_{rid}.csv"))
        print(f"{rid}: step-0 loss {metrics.loss[0]:.4f}, final loss {metrics.loss[-1]:.4f}, "
              f"mean drop rate {np.mean(metrics.drop_rate):.4f}")
    figures.save_loss_figure(runs, os.path.join(out_dir, "loss_curve.png"))
    figures.save_drop_rate_figure(runs, os.path.join(out_dir, "drop_rate.png"))
    print(f"outputs in {out_dir}")
    return EXIT_OK


def cmd_flops(args, cfg: dict) -> int:
    model = build_model(cfg)
    gate = build_gate(cfg)
    moe_layers = build_moe_layers(cfg, model)
    fl = cfg["flops"]
    tokens = args.tokens if args.tokens is not None else int(fl["tokens"])
    convention = fl["convention"]
    quad = bool(fl["attention_quadratic"])

    dense_counts = count_params(model)
    dense_flops = forward_flops(model, None, tokens, convention, quad)
    rows = [("dense.params.total", dense_counts.total),
            ("dense.params.active", dense_counts.active),
            ("dense.flops", dense_flops), ("tokens", tokens), ("convention", convention)]
    print(f"dense:  total={dense_counts.total:,} active={dense_counts.active:,} "
          f"flops({tokens} tokens)={dense_flops:.4e}")
    if gate is not None:
        moe_counts = count_params(model, gate, moe_layers)
        moe_flops = forward_flops(model, gate, tokens, convention, quad, moe_layers)
        ratio = moe_flops / dense_flops
        print(f"moe:    total={moe_counts.total:,} active={moe_counts.active:,} "
              f"flops({tokens} tokens)={moe_flops:.4e}")
        print(f"ratio:  flops(moe)/flops(dense) = {ratio:.4f}")
        rows += [("moe.params.total", moe_counts.total), ("moe.params.active", moe_counts.active),
                 ("moe.flops", moe_flops), ("flops.ratio", ratio)]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report_path = os.path.join(args.out, "report.csv")
        _ensure_absent(report_path, args.force)
        _write_report_csv(report_path, rows)
        print(f"wrote {report_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing / dispatch
# ---------------------------------------------------------------------------

_CONFIG_KEY_HELP = {
    "upcycle": "config keys: upcycle.{input,tp,ep,verify}, gate.{n_experts,top_k,router_type,"
               "noise_enabled,capacity_factor,drop_policy}, moe_layers, seed, seeds.router",
    "plan": "config keys: plan.{world,node_size,tp,cp,dp,pp,etp,ep,edp,vp,dispatcher,"
            "microbatches,tokens_per_rank,bytes_per_value,bytes_per_param,optimizer_multiplier}, "
            "model.*, gate.*, moe_layers",
    "train": "config keys: train.{steps,batch_size,seq_len,optimizer,aux_loss_coeff,"
             "corpus_branching,checkpoint}, schedule.{lr_max,lr_min,warmup_steps,total_steps}, "
             "blend.sources, model.*, gate.*, moe_layers, seed, seeds.*",
    "eval": "config keys: eval.{checkpoint,sequences,seq_len}, blend.sources, seed, seeds.data",
    "ablate": "config keys: ablate.{axis,values}, plus all `train` keys",
    "flops": "config keys: flops.{tokens,convention,attention_quadratic}, model.*, gate.*, moe_layers",
    "print-config": "prints the effective config (defaults + file + flags) as JSON",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON config file")
    p.add_argument("--seed", type=int, metavar="U64", help="override the base seed")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--out", metavar="DIR", help="output directory")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moefold",
                                     description="Dense-to-MoE upcycling, routing, and parallel-plan tooling")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("upcycle", help="convert a dense checkpoint to MoE (whole or per-rank)",
                       epilog=_CONFIG_KEY_HELP["upcycle"])
    _add_common(p)
    p.add_argument("--input", help="dense checkpoint dir (overrides upcycle.input)")
    p.add_argument("--experts", type=int, help="expert count (overrides gate.n_experts)")
    p.add_argument("--top-k", dest="top_k", type=int, help="active experts (overrides gate.top_k)")
    p.add_argument("--tp", type=int, help="tensor-parallel size for sharded upcycle")
    p.add_argument("--ep", type=int, help="expert-parallel size for sharded upcycle")
    p.add_argument("--verify", action="store_true",
                   help="gather the sharded result and compare bitwise with the whole-model path")
    p.set_defaults(func=cmd_upcycle)

    p = sub.add_parser("plan", help="validate a parallel plan and report groups/costs",
                       epilog=_CONFIG_KEY_HELP["plan"])
    _add_common(p)
    p.add_argument("--check-folding", metavar="KINDS",
                   help="comma-separated group kinds that must fit in one node (exit 5 otherwise)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="train a dense or MoE model on the synthetic blend",
                       epilog=_CONFIG_KEY_HELP["train"])
    _add_common(p)
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--run-id", default="run", help="run id written into the metrics CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on held-out synthetic data",
                       epilog=_CONFIG_KEY_HELP["eval"])
    _add_common(p)
    p.add_argument("--input", help="checkpoint dir (overrides eval.checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="one training run per axis value, shared seeds",
                       epilog=_CONFIG_KEY_HELP["ablate"])
    _add_common(p)
    p.add_argument("--axis", choices=["cf", "router_type"], help="override ablate.axis")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("flops", help="parameter and FLOP accounting for the configured model",
                       epilog=_CONFIG_KEY_HELP["flops"])
    _add_common(p)
    p.add_argument("--tokens", type=int, help="override flops.tokens")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("print-config", help="print the effective configuration as JSON",
                       epilog=_CONFIG_KEY_HELP["print-config"])
    _add_common(p)
    p.set_defaults(func=cmd_print_config)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        return args.func(args, cfg)
    except (ConfigError, InputError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationError as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except FoldingError as e:
        print(f"folding check failed: {e}", file=sys.stderr)
        return EXIT_FOLDING
    except NumericAbort as e:
        print(f"numeric abort: {e} (last good step {e.last_good_step})", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except MoefoldError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
