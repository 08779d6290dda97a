"""Desk-scale training loop and ablation runners.

Data is synthetic: each corpus is a seeded first-order Markov chain over
the model vocabulary (a handful of likely successors per token plus
uniform smoothing), so runs need no external data and the loss has real
structure to learn. A weighted blend sampler picks the corpus for each
sequence.

The optimizer is adaptive-moment by default (plain SGD with momentum is a
flag), stepping every parameter including routers, with a warmup+cosine
learning-rate schedule. Everything is bitwise reproducible given the
seeds in the config.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, InputError, NumericAbort
from .model import ModelConfig, forward_with_stats, init_dense
from .moe import GateConfig, RoutingStats
from .rng import Rng
from .tensor import Tensor, cross_entropy, importance_penalty
from .upcycle import upcycle_full


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    lr_max: float
    lr_min: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not (0 < self.lr_min <= self.lr_max):
            raise ConfigError(f"need 0 < lr_min <= lr_max, got ({self.lr_min}, {self.lr_max})")
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ConfigError(f"need 0 <= warmup_steps < total_steps, got "
                              f"({self.warmup_steps}, {self.total_steps})")


def lr_at(step: int, s: Schedule) -> float:
    """Linear 0 -> lr_max over warmup, then cosine decay to lr_min.

    Endpoints are returned exactly: lr_at(warmup) == lr_max and
    lr_at(total) == lr_min, so the two branches meet without a jump.
    """
    if not (0 <= step <= s.total_steps):
        raise InputError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.lr_max * step / s.warmup_steps
    if step == s.warmup_steps:
        return s.lr_max
    if step == s.total_steps:
        return s.lr_min
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# data: blend sampler + Markov corpora
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlendSpec:
    sources: tuple[tuple[str, float], ...]
    seed: int = 0

    def __post_init__(self):
        if len(self.sources) < 1:
            raise ConfigError("blend needs at least one source")
        for name, w in self.sources:
            if not (w > 0 and math.isfinite(w)):
                raise ConfigError(f"blend weight for {name!r} must be positive and finite, got {w}")


class BlendSampler:
    """Deterministic i.i.d. categorical stream over corpus ids, p ∝ weights."""

    def __init__(self, spec: BlendSpec):
        self.spec = spec
        weights = np.array([w for _, w in spec.sources], dtype=np.float64)
        self._cum = np.cumsum(weights / weights.sum())
        self._rng = Rng(spec.seed, stream=0)

    def draw(self, n: int) -> np.ndarray:
        """Next n source indices from the stream."""
        u = self._rng.random(n)
        return np.searchsorted(self._cum, u, side="right")

    def draw_ids(self, n: int) -> list[str]:
        return [self.spec.sources[i][0] for i in self.draw(n)]


def blend_sampler(spec: BlendSpec) -> BlendSampler:
    return BlendSampler(spec)


class MarkovCorpus:
    """Seeded first-order Markov chain over the vocabulary.

    Each token has `branching` preferred successors; a step follows one of
    them with probability 0.95 and jumps uniformly otherwise, so the
    per-token entropy floor sits near ln(branching) and well below ln(vocab).
    """

    SMOOTHING = 0.05

    def __init__(self, corpus_index: int, vocab: int, seed: int, branching: int = 4,
                 sample_stream: int | None = None):
        structure = Rng(seed, stream=1_000 + corpus_index)
        self.vocab = vocab
        self.branching = branching
        self.successors = structure.integers(0, vocab, (vocab, branching))
        self._rng = Rng(seed, stream=2_000 + corpus_index if sample_stream is None else sample_stream)

    def sample(self, length: int) -> np.ndarray:
        mix = self._rng.random(length)
        branch = self._rng.integers(0, self.branching, length)
        uniform = self._rng.integers(0, self.vocab, length)
        out = np.empty(length, dtype=np.int64)
        out[0] = uniform[0]
        for i in range(1, length):
            if mix[i] < self.SMOOTHING:
                out[i] = uniform[i]
            else:
                out[i] = self.successors[out[i - 1], branch[i]]
        return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

OPTIMIZERS = ("adam", "sgd")


class _Optimizer:
    def __init__(self, kind: str, params: dict[str, Tensor], beta1=0.9, beta2=0.999,
                 eps=1e-8, momentum=0.9):
        if kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {kind!r}")
        self.kind = kind
        self.params = params
        self.beta1, self.beta2, self.eps, self.momentum = beta1, beta2, eps, momentum
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()} if kind == "adam" else None

    def step(self, lr: float) -> None:
        self.t += 1
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            if self.kind == "adam":
                m = self._m[name]
                v = self._v[name]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                mh = m / (1 - self.beta1 ** self.t)
                vh = v / (1 - self.beta2 ** self.t)
                p.data -= lr * mh / (np.sqrt(vh) + self.eps)
            else:
                buf = self._m[name]
                buf *= self.momentum
                buf += g
                p.data -= lr * buf


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int
    schedule: Schedule
    blend: BlendSpec
    batch_size: int = 32
    seq_len: int = 128
    optimizer: str = "adam"
    aux_loss_coeff: float = 0.0
    corpus_branching: int = 4
    noise_seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1 or self.seq_len < 2:
            raise ConfigError(f"need batch_size >= 1 and seq_len >= 2, got "
                              f"({self.batch_size}, {self.seq_len})")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


METRICS_HEADER = ["step", "run_id", "loss", "lr", "drop_rate", "load_entropy"]


@dataclass
class RunMetrics:
    run_id: str
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    drop_rate: list[float] = field(default_factory=list)
    load_entropy: list[float] = field(default_factory=list)
    layer_stats: list[list[RoutingStats]] = field(default_factory=list)

    def write_metrics_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRICS_HEADER)
            for i, step in enumerate(self.steps):
                w.writerow([step, self.run_id, repr(self.loss[i]), repr(self.lr[i]),
                            repr(self.drop_rate[i]), repr(self.load_entropy[i])])

    def write_routing_csv(self, path: str, n_experts: int) -> None:
        """One row per (step, layer): drop rate, assigned counts, gate mass."""
        header = (["step", "layer", "drop_rate"]
                  + [f"assigned_{e}" for e in range(n_experts)]
                  + [f"gate_mass_{e}" for e in range(n_experts)])
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for i, step in enumerate(self.steps):
                for layer, st in enumerate(self.layer_stats[i]):
                    w.writerow([step, layer, repr(st.drop_rate)]
                               + [int(a) for a in st.assigned]
                               + [repr(float(gm)) for gm in st.gate_mass])


def moving_average(values, window: int) -> np.ndarray:
    """Sliding-window mean; output length len(values) - window + 1."""
    v = np.asarray(values, dtype=np.float64)
    if window < 1 or window > v.shape[0]:
        raise InputError(f"window {window} outside [1, {v.shape[0]}]")
    c = np.concatenate([[0.0], np.cumsum(v)])
    return (c[window:] - c[:-window]) / window


def window_means(values, window: int) -> np.ndarray:
    """Means of consecutive non-overlapping windows (tail remainder ignored)."""
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[0] // window
    if n < 1:
        raise InputError(f"need at least {window} values, got {v.shape[0]}")
    return v[: n * window].reshape(n, window).mean(axis=1)


def _batch(corpora, sampler: BlendSampler, batch_size: int, seq_len: int) -> np.ndarray:
    picks = sampler.draw(batch_size)
    return np.stack([corpora[i].sample(seq_len + 1) for i in picks])


def train(ckpt, cfg: TrainConfig, run_id: str = "run") -> RunMetrics:
    """Train a dense or MoE checkpoint in place on the synthetic blend.

    Logs loss / lr / drop rate / expert-load entropy each step; raises
    NumericAbort (carrying the last good step) if the loss goes non-finite.
    """
    vocab = ckpt.config.vocab
    if cfg.seq_len > ckpt.config.seq_len:
        raise ConfigError(f"train seq_len {cfg.seq_len} exceeds model seq_len {ckpt.config.seq_len}")
    sampler = BlendSampler(cfg.blend)
    corpora = [MarkovCorpus(i, vocab, cfg.blend.seed, cfg.corpus_branching)
               for i in range(len(cfg.blend.sources))]
    params = ckpt.tensors
    opt = _Optimizer(cfg.optimizer, params)
    noise_on = getattr(ckpt, "gate", None) is not None and ckpt.gate.noise_enabled
    metrics = RunMetrics(run_id=run_id)

    for step in range(cfg.steps):
        tokens = _batch(corpora, sampler, cfg.batch_size, cfg.seq_len)
        inputs, targets = tokens[:, :-1], tokens[:, 1:].reshape(-1)
        rng = Rng(cfg.noise_seed, stream=step) if noise_on else None
        fwd = forward_with_stats(ckpt, inputs, rng=rng, training=True)
        loss = cross_entropy(fwd.logits, targets)
        if cfg.aux_loss_coeff > 0 and fwd.gates:
            for g in fwd.gates:
                loss = loss + (cfg.aux_loss_coeff / len(fwd.gates)) * importance_penalty(g)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise NumericAbort(f"non-finite loss at step {step}", last_good_step=step - 1)
        for p in params.values():
            p.zero_grad()
        loss.backward()
        lr = lr_at(min(step, cfg.schedule.total_steps), cfg.schedule)
        opt.step(lr)

        stats = fwd.stats
        total_slots = sum(s.total_slots for s in stats)
        dropped = sum(s.dropped for s in stats)
        metrics.steps.append(step)
        metrics.loss.append(loss_val)
        metrics.lr.append(lr)
        metrics.drop_rate.append(dropped / total_slots if total_slots else 0.0)
        metrics.load_entropy.append(float(np.mean([s.load_entropy for s in stats])) if stats else 0.0)
        metrics.layer_stats.append(stats)
    return metrics


def eval_perplexity(ckpt, sequences, batch_rows: int = 16) -> float:
    """exp(mean next-token NLL) over [n, seq] token sequences; noise off."""
    seqs = np.asarray(sequences, dtype=np.int64)
    if seqs.ndim == 1:
        seqs = seqs[None, :]
    if seqs.size == 0:
        raise InputError("eval_perplexity: empty data")
    total_nll = 0.0
    total_tokens = 0
    for start in range(0, seqs.shape[0], batch_rows):
        chunk = seqs[start:start + batch_rows]
        inputs, targets = chunk[:, :-1], chunk[:, 1:].reshape(-1)
        logits = forward_with_stats(ckpt, inputs, training=False).logits
        nll = float(cross_entropy(logits, targets).data)
        total_nll += nll * targets.shape[0]
        total_tokens += targets.shape[0]
    return math.exp(total_nll / total_tokens)


def sample_eval_sequences(blend: BlendSpec, vocab: int, n_sequences: int, seq_len: int,
                          branching: int = 4) -> np.ndarray:
    """Held-out sequences from the same corpus structures (fresh sample streams)."""
    sampler = BlendSampler(blend)
    corpora = [MarkovCorpus(i, vocab, blend.seed, branching, sample_stream=3_000 + i)
               for i in range(len(blend.sources))]
    picks = sampler.draw(n_sequences)
    return np.stack([corpora[i].sample(seq_len + 1) for i in picks])


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationConfig:
    model: ModelConfig
    gate: GateConfig
    train: TrainConfig
    moe_layers: tuple[int, ...] | None = None
    model_seed: int = 0
    router_seed: int = 1


ABLATION_AXES = ("cf", "router_type")


def run_value_id(axis: str, value) -> str:
    if axis == "cf":
        return "cf_dropless" if value is None else f"cf_{value:g}"
    return f"router_{value}"


def ablate(axis: str, values, cfg: AblationConfig) -> dict[str, RunMetrics]:
    """One full training run per axis value; shared model/data/router seeds.

    axis 'cf' varies the capacity factor (None = dropless), axis
    'router_type' varies the gate ordering. Returns run_id -> RunMetrics.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"ablation axis must be one of {ABLATION_AXES}, got {axis!r}")
    if not values:
        raise ConfigError("ablation needs at least one value")
    runs: dict[str, RunMetrics] = {}
    for value in values:
        if axis == "cf":
            gate = replace(cfg.gate, capacity_factor=value)
        else:
            gate = replace(cfg.gate, router_type=value)
        dense = init_dense(cfg.model, cfg.model_seed)
        moe = upcycle_full(dense, gate.n_experts, gate.top_k, cfg.moe_layers,
                           router_seed=cfg.router_seed, router_type=gate.router_type,
                           noise_enabled=gate.noise_enabled,
                           capacity_factor=gate.capacity_factor, drop_policy=gate.drop_policy)
        run_id = run_value_id(axis, value)
        runs[run_id] = train(moe, cfg.train, run_id=run_id)
    return runs
