"""Reverse-mode autodiff over numpy arrays.

A `Tensor` wraps an ndarray plus an optional gradient buffer. Forward ops
build a tape (each result remembers its parents and a backward closure);
`Tensor.backward()` walks the tape in reverse topological order and
accumulates gradients. Default precision is float64 so finite-difference
oracles can run at tight tolerances; float32 is available for speed.

Masking convention: positions excluded from a softmax are carried as an
explicit boolean mask, never as floating -inf, so arithmetic stays NaN-free.

`count_macs()` instruments every matmul-class op with a multiply-accumulate
counter; the FLOPs calculator in `plan` is validated against it.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import GateError, InputError, ShapeError

DEFAULT_DTYPE = np.float64

# Active multiply-accumulate counters (see count_macs).
_MAC_COUNTERS: list["MacCounter"] = []


class MacCounter:
    """Accumulates multiply-accumulate counts from matmul-class ops."""

    def __init__(self):
        self.macs = 0


@contextmanager
def count_macs():
    """Context manager yielding a MacCounter fed by matmul and attention ops."""
    counter = MacCounter()
    _MAC_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTERS.remove(counter)


def _record_macs(n: int) -> None:
    for c in _MAC_COUNTERS:
        c.macs += n


class Tensor:
    """Dense array with a gradient slot and a backward tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Seed d(self)/d(self) = 1 and propagate; self must be scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order = _toposort(self)
        self._accum(np.ones_like(self.data))
        for node in order:
            if node._backward is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={'set' if self.grad is not None else 'none'})"


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order, iterative (graphs can be deep)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(-g)

    return Tensor(-a.data, _parents=(a,), _backward=backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; backward accumulates to both operands."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} x {b.data.shape}")
    m, k = a.data.shape
    n = b.data.shape[1]
    _record_macs(m * k * n)
    out_data = a.data @ b.data

    def backward(g):
        a._accum(g @ b.data.T)
        b._accum(a.data.T @ g)

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def silu(a: Tensor) -> Tensor:
    sig = _sigmoid(a.data)
    out_data = a.data * sig

    def backward(g):
        a._accum(g * sig * (1.0 + a.data * (1.0 - sig)))

    return Tensor(out_data, _parents=(a,), _backward=backward)


def softplus_t(a: Tensor) -> Tensor:
    """Elementwise log(1 + e^x), stable for large |x|."""
    out_data = _softplus(a.data)

    def backward(g):
        a._accum(g * _sigmoid(a.data))

    return Tensor(out_data, _parents=(a,), _backward=backward)


def softplus(x: float) -> float:
    """Scalar convenience wrapper around the stable softplus."""
    return float(_softplus(np.asarray(x, dtype=np.float64)))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.mean())

    def backward(g):
        a._accum(np.full_like(a.data, float(g) / n))

    return Tensor(out_data, _parents=(a,), _backward=backward)


def sum_all(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum())

    def backward(g):
        a._accum(np.full_like(a.data, float(g)))

    return Tensor(out_data, _parents=(a,), _backward=backward)


# ---------------------------------------------------------------------------
# softmax with masking
# ---------------------------------------------------------------------------

def softmax(v: Tensor | np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax over the last axis; masked positions map to exact 0.

    Accepts 1-D or 2-D input. -inf entries in the input are treated as
    masked; `mask` (True = keep) may name them explicitly instead. A row
    with nothing kept is an error.
    """
    t = v if isinstance(v, Tensor) else Tensor(v)
    x = t.data
    if x.ndim not in (1, 2):
        raise ShapeError(f"softmax expects 1-D or 2-D input, got shape {x.shape}")
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs at least one entry per row")
    keep = np.isfinite(x) if mask is None else (np.asarray(mask, dtype=bool) & np.isfinite(x))
    if keep.shape != x.shape:
        raise ShapeError(f"mask shape {keep.shape} != input shape {x.shape}")
    if not keep.any(axis=-1).all():
        raise GateError("softmax row with all entries masked")

    row_max = np.max(np.where(keep, x, -np.inf), axis=-1, keepdims=True)
    safe = np.where(keep, x, row_max)  # keeps exp() in range at masked slots
    e = np.where(keep, np.exp(safe - row_max), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    p = e / denom

    def backward(g):
        g_eff = g * keep
        dot = (p * g_eff).sum(axis=-1, keepdims=True)
        t._accum(np.where(keep, p * (g_eff - dot), 0.0))

    return Tensor(p, _parents=(t,), _backward=backward)


# ---------------------------------------------------------------------------
# normalization, embedding, loss
# ---------------------------------------------------------------------------

RMSNORM_EPS = 1e-5


def rmsnorm(x: Tensor, gain: Tensor, eps: float = RMSNORM_EPS) -> Tensor:
    """Row-wise RMS normalization with learned gain: g * x / rms(x)."""
    ms = (x.data * x.data).mean(axis=-1, keepdims=True) + eps
    r = ms ** -0.5
    out_data = x.data * r * gain.data

    def backward(g):
        h = x.data.shape[-1]
        gg = g * gain.data
        dot = (gg * x.data).sum(axis=-1, keepdims=True)
        x._accum(r * gg - (r ** 3 / h) * x.data * dot)
        gain._accum((g * x.data * r).reshape(-1, h).sum(axis=0))

    return Tensor(out_data, _parents=(x, gain), _backward=backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InputError(f"token id out of range [0, {vocab}): min={ids.min()}, max={ids.max()}")
    out_data = table.data[ids]

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return Tensor(out_data, _parents=(table,), _backward=backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token-level negative log-likelihood over rows of logits."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise InputError("cross_entropy: empty targets")
    if logits.data.ndim != 2 or targets.ndim != 1 or logits.data.shape[0] != targets.shape[0]:
        raise ShapeError(f"cross_entropy shapes disagree: logits {logits.data.shape}, targets {targets.shape}")
    vocab = logits.data.shape[1]
    if targets.min() < 0 or targets.max() >= vocab:
        raise InputError(f"target id out of range [0, {vocab})")
    n = targets.shape[0]
    x = logits.data
    row_max = x.max(axis=1, keepdims=True)
    e = np.exp(x - row_max)
    z = e.sum(axis=1, keepdims=True)
    logz = np.log(z) + row_max
    nll = logz[:, 0] - x[np.arange(n), targets]
    out_data = np.asarray(nll.mean())
    p = e / z

    def backward(g):
        grad = p.copy()
        grad[np.arange(n), targets] -= 1.0
        logits._accum(grad * (float(g) / n))

    return Tensor(out_data, _parents=(logits,), _backward=backward)


# ---------------------------------------------------------------------------
# gather / scatter / slicing
# ---------------------------------------------------------------------------

def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out_data = x.data[idx]

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, idx, g)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def put_rows(src: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Scatter rows of src into a zero tensor of n_rows rows (idx unique)."""
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.zeros((n_rows,) + src.data.shape[1:], dtype=src.data.dtype)
    out_data[idx] = src.data

    def backward(g):
        src._accum(g[idx])

    return Tensor(out_data, _parents=(src,), _backward=backward)


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    out_data = x.data[:, j0:j1]

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[:, j0:j1] += g

    return Tensor(out_data, _parents=(x,), _backward=backward)


# ---------------------------------------------------------------------------
# fused causal attention (GQA, optional rotary)
# ---------------------------------------------------------------------------

ROTARY_BASE = 10000.0


def _rotary_angles(seq_len: int, head_dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = ROTARY_BASE ** (-np.arange(0, half, dtype=dtype) * 2.0 / head_dim)
    ang = np.arange(seq_len, dtype=dtype)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def _apply_rotary(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, inverse: bool = False) -> np.ndarray:
    # x: [B, T, H, D]; rotate (even, odd) pairs by the per-position angle.
    s = -sin if inverse else sin
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    c = cos[None, :, None, :]
    sn = s[None, :, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * c - x2 * sn
    out[..., 1::2] = x1 * sn + x2 * c
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, n_kv_heads: int,
              seq_len: int, rotary: bool = False) -> Tensor:
    """Causal grouped-query attention over flattened [batch*seq, ...] inputs.

    q: [N, n_heads*d], k/v: [N, n_kv_heads*d] with N a multiple of seq_len;
    each seq_len block is one independent causally-masked sequence. Query
    head h attends to kv head h // (n_heads // n_kv_heads).
    """
    n_tok = q.data.shape[0]
    if n_tok % seq_len != 0:
        raise ShapeError(f"token count {n_tok} not a multiple of seq_len {seq_len}")
    if n_heads % n_kv_heads != 0:
        raise ShapeError(f"n_heads {n_heads} not divisible by n_kv_heads {n_kv_heads}")
    d = q.data.shape[1] // n_heads
    if q.data.shape[1] != n_heads * d or k.data.shape[1] != n_kv_heads * d or v.data.shape[1] != n_kv_heads * d:
        raise ShapeError(f"attention projections inconsistent: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}")
    b = n_tok // seq_len
    group = n_heads // n_kv_heads
    t = seq_len

    q4 = q.data.reshape(b, t, n_heads, d)
    k4 = k.data.reshape(b, t, n_kv_heads, d)
    v4 = v.data.reshape(b, t, n_kv_heads, d)
    if rotary:
        cos, sin = _rotary_angles(t, d, q.data.dtype)
        q4 = _apply_rotary(q4, cos, sin)
        k4 = _apply_rotary(k4, cos, sin)
    # [b, heads, t, d] layout so the contractions hit BLAS batched matmul
    qh = np.ascontiguousarray(q4.transpose(0, 2, 1, 3))
    kh = np.ascontiguousarray(np.repeat(k4, group, axis=2).transpose(0, 2, 1, 3))
    vh = np.ascontiguousarray(np.repeat(v4, group, axis=2).transpose(0, 2, 1, 3))

    scale = 1.0 / math.sqrt(d)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale  # [b, h, i, j]
    _record_macs(b * n_heads * t * t * d)
    causal = np.tril(np.ones((t, t), dtype=bool))
    row_max = np.max(np.where(causal, scores, -np.inf), axis=-1, keepdims=True)
    safe = np.where(causal, scores, row_max)
    e = np.where(causal, np.exp(safe - row_max), 0.0)
    w = e / e.sum(axis=-1, keepdims=True)
    out4 = np.matmul(w, vh)  # [b, h, i, d]
    _record_macs(b * n_heads * t * t * d)
    out_data = np.ascontiguousarray(out4.transpose(0, 2, 1, 3)).reshape(n_tok, n_heads * d)

    def backward(g):
        gh = g.reshape(b, t, n_heads, d).transpose(0, 2, 1, 3)
        dw = np.matmul(gh, vh.transpose(0, 1, 3, 2))
        dvh = np.matmul(w.transpose(0, 1, 3, 2), gh)
        dot = (w * dw).sum(axis=-1, keepdims=True)
        ds = w * (dw - dot)  # masked positions have w == 0
        dqh = np.matmul(ds, kh) * scale
        dkh = np.matmul(ds.transpose(0, 1, 3, 2), qh) * scale
        dq4 = dqh.transpose(0, 2, 1, 3)
        # undo the kv-head broadcast: sum gradients within each query-head group
        dk4 = dkh.transpose(0, 2, 1, 3).reshape(b, t, n_kv_heads, group, d).sum(axis=3)
        dv4 = dvh.transpose(0, 2, 1, 3).reshape(b, t, n_kv_heads, group, d).sum(axis=3)
        if rotary:
            dq4 = _apply_rotary(dq4, cos, sin, inverse=True)
            dk4 = _apply_rotary(dk4, cos, sin, inverse=True)
        q._accum(dq4.reshape(n_tok, n_heads * d))
        k._accum(dk4.reshape(n_tok, n_kv_heads * d))
        v._accum(dv4.reshape(n_tok, n_kv_heads * d))

    return Tensor(out_data, _parents=(q, k, v), _backward=backward)


# ---------------------------------------------------------------------------
# load-balance penalty (optional, off by default)
# ---------------------------------------------------------------------------

def importance_penalty(gates: Tensor) -> Tensor:
    """Squared coefficient of variation of per-expert gate mass.

    importance_e = sum_t gates[t, e]; penalty = var(importance) / mean^2.
    Zero when every expert receives equal mass.
    """
    imp = gates.data.sum(axis=0)
    n = imp.shape[0]
    mean = imp.mean()
    if mean <= 0:
        raise GateError("importance penalty needs positive total gate mass")
    var = ((imp - mean) ** 2).mean()
    out_data = np.asarray(var / mean**2)

    def backward(g):
        dimp = 2.0 * (imp - mean) / (n * mean**2) - 2.0 * var / (n * mean**3)
        gates._accum(float(g) * np.broadcast_to(dimp, gates.data.shape).copy())

    return Tensor(out_data, _parents=(gates,), _backward=backward)
