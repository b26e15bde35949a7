"""Dense tensors with reverse-mode autodiff.

Everything is float64. The op set is deliberately small: exactly what a
staggered decoder-only language model needs, plus a finite-difference
gradient checker. No broadcasting beyond row-wise bias addition; callers
reshape explicitly.
"""

from __future__ import annotations

import math
from collections import defaultdict
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

MASK_NEG = -1e30  # added to disallowed attention logits pre-softmax


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array node in an autodiff graph.

    Data is immutable by convention after creation; only ``grad`` is
    mutated (by ``backward``). Parents are ``(tensor, vjp)`` pairs where
    ``vjp`` maps the output adjoint to that parent's adjoint.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: list[tuple["Tensor", Callable[[np.ndarray], np.ndarray]]] = []
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


@contextmanager
def no_grad():
    """Skip graph recording; forward values are unchanged."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _out(data: np.ndarray, parents) -> Tensor:
    out = Tensor(data)
    if not _grad_enabled:
        return out
    recorded = [(p, vjp) for p, vjp in parents if p.requires_grad or p._parents]
    if recorded:
        out.requires_grad = True
        out._parents = recorded
    return out


# ---------------------------------------------------------------------------
# MAC accounting (multiply-accumulate counts of every matmul that runs)

class MacCounter:
    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)
        self.calls: dict[str, int] = defaultdict(int)
        self.partition = "other"

    def total(self) -> int:
        return sum(self.counts.values())


_active_counter: Optional[MacCounter] = None


@contextmanager
def count_macs(counter: MacCounter):
    global _active_counter
    prev = _active_counter
    _active_counter = counter
    try:
        yield counter
    finally:
        _active_counter = prev


@contextmanager
def mac_partition(label: str):
    """Attribute matmul MACs to ``label`` and count one block invocation."""
    counter = _active_counter
    if counter is None:
        yield
        return
    prev = counter.partition
    counter.partition = label
    counter.calls[label] += 1
    try:
        yield
    finally:
        counter.partition = prev


# ---------------------------------------------------------------------------
# Primitive ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    if _active_counter is not None:
        m, k = a.data.shape
        n = b.data.shape[1]
        _active_counter.counts[_active_counter.partition] += m * k * n
    data = a.data @ b.data
    return _out(data, [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)])


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _out(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: x is [n, d], b is [d]."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise ShapeError(f"add_bias shape mismatch: {x.data.shape} vs {b.data.shape}")
    return _out(x.data + b.data, [(x, lambda g: g), (b, lambda g: g.sum(axis=0))])


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _out(a.data * b.data, [(a, lambda g: g * b.data), (b, lambda g: g * a.data)])


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _out(a.data * c, [(a, lambda g: g * c)])


def scale_rows(x: Tensor, row_factors: np.ndarray) -> Tensor:
    """Multiply row i of [n, d] x by the constant row_factors[i]."""
    x = as_tensor(x)
    f = np.asarray(row_factors, dtype=np.float64).reshape(-1, 1)
    if f.shape[0] != x.data.shape[0]:
        raise ShapeError(f"scale_rows: {x.data.shape} vs {f.shape[0]} factors")
    return _out(x.data * f, [(x, lambda g: g * f)])


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _out(a.data.T.copy(), [(a, lambda g: g.T.copy())])


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return full

    return _out(a.data[start:stop].copy(), [(a, vjp)])


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return full

    return _out(a.data[:, start:stop].copy(), [(a, vjp)])


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)
    parents = []
    for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
        parents.append((p, lambda g, lo=lo, hi=hi: g[:, lo:hi].copy()))
    return _out(np.concatenate([p.data for p in parts], axis=1), parents)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Embedding lookup: rows of [V, d] table selected by ids."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"gather_rows: id out of range for table {table.data.shape}")

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return full

    return _out(table.data[idx].copy(), [(table, vjp)])


def index_1d(a: Tensor, i: int) -> Tensor:
    """Scalar element a[i] of a 1-d tensor."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError(f"index_1d expects 1-d input, got {a.data.shape}")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[i] = float(g)
        return full

    return _out(np.asarray(a.data[i]), [(a, vjp)])


def scalar_mul(x: Tensor, s: Tensor) -> Tensor:
    """Multiply x elementwise by a scalar tensor s (shape [])."""
    x, s = as_tensor(x), as_tensor(s)
    if s.data.ndim != 0:
        raise ShapeError(f"scalar_mul expects a scalar multiplier, got {s.data.shape}")
    sv = float(s.data)
    return _out(x.data * sv, [(x, lambda g: g * sv),
                              (s, lambda g: np.asarray((g * x.data).sum()))])


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _out(np.asarray(a.data.sum()), [(a, lambda g: np.full_like(a.data, float(g)))])


def softmax_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] < 1:
        raise ShapeError(f"softmax_rows needs a nonempty 2-d input, got {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    return _out(y, [(x, vjp)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm expects 2-d input, got {x.data.shape}")
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be [{d}]")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def vjp_x(g):
        gh = g * gain.data
        return inv * (gh - gh.mean(axis=1, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=1, keepdims=True))

    return _out(y, [(x, vjp_x),
                    (gain, lambda g: (g * xhat).sum(axis=0)),
                    (bias, lambda g: g.sum(axis=0))])


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU, applied elementwise."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
    dy = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
    return _out(y, [(x, lambda g: g * dy)])


def rope_rotate(x: Tensor, positions: Sequence[int], base: float = 10000.0) -> Tensor:
    """Rotate dim pairs (2t, 2t+1) of each row by pos * base^(-2t/d)."""
    x = as_tensor(x)
    n, d = x.data.shape
    if d % 2 != 0:
        raise ValueError(f"rope_rotate needs an even width, got {d}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (n,):
        raise ShapeError(f"rope_rotate: {n} rows but {pos.shape} positions")
    if pos.size and pos.min() < 0:
        raise ValueError("rope_rotate positions must be nonnegative")
    theta = base ** (-np.arange(d // 2, dtype=np.float64) * 2.0 / d)
    ang = pos[:, None] * theta[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x.data[:, 0::2], x.data[:, 1::2]
    y = np.empty_like(x.data)
    y[:, 0::2] = even * cos - odd * sin
    y[:, 1::2] = even * sin + odd * cos

    def vjp(g):
        ge, go = g[:, 0::2], g[:, 1::2]
        out = np.empty_like(g)
        out[:, 0::2] = ge * cos + go * sin
        out[:, 1::2] = -ge * sin + go * cos
        return out

    return _out(y, [(x, vjp)])


def cross_entropy_logits(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over positions of -log softmax(logits)[target], stable via LSE."""
    logits = as_tensor(logits)
    n, v = logits.data.shape
    idx = np.asarray(targets, dtype=np.int64)
    if idx.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but {idx.shape} targets")
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"cross_entropy: target id out of range [0, {v})")
    m = logits.data.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=1))
    loss = (lse - logits.data[np.arange(n), idx]).mean()
    probs = np.exp(logits.data - lse[:, None])

    def vjp(g):
        grad = probs.copy()
        grad[np.arange(n), idx] -= 1.0
        return grad * (float(g) / n)

    return _out(np.asarray(loss), [(logits, vjp)])


# ---------------------------------------------------------------------------
# Backward pass

def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss."""
    if loss.data.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if loss._done:
        raise RuntimeError("backward already called on this loss; rebuild the graph")
    loss._done = True

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    adjoint: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for node in reversed(order):
        g = adjoint.get(id(node))
        if g is None:
            continue
        for parent, vjp in node._parents:
            contrib = vjp(g)
            acc = adjoint.get(id(parent))
            adjoint[id(parent)] = contrib if acc is None else acc + contrib
        if node.requires_grad:
            node.grad = node.grad + g if node.grad is not None else np.array(g, copy=True)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-5, samples: int = 50, seed: int = 0) -> float:
    """Max relative error between autodiff grads and central differences.

    ``f`` rebuilds the scalar loss from the current contents of ``params``
    on every call; coordinates to probe are sampled deterministically.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    zero_grads(params)
    backward(f())
    rng = np.random.default_rng(seed)
    sizes = [p.data.size for p in params]
    total = sum(sizes)
    coords = rng.integers(0, total, size=samples)
    worst = 0.0
    for flat in coords:
        pi, off = 0, int(flat)
        while off >= sizes[pi]:
            off -= sizes[pi]
            pi += 1
        p = params[pi]
        orig = p.data.flat[off]
        p.data.flat[off] = orig + h
        up = float(f().data)
        p.data.flat[off] = orig - h
        down = float(f().data)
        p.data.flat[off] = orig
        numeric = (up - down) / (2 * h)
        analytic = p.grad.flat[off] if p.grad is not None else 0.0
        rel = abs(numeric - analytic) / (abs(analytic) + 1e-12)
        worst = max(worst, rel)
    return worst
