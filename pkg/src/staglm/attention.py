"""Attention primitives: masks, rotary embeddings, scaled dot-product
attention over an explicit allowed-set mask, multi-head blocks, and KV
caches with exact entry accounting.

Positions are 0-based internally. A query row whose mask allows no keys
produces a zero output vector, so the residual stream passes through a
cross-attention layer unchanged at the warm-up position.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class AttentionMask:
    """Bit matrix of allowed (query, key) pairs."""

    allowed: np.ndarray  # bool [query_len, key_len]

    @property
    def query_len(self) -> int:
        return self.allowed.shape[0]

    @property
    def key_len(self) -> int:
        return self.allowed.shape[1]

    def bias(self) -> np.ndarray:
        """0 where allowed, a large negative sentinel where not."""
        return np.where(self.allowed, 0.0, T.MASK_NEG)

    def row_any(self) -> np.ndarray:
        """1.0 for rows with at least one allowed key, else 0.0."""
        return self.allowed.any(axis=1).astype(np.float64)


def build_causal_mask(n: int) -> AttentionMask:
    if n < 1:
        raise ConfigError("causal mask needs n >= 1")
    i = np.arange(n)
    return AttentionMask(i[None, :] <= i[:, None])


def build_staggered_mask(nq: int, nk: int, window: Optional[int] = None) -> AttentionMask:
    """Query i may see keys strictly before it: j <= i-1, optionally only
    the last ``window`` of them. Row 0 is always empty."""
    if nq < 1 or nk < 1:
        raise ConfigError("staggered mask needs nq, nk >= 1")
    if window is not None and window < 1:
        raise ConfigError("cross-attention window must be >= 1")
    qi = np.arange(nq)[:, None]
    kj = np.arange(nk)[None, :]
    allowed = kj <= qi - 1
    if window is not None:
        allowed &= kj >= qi - window
    return AttentionMask(allowed)


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim % 2 != 0:
            raise ConfigError(f"rotary head_dim must be even, got {self.head_dim}")


def apply_rope(x: Tensor, positions: Sequence[int], params: RopeParams) -> Tensor:
    if T.as_tensor(x).data.shape[1] != params.head_dim:
        raise ConfigError(f"apply_rope: width {T.as_tensor(x).data.shape[1]} != head_dim {params.head_dim}")
    return T.rope_rotate(x, positions, base=params.base)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask, scale: float) -> Tensor:
    """Softmax over allowed keys only; empty rows yield zero vectors."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if mask.query_len != q.data.shape[0] or mask.key_len != k.data.shape[0]:
        raise T.ShapeError(
            f"mask {mask.allowed.shape} does not match q {q.data.shape} / k {k.data.shape}")
    scores = T.scale(T.matmul(q, T.transpose(k)), scale)
    scores = T.add(scores, Tensor(mask.bias()))
    probs = T.scale_rows(T.softmax_rows(scores), mask.row_any())
    return T.matmul(probs, v)


# ---------------------------------------------------------------------------
# KV caches

@dataclass
class KVCache:
    """One attention layer's cache: appended key/value rows (post-RoPE keys)."""

    kind: str  # "self" or "cross"
    keys: list[np.ndarray] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)

    @property
    def entry_count(self) -> int:
        return len(self.keys)

    def append(self, k_row: np.ndarray, v_row: np.ndarray) -> None:
        self.keys.append(np.array(k_row, copy=True))
        self.values.append(np.array(v_row, copy=True))

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        return np.vstack(self.keys), np.vstack(self.values)


@dataclass
class KVCacheSet:
    """All caches owned by one decode worker, keyed by (layer_name, kind)."""

    caches: dict[tuple[str, str], KVCache] = field(default_factory=dict)

    def get(self, layer: str, kind: str) -> KVCache:
        key = (layer, kind)
        if key not in self.caches:
            self.caches[key] = KVCache(kind=kind)
        return self.caches[key]

    def count_by_kind(self) -> dict[str, int]:
        out = {"self": 0, "cross": 0}
        for (_, kind) in self.caches:
            out[kind] += 1
        return out


def kv_cache_entry_count(caches: KVCacheSet | Sequence[KVCacheSet]) -> dict[str, int]:
    """Number of caches per kind, summed over one or more cache sets."""
    sets = [caches] if isinstance(caches, KVCacheSet) else list(caches)
    total = {"self": 0, "cross": 0}
    for s in sets:
        for kind, n in s.count_by_kind().items():
            total[kind] += n
    return total


# ---------------------------------------------------------------------------
# Multi-head block

def multihead_block(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                    n_heads: int, mask: AttentionMask, positions: Sequence[int],
                    rope: RopeParams, *, source: Optional[Tensor] = None,
                    source_positions: Optional[Sequence[int]] = None,
                    cache: Optional[KVCache] = None) -> Tensor:
    """Projection -> RoPE -> per-head masked attention -> output projection.

    Self mode (``source`` is None) projects keys/values from ``x``; cross
    mode projects them from ``source``. With a cache: in full-sequence mode
    (len(positions) == mask.query_len == rows of x over a fresh cache) all
    key/value rows are recorded; in incremental mode ``x`` is a single row
    and exactly one K,V entry is appended (self) or the cached rows are the
    key/value inputs (cross, where appending is the publisher's job).
    """
    x = T.as_tensor(x)
    d = x.data.shape[1]
    head_dim = d // n_heads
    if head_dim != rope.head_dim:
        raise ConfigError(f"head_dim {head_dim} != rope head_dim {rope.head_dim}")
    scale = 1.0 / np.sqrt(head_dim)
    q = T.matmul(x, wq)

    if source is None:
        kv_src = x
        kv_positions = positions
    else:
        kv_src = T.as_tensor(source)
        if source_positions is None:
            raise ConfigError("cross mode requires source_positions")
        kv_positions = source_positions

    k = T.matmul(kv_src, wk)
    v = T.matmul(kv_src, wv)
    k_heads, v_heads = [], []
    for h in range(n_heads):
        kh = T.slice_cols(k, h * head_dim, (h + 1) * head_dim)
        k_heads.append(apply_rope(kh, kv_positions, rope))
        v_heads.append(T.slice_cols(v, h * head_dim, (h + 1) * head_dim))

    if cache is not None:
        k_rows = np.concatenate([kh.data for kh in k_heads], axis=1)
        v_rows = np.concatenate([vh.data for vh in v_heads], axis=1)
        incremental = source is None and x.data.shape[0] == 1 and mask.query_len == 1
        if incremental:
            if cache.entry_count != positions[0]:
                raise RuntimeError(
                    f"self cache holds {cache.entry_count} entries but query is at "
                    f"position {positions[0]}")
            cache.append(k_rows[0], v_rows[0])
            k_all, v_all = cache.stacked()
            k_heads = [Tensor(k_all[:, h * head_dim:(h + 1) * head_dim])
                       for h in range(n_heads)]
            v_heads = [Tensor(v_all[:, h * head_dim:(h + 1) * head_dim])
                       for h in range(n_heads)]
        else:
            for r in range(k_rows.shape[0]):
                cache.append(k_rows[r], v_rows[r])

    outs = []
    for h in range(n_heads):
        qh = apply_rope(T.slice_cols(q, h * head_dim, (h + 1) * head_dim), positions, rope)
        outs.append(attention(qh, k_heads[h], v_heads[h], mask, scale))
    return T.matmul(T.concat_cols(outs), wo)


def cross_cache_append(source_row: np.ndarray, wk: Tensor, wv: Tensor,
                       n_heads: int, position: int, rope: RopeParams,
                       cache: KVCache) -> None:
    """Project one published source row and append its K,V to a cross cache.

    Runs at the per-step barrier, owned by the publishing side. Keys are
    stored post-RoPE at the source row's absolute position.
    """
    d = source_row.shape[-1]
    head_dim = d // n_heads
    row = Tensor(source_row.reshape(1, d))
    k = T.matmul(row, wk)
    v = T.matmul(row, wv)
    k_parts = []
    for h in range(n_heads):
        kh = T.slice_cols(k, h * head_dim, (h + 1) * head_dim)
        k_parts.append(apply_rope(kh, [position], rope).data)
    cache.append(np.concatenate(k_parts, axis=1)[0], v.data[0])


def multihead_cross_step(x_row: Tensor, wq: Tensor, wo: Tensor, n_heads: int,
                         position: int, rope: RopeParams, cache: KVCache,
                         window: Optional[int] = None) -> Tensor:
    """Incremental cross-attention for one query row against cached K/V.

    The cache must hold exactly the published source rows 0..position-1;
    the staggered mask row for ``position`` is applied (optionally
    windowed). An empty allowed set yields a zero row.
    """
    x_row = T.as_tensor(x_row)
    d = x_row.data.shape[1]
    head_dim = d // n_heads
    if cache.entry_count != position:
        raise RuntimeError(
            f"cross cache holds {cache.entry_count} entries but query is at "
            f"position {position}")
    scale = 1.0 / np.sqrt(head_dim)
    nk = cache.entry_count
    if nk == 0:
        return T.scale(T.matmul(x_row, wo), 0.0)
    mask = AttentionMask(build_staggered_mask(position + 1, nk, window).allowed[-1:, :])
    k_all, v_all = cache.stacked()
    q = T.matmul(x_row, wq)
    outs = []
    for h in range(n_heads):
        qh = apply_rope(T.slice_cols(q, h * head_dim, (h + 1) * head_dim), [position], rope)
        kh = Tensor(k_all[:, h * head_dim:(h + 1) * head_dim])
        vh = Tensor(v_all[:, h * head_dim:(h + 1) * head_dim])
        outs.append(attention(qh, kh, vh, mask, scale))
    return T.matmul(T.concat_cols(outs), wo)
