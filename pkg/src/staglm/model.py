"""Staggered-execution decoder-only language models.

Assembles the plain baseline (stacks=1) and every staggered variant:
separate or shared layer weights, optional local cross-attention window,
and an arbitrary stack count with learnable output mixing. The
teacher-forced full-sequence forward here is the ground truth that the
decode engine is checked against.

Structure per layer (pre-norm residual blocks):
    x += self_attention(ln(x))            causal mask, RoPE on q and k
    x += cross_attention(ln(x), ln(src))  staggered mask, stacks >= 2 only
    x += ffn(ln(x))                       gelu MLP
Stack k >= 2 consumes the previous stack's final activations, shifted one
position back; every stack starts from the same embedded input. The final
representation is an alpha-weighted sum of stack outputs, normalized once
and unembedded.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import (AttentionMask, KVCacheSet, RopeParams, build_causal_mask,
                        build_staggered_mask, multihead_block)
from .config import ModelConfig, config_from_dict, validate_config
from .tensor import Tensor

CHECKPOINT_VERSION = 1

BASE_LAYER_PARAMS = [
    ("ln1.gain", "ones"), ("ln1.bias", "zeros"),
    ("attn.wq", "proj"), ("attn.wk", "proj"), ("attn.wv", "proj"), ("attn.wo", "proj"),
    ("ln2.gain", "ones"), ("ln2.bias", "zeros"),
    ("ffn.w1", "ff_in"), ("ffn.w2", "ff_out"),
]

CROSS_LAYER_PARAMS = [
    ("lnx.gain", "ones"), ("lnx.bias", "zeros"),
    ("lns.gain", "ones"), ("lns.bias", "zeros"),
    ("cross.wq", "proj"), ("cross.wk", "proj"), ("cross.wv", "proj"), ("cross.wo", "proj"),
]

_SHAPES = {
    "ones": lambda cfg: (cfg.d_model,),
    "zeros": lambda cfg: (cfg.d_model,),
    "proj": lambda cfg: (cfg.d_model, cfg.d_model),
    "ff_in": lambda cfg: (cfg.d_model, cfg.d_ff),
    "ff_out": lambda cfg: (cfg.d_ff, cfg.d_model),
}


def base_prefix(cfg: ModelConfig, stack: int, layer: int) -> str:
    """Name prefix of the self-attention/ffn parameters of one layer.

    Shared-weights mode aliases every pass onto the same physical layers.
    """
    if cfg.weight_sharing:
        return f"layer{layer}"
    return f"stack{stack}.layer{layer}"


def cross_prefix(cfg: ModelConfig, stack: int, layer: int) -> str:
    """Name prefix of the pass-specific cross-attention parameters."""
    if cfg.weight_sharing:
        return f"pass{stack}.layer{layer}"
    return f"stack{stack}.layer{layer}"


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Deterministic (name, shape, kind) enumeration of all parameters."""
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("tok_emb", (cfg.vocab_size, cfg.d_model), "proj"),
        ("pos_emb", (cfg.max_seq_len, cfg.d_model), "proj"),
    ]
    h = cfg.layers_per_stack
    if cfg.weight_sharing:
        for j in range(1, h + 1):
            for name, kind in BASE_LAYER_PARAMS:
                specs.append((f"layer{j}.{name}", _SHAPES[kind](cfg), kind))
        for k in range(2, cfg.stacks + 1):
            for j in range(1, h + 1):
                for name, kind in CROSS_LAYER_PARAMS:
                    specs.append((f"pass{k}.layer{j}.{name}", _SHAPES[kind](cfg), kind))
    else:
        for k in range(1, cfg.stacks + 1):
            for j in range(1, h + 1):
                for name, kind in BASE_LAYER_PARAMS:
                    specs.append((f"stack{k}.layer{j}.{name}", _SHAPES[kind](cfg), kind))
                if k >= 2:
                    for name, kind in CROSS_LAYER_PARAMS:
                        specs.append((f"stack{k}.layer{j}.{name}", _SHAPES[kind](cfg), kind))
    specs.append(("final_ln.gain", (cfg.d_model,), "ones"))
    specs.append(("final_ln.bias", (cfg.d_model,), "zeros"))
    specs.append(("unembed", (cfg.d_model, cfg.vocab_size), "proj"))
    if cfg.stacks >= 2:
        specs.append(("alpha", (cfg.stacks,), "alpha"))
    return specs


def count_params(cfg: ModelConfig) -> int:
    validate_config(cfg)
    return sum(int(np.prod(shape)) for _, shape, _ in param_specs(cfg))


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class ModelWeights:
    """Named parameter tensors. Alpha mixing is trainable only for
    stacks > 2; for two stacks it stays frozen at (0, 1)."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, p in self.params.items():
            if name == "alpha" and self.cfg.stacks <= 2:
                continue
            out.append((name, p))
        return out


def init_weights(cfg: ModelConfig, seed: Optional[int] = None) -> ModelWeights:
    validate_config(cfg)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in param_specs(cfg):
        if kind == "ones":
            data = np.ones(shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        elif kind == "alpha":
            data = np.zeros(shape)
            data[-1] = 1.0
        else:
            data = _trunc_normal(rng, shape, 0.02)
        params[name] = Tensor(data, requires_grad=True)
    return ModelWeights(cfg, params)


@dataclass
class ForwardTrace:
    stack_outputs: list[np.ndarray]
    logits: Tensor
    per_layer: Optional[list[np.ndarray]] = None


def combine_stack_outputs(outputs: Sequence[Tensor], alpha: Tensor) -> Tensor:
    """Elementwise weighted sum of equal-shape stack outputs."""
    outputs = [T.as_tensor(o) for o in outputs]
    if len(outputs) != T.as_tensor(alpha).data.shape[0]:
        raise T.ShapeError(
            f"{len(outputs)} stack outputs but alpha has "
            f"{T.as_tensor(alpha).data.shape[0]} entries")
    shape0 = outputs[0].data.shape
    for o in outputs[1:]:
        if o.data.shape != shape0:
            raise T.ShapeError(f"stack output shape mismatch: {o.data.shape} vs {shape0}")
    acc = None
    for k, o in enumerate(outputs):
        term = T.scalar_mul(o, T.index_1d(alpha, k))
        acc = term if acc is None else T.add(acc, term)
    return acc


def _ffn(x: Tensor, W: ModelWeights, prefix: str) -> Tensor:
    h = T.layer_norm(x, W[f"{prefix}.ln2.gain"], W[f"{prefix}.ln2.bias"])
    u = T.gelu(T.matmul(h, W[f"{prefix}.ffn.w1"]))
    return T.add(x, T.matmul(u, W[f"{prefix}.ffn.w2"]))


def run_stack(cfg: ModelConfig, W: ModelWeights, stack: int, t0: Tensor,
              source: Optional[Tensor], positions: Sequence[int],
              causal: AttentionMask, staggered: Optional[AttentionMask],
              source_positions: Optional[Sequence[int]] = None,
              caches: Optional[KVCacheSet] = None,
              per_layer: Optional[list] = None) -> Tensor:
    """Full-sequence pass of one stack; optionally records KV caches."""
    rope = RopeParams(cfg.head_dim, cfg.rope_base)
    x = t0
    for j in range(1, cfg.layers_per_stack + 1):
        bp = base_prefix(cfg, stack, j)
        with T.mac_partition("self_attn"):
            h = T.layer_norm(x, W[f"{bp}.ln1.gain"], W[f"{bp}.ln1.bias"])
            cache = caches.get(f"stack{stack}.layer{j}", "self") if caches is not None else None
            a = multihead_block(h, W[f"{bp}.attn.wq"], W[f"{bp}.attn.wk"],
                                W[f"{bp}.attn.wv"], W[f"{bp}.attn.wo"],
                                cfg.n_heads, causal, positions, rope, cache=cache)
            x = T.add(x, a)
        if stack >= 2:
            cp = cross_prefix(cfg, stack, j)
            with T.mac_partition("cross_attn"):
                hq = T.layer_norm(x, W[f"{cp}.lnx.gain"], W[f"{cp}.lnx.bias"])
                hs = T.layer_norm(source, W[f"{cp}.lns.gain"], W[f"{cp}.lns.bias"])
                cache = caches.get(f"stack{stack}.layer{j}", "cross") if caches is not None else None
                c = multihead_block(hq, W[f"{cp}.cross.wq"], W[f"{cp}.cross.wk"],
                                    W[f"{cp}.cross.wv"], W[f"{cp}.cross.wo"],
                                    cfg.n_heads, staggered, positions, rope,
                                    source=hs, source_positions=source_positions,
                                    cache=cache)
                x = T.add(x, c)
        with T.mac_partition("ffn"):
            x = _ffn(x, W, bp)
        if per_layer is not None:
            per_layer.append(np.array(x.data, copy=True))
    return x


def embed_tokens(cfg: ModelConfig, W: ModelWeights, tokens: Sequence[int],
                 positions: Sequence[int]) -> Tensor:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
    with T.mac_partition("embed"):
        tok = T.gather_rows(W["tok_emb"], ids)
        pos = T.gather_rows(W["pos_emb"], positions)
        return T.add(tok, pos)


def logits_from_outputs(cfg: ModelConfig, W: ModelWeights,
                        outputs: Sequence[Tensor]) -> Tensor:
    if cfg.stacks >= 2:
        combined = combine_stack_outputs(outputs, W["alpha"])
    else:
        combined = outputs[0]
    with T.mac_partition("unembed"):
        final = T.layer_norm(combined, W["final_ln.gain"], W["final_ln.bias"])
        return T.matmul(final, W["unembed"])


def forward_teacher_forced(
        cfg: ModelConfig, W: ModelWeights, tokens: Sequence[int], *,
        source_perturb: Optional[Callable[[int, np.ndarray], np.ndarray]] = None,
        collect_per_layer: bool = False,
        caches: Optional[list[KVCacheSet]] = None) -> ForwardTrace:
    """Full-sequence training-style forward over all stacks.

    ``source_perturb(stack_index, activations)`` lets tests tamper with a
    stack's published output (detached from the graph) before the next
    stack and the output mixer consume it. ``caches`` (one KVCacheSet per
    stack) records KV entries, which is how prefill reuses this path.
    """
    n = len(tokens)
    if n < 1:
        raise ValueError("empty token sequence")
    if n > cfg.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    positions = np.arange(n)
    causal = build_causal_mask(n)
    staggered = build_staggered_mask(n, n, cfg.cross_window) if cfg.stacks >= 2 else None
    if staggered is not None:
        assert not np.diagonal(staggered.allowed).any(), \
            "staggered mask must never expose the query's own position"
    t0 = embed_tokens(cfg, W, tokens, positions)
    per_layer: Optional[list] = [] if collect_per_layer else None

    outputs: list[Tensor] = []
    source: Optional[Tensor] = None
    for k in range(1, cfg.stacks + 1):
        out = run_stack(cfg, W, k, t0, source, positions, causal, staggered,
                        source_positions=positions,
                        caches=caches[k - 1] if caches is not None else None,
                        per_layer=per_layer)
        if source_perturb is not None:
            out = Tensor(source_perturb(k, np.array(out.data, copy=True)))
        outputs.append(out)
        source = out
    logits = logits_from_outputs(cfg, W, outputs)
    return ForwardTrace([np.array(o.data, copy=True) for o in outputs], logits, per_layer)


# ---------------------------------------------------------------------------
# Checkpoint format: one JSON manifest line, then a raw little-endian
# float64 payload in manifest order.

def save_checkpoint(path: str, cfg: ModelConfig, W: ModelWeights) -> None:
    descriptors = []
    offset = 0
    blobs = []
    for name, p in W.params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        descriptors.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": json.loads(cfg.to_json()),
        "params": descriptors,
        "payload_bytes": offset,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest).encode("utf-8"))
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str) -> tuple[ModelConfig, ModelWeights]:
    with open(path, "rb") as f:
        header = f.readline()
        payload = f.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint manifest: {e}") from e
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version: {version}")
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"payload length {len(payload)} != declared {manifest['payload_bytes']}")
    cfg = config_from_dict(manifest["config"])
    params: dict[str, Tensor] = {}
    for desc in manifest["params"]:
        shape = tuple(desc["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = desc["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape)
        params[desc["name"]] = Tensor(np.array(arr), requires_grad=True)
    W = ModelWeights(cfg, params)
    expected = {name for name, _, _ in param_specs(cfg)}
    if set(params) != expected:
        raise CheckpointError("checkpoint parameter set does not match its config")
    return cfg, W
