"""Incremental generation engines.

Three modes produce tokens from the same weights:

* ``parallel``  — prefill, then one worker per stack per step with a
  barrier per emitted token. Workers only ever see the previous stack's
  outputs up to the prior position (the one-step stagger).
* ``oracle``    — cache-free: re-runs the teacher-forced forward over the
  whole sequence every step. The correctness reference for everything.
* ``recurrent`` — shared-weights only: full multi-pass prefill, then a
  single pass per decoded token that cross-attends to the final
  activations of all prior tokens.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import (AttentionMask, KVCache, KVCacheSet, RopeParams,
                        build_staggered_mask, cross_cache_append,
                        kv_cache_entry_count, multihead_block, multihead_cross_step)
from .config import ModelConfig
from .model import (ModelWeights, base_prefix, cross_prefix, embed_tokens,
                    forward_teacher_forced, logits_from_outputs)
from .tensor import Tensor


class DecodeError(RuntimeError):
    pass


@dataclass
class SamplerSpec:
    mode: str = "greedy"  # "greedy" or "temperature"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "temperature"):
            raise ValueError(f"unknown sampler mode: {self.mode}")
        if self.mode == "temperature" and self.temperature <= 0:
            raise ValueError("temperature must be positive")


def sample_token(logits: np.ndarray, spec: SamplerSpec, rng: np.random.Generator) -> int:
    if spec.mode == "greedy":
        return int(np.argmax(logits))
    z = logits / spec.temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


class PublishedBuffer:
    """Per-stack final activations visible to the next stack.

    Reads are logged so the stagger can be audited: a reader at position i
    must never observe an entry at position >= i.
    """

    def __init__(self):
        self.entries: list[np.ndarray] = []
        self.access_log: list[tuple[int, int]] = []  # (reader_position, rows_seen)

    def __len__(self):
        return len(self.entries)

    def publish(self, row: np.ndarray) -> None:
        self.entries.append(np.array(row, copy=True))

    def read(self, reader_position: int) -> list[np.ndarray]:
        upto = min(reader_position, len(self.entries))
        self.access_log.append((reader_position, upto))
        return self.entries[:upto]


@dataclass
class StackState:
    caches: KVCacheSet
    published: PublishedBuffer


@dataclass
class DecodeState:
    mode: str  # "parallel", "oracle", or "recurrent"
    tokens: list[int]
    position: int  # number of processed positions
    last_logits: np.ndarray
    stacks: list[StackState] = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def cache_sizes(self) -> dict[str, int]:
        counts = kv_cache_entry_count([s.caches for s in self.stacks])
        entries = {"self": 0, "cross": 0}
        for s in self.stacks:
            for (_, kind), c in s.caches.caches.items():
                entries[kind] += c.entry_count
        return {"self_caches": counts["self"], "cross_caches": counts["cross"],
                "self_entries": entries["self"], "cross_entries": entries["cross"]}


# ---------------------------------------------------------------------------
# Prefill

def prefill(cfg: ModelConfig, W: ModelWeights, prompt_ids: Sequence[int],
            sampler: Optional[SamplerSpec] = None) -> DecodeState:
    """Sequential-over-stacks processing of the prompt; fills all caches
    and published buffers. Identical math to the teacher-forced forward."""
    prompt = list(prompt_ids)
    if len(prompt) < 1:
        raise DecodeError("empty prompt")
    if len(prompt) > cfg.max_seq_len:
        raise DecodeError(f"prompt length {len(prompt)} exceeds max_seq_len")
    sampler = sampler or SamplerSpec()
    with T.no_grad():
        cache_sets = [KVCacheSet() for _ in range(cfg.stacks)]
        trace = forward_teacher_forced(cfg, W, prompt, caches=cache_sets)
    stacks = []
    for k, caches in enumerate(cache_sets):
        buf = PublishedBuffer()
        for row in trace.stack_outputs[k]:
            buf.publish(row)
        stacks.append(StackState(caches=caches, published=buf))
    return DecodeState(mode="parallel", tokens=prompt, position=len(prompt),
                       last_logits=np.array(trace.logits.data[-1], copy=True),
                       stacks=stacks, rng=np.random.default_rng(sampler.seed))


# ---------------------------------------------------------------------------
# Parallel decode

def _stack_step(cfg: ModelConfig, W: ModelWeights, stack: int, state: DecodeState,
                token: int, pos: int) -> tuple[np.ndarray, float]:
    """One stack's work for one position. Reads only its own caches and the
    previous stack's cross caches/published rows up to pos-1."""
    t_start = time.perf_counter()
    rope = RopeParams(cfg.head_dim, cfg.rope_base)
    caches = state.stacks[stack - 1].caches
    if stack >= 2:
        # audited read of the staggered source (rows 0..pos-1 only)
        state.stacks[stack - 2].published.read(pos)
    x = embed_tokens(cfg, W, [token], [pos])
    full_mask = AttentionMask(np.ones((1, pos + 1), dtype=bool))
    for j in range(1, cfg.layers_per_stack + 1):
        bp = base_prefix(cfg, stack, j)
        h = T.layer_norm(x, W[f"{bp}.ln1.gain"], W[f"{bp}.ln1.bias"])
        a = multihead_block(h, W[f"{bp}.attn.wq"], W[f"{bp}.attn.wk"],
                            W[f"{bp}.attn.wv"], W[f"{bp}.attn.wo"],
                            cfg.n_heads, full_mask, [pos], rope,
                            cache=caches.get(f"stack{stack}.layer{j}", "self"))
        x = T.add(x, a)
        if stack >= 2:
            cp = cross_prefix(cfg, stack, j)
            hq = T.layer_norm(x, W[f"{cp}.lnx.gain"], W[f"{cp}.lnx.bias"])
            c = multihead_cross_step(hq, W[f"{cp}.cross.wq"], W[f"{cp}.cross.wo"],
                                     cfg.n_heads, pos, rope,
                                     caches.get(f"stack{stack}.layer{j}", "cross"),
                                     window=cfg.cross_window)
            x = T.add(x, c)
        h2 = T.layer_norm(x, W[f"{bp}.ln2.gain"], W[f"{bp}.ln2.bias"])
        u = T.gelu(T.matmul(h2, W[f"{bp}.ffn.w1"]))
        x = T.add(x, T.matmul(u, W[f"{bp}.ffn.w2"]))
    return np.array(x.data[0], copy=True), time.perf_counter() - t_start


def _publish(cfg: ModelConfig, W: ModelWeights, state: DecodeState,
             rows: list[np.ndarray], pos: int) -> None:
    """Barrier phase: publish each stack's position-pos activation and
    project it into every consumer layer's cross cache."""
    rope = RopeParams(cfg.head_dim, cfg.rope_base)
    for k in range(1, cfg.stacks + 1):
        state.stacks[k - 1].published.publish(rows[k - 1])
    for k in range(2, cfg.stacks + 1):
        src_row = rows[k - 2]
        caches = state.stacks[k - 1].caches
        for j in range(1, cfg.layers_per_stack + 1):
            cp = cross_prefix(cfg, k, j)
            hs = T.layer_norm(Tensor(src_row.reshape(1, -1)),
                              W[f"{cp}.lns.gain"], W[f"{cp}.lns.bias"])
            cross_cache_append(hs.data[0], W[f"{cp}.cross.wk"], W[f"{cp}.cross.wv"],
                               cfg.n_heads, pos, rope,
                               caches.get(f"stack{k}.layer{j}", "cross"))


def decode_step_parallel(state: DecodeState, cfg: ModelConfig, W: ModelWeights,
                         sampler: SamplerSpec) -> tuple[int, list[float]]:
    """Emit one token: sample the next id from the last logits, then run
    all stacks concurrently on its position and publish at the barrier."""
    if state.mode != "parallel":
        raise DecodeError(f"decode_step_parallel on a {state.mode} state")
    if state.position >= cfg.max_seq_len:
        raise DecodeError("max_seq_len exceeded")
    token = sample_token(state.last_logits, sampler, state.rng)
    pos = state.position
    state.tokens.append(token)
    with T.no_grad():
        if cfg.stacks == 1:
            results = [_stack_step(cfg, W, 1, state, token, pos)]
        else:
            with ThreadPoolExecutor(max_workers=cfg.stacks) as pool:
                futures = [pool.submit(_stack_step, cfg, W, k, state, token, pos)
                           for k in range(1, cfg.stacks + 1)]
                results = []
                for k, fut in enumerate(futures, start=1):
                    try:
                        results.append(fut.result())
                    except Exception as e:
                        raise DecodeError(f"worker for stack {k} failed: {e}") from e
        rows = [r for r, _ in results]
        timings = [t for _, t in results]
        _publish(cfg, W, state, rows, pos)
        outputs = [Tensor(r.reshape(1, -1)) for r in rows]
        logits = logits_from_outputs(cfg, W, outputs)
    state.last_logits = np.array(logits.data[0], copy=True)
    state.position += 1
    return token, timings


# ---------------------------------------------------------------------------
# Sequential oracle

def make_oracle_state(cfg: ModelConfig, W: ModelWeights, prompt_ids: Sequence[int],
                      sampler: Optional[SamplerSpec] = None) -> DecodeState:
    prompt = list(prompt_ids)
    if len(prompt) < 1:
        raise DecodeError("empty prompt")
    sampler = sampler or SamplerSpec()
    with T.no_grad():
        trace = forward_teacher_forced(cfg, W, prompt)
    return DecodeState(mode="oracle", tokens=prompt, position=len(prompt),
                       last_logits=np.array(trace.logits.data[-1], copy=True),
                       rng=np.random.default_rng(sampler.seed))


def decode_step_oracle(state: DecodeState, cfg: ModelConfig, W: ModelWeights,
                       sampler: SamplerSpec) -> int:
    """Cache-free reference: full teacher-forced recomputation per step."""
    if state.mode != "oracle":
        raise DecodeError(f"decode_step_oracle on a {state.mode} state")
    if state.position >= cfg.max_seq_len:
        raise DecodeError("max_seq_len exceeded")
    token = sample_token(state.last_logits, sampler, state.rng)
    state.tokens.append(token)
    with T.no_grad():
        trace = forward_teacher_forced(cfg, W, state.tokens)
    state.last_logits = np.array(trace.logits.data[-1], copy=True)
    state.position += 1
    return token


# ---------------------------------------------------------------------------
# Recurrent decoding (shared weights only)

def make_recurrent_state(cfg: ModelConfig, W: ModelWeights, prompt_ids: Sequence[int],
                         sampler: Optional[SamplerSpec] = None) -> DecodeState:
    """Full p-pass prefill, then keep only the last pass's self caches and
    its cross caches. No second self-cache set exists afterwards."""
    if not cfg.weight_sharing or cfg.stacks < 2:
        raise DecodeError("recurrent decoding requires a shared-weights model with >= 2 passes")
    prompt = list(prompt_ids)
    if len(prompt) < 1:
        raise DecodeError("empty prompt")
    sampler = sampler or SamplerSpec()
    with T.no_grad():
        cache_sets = [KVCacheSet() for _ in range(cfg.stacks)]
        trace = forward_teacher_forced(cfg, W, prompt, caches=cache_sets)
    p = cfg.stacks
    merged = KVCacheSet()
    for j in range(1, cfg.layers_per_stack + 1):
        merged.caches[(f"layer{j}", "self")] = cache_sets[p - 1].caches[(f"stack{p}.layer{j}", "self")]
        merged.caches[(f"layer{j}", "cross")] = cache_sets[p - 1].caches[(f"stack{p}.layer{j}", "cross")]
    stack = StackState(caches=merged, published=PublishedBuffer())
    for row in trace.stack_outputs[p - 2]:
        stack.published.publish(row)  # last pass's cross source: prior pass finals
    return DecodeState(mode="recurrent", tokens=prompt, position=len(prompt),
                       last_logits=np.array(trace.logits.data[-1], copy=True),
                       stacks=[stack], rng=np.random.default_rng(sampler.seed))


def decode_step_recurrent(state: DecodeState, cfg: ModelConfig, W: ModelWeights,
                          sampler: SamplerSpec) -> int:
    """Single pass through the shared layers, cross-attending to the final
    activations of all prior tokens; publishes its own final activation."""
    if state.mode != "recurrent":
        raise DecodeError(f"decode_step_recurrent on a {state.mode} state")
    if state.position >= cfg.max_seq_len:
        raise DecodeError("max_seq_len exceeded")
    token = sample_token(state.last_logits, sampler, state.rng)
    pos = state.position
    state.tokens.append(token)
    p = cfg.stacks
    rope = RopeParams(cfg.head_dim, cfg.rope_base)
    caches = state.stacks[0].caches
    with T.no_grad():
        x = embed_tokens(cfg, W, [token], [pos])
        full_mask = AttentionMask(np.ones((1, pos + 1), dtype=bool))
        for j in range(1, cfg.layers_per_stack + 1):
            bp = f"layer{j}"
            cp = f"pass{p}.layer{j}"
            h = T.layer_norm(x, W[f"{bp}.ln1.gain"], W[f"{bp}.ln1.bias"])
            a = multihead_block(h, W[f"{bp}.attn.wq"], W[f"{bp}.attn.wk"],
                                W[f"{bp}.attn.wv"], W[f"{bp}.attn.wo"],
                                cfg.n_heads, full_mask, [pos], rope,
                                cache=caches.get(bp, "self"))
            x = T.add(x, a)
            hq = T.layer_norm(x, W[f"{cp}.lnx.gain"], W[f"{cp}.lnx.bias"])
            c = multihead_cross_step(hq, W[f"{cp}.cross.wq"], W[f"{cp}.cross.wo"],
                                     cfg.n_heads, pos, rope, caches.get(bp, "cross"),
                                     window=cfg.cross_window)
            x = T.add(x, c)
            h2 = T.layer_norm(x, W[f"{bp}.ln2.gain"], W[f"{bp}.ln2.bias"])
            u = T.gelu(T.matmul(h2, W[f"{bp}.ffn.w1"]))
            x = T.add(x, T.matmul(u, W[f"{bp}.ffn.w2"]))
        final_row = np.array(x.data[0], copy=True)
        final = T.layer_norm(x, W["final_ln.gain"], W["final_ln.bias"])
        logits = T.matmul(final, W["unembed"])
        # publish this token's final activation as future cross source
        state.stacks[0].published.publish(final_row)
        for j in range(1, cfg.layers_per_stack + 1):
            cp = f"pass{p}.layer{j}"
            hs = T.layer_norm(Tensor(final_row.reshape(1, -1)),
                              W[f"{cp}.lns.gain"], W[f"{cp}.lns.bias"])
            cross_cache_append(hs.data[0], W[f"{cp}.cross.wk"], W[f"{cp}.cross.wv"],
                               cfg.n_heads, pos, rope, caches.get(f"layer{j}", "cross"))
    state.last_logits = np.array(logits.data[0], copy=True)
    state.position += 1
    return token


def recurrent_reference_logits(cfg: ModelConfig, W: ModelWeights,
                               prompt_ids: Sequence[int],
                               generated_ids: Sequence[int]) -> np.ndarray:
    """Cache-free recomputation of the recurrent scheme from raw tokens.

    Rebuilds, for every generated position in turn: per-layer residual
    streams (prompt rows come from the last prefill pass, generated rows
    from the single recurrent pass) and the cross source (prior-pass finals
    for the prompt, recurrent finals for generated tokens). Returns the
    logits row of the last generated position.
    """
    if not cfg.weight_sharing or cfg.stacks < 2:
        raise DecodeError("recurrent decoding requires a shared-weights model with >= 2 passes")
    prompt = list(prompt_ids)
    gen = list(generated_ids)
    if not gen:
        raise DecodeError("no generated positions to evaluate")
    p = cfg.stacks
    nl = cfg.layers_per_stack
    rope = RopeParams(cfg.head_dim, cfg.rope_base)
    with T.no_grad():
        trace = forward_teacher_forced(cfg, W, prompt, collect_per_layer=True)
        # residual stream entering layer j of the last pass, per prompt row
        last_pass_layers = trace.per_layer[(p - 1) * nl:]
        t0_prompt = embed_tokens(cfg, W, prompt, np.arange(len(prompt))).data
        resid: list[list[np.ndarray]] = [[row for row in t0_prompt]]
        for j in range(nl):
            resid.append([row for row in last_pass_layers[j]])
        source: list[np.ndarray] = [row for row in trace.stack_outputs[p - 2]]

        logits_row = None
        for g, token in enumerate(gen):
            pos = len(prompt) + g
            x = embed_tokens(cfg, W, [token], [pos])
            resid[0].append(np.array(x.data[0], copy=True))
            for j in range(1, nl + 1):
                bp = f"layer{j}"
                cp = f"pass{p}.layer{j}"
                ctx = Tensor(np.vstack(resid[j - 1][: pos + 1]))
                h_ctx = T.layer_norm(ctx, W[f"{bp}.ln1.gain"], W[f"{bp}.ln1.bias"])
                mask = AttentionMask(np.ones((1, pos + 1), dtype=bool))
                hq = T.slice_rows(h_ctx, pos, pos + 1)
                a = multihead_block(hq, W[f"{bp}.attn.wq"], W[f"{bp}.attn.wk"],
                                    W[f"{bp}.attn.wv"], W[f"{bp}.attn.wo"],
                                    cfg.n_heads, mask, [pos], rope,
                                    source=h_ctx, source_positions=np.arange(pos + 1))
                x = T.add(x, a)
                hq2 = T.layer_norm(x, W[f"{cp}.lnx.gain"], W[f"{cp}.lnx.bias"])
                hs = T.layer_norm(Tensor(np.vstack(source[:pos])),
                                  W[f"{cp}.lns.gain"], W[f"{cp}.lns.bias"])
                smask = AttentionMask(
                    build_staggered_mask(pos + 1, pos, cfg.cross_window).allowed[-1:, :])
                c = multihead_block(hq2, W[f"{cp}.cross.wq"], W[f"{cp}.cross.wk"],
                                    W[f"{cp}.cross.wv"], W[f"{cp}.cross.wo"],
                                    cfg.n_heads, smask, [pos], rope,
                                    source=hs, source_positions=np.arange(pos))
                x = T.add(x, c)
                h2 = T.layer_norm(x, W[f"{bp}.ln2.gain"], W[f"{bp}.ln2.bias"])
                u = T.gelu(T.matmul(h2, W[f"{bp}.ffn.w1"]))
                x = T.add(x, T.matmul(u, W[f"{bp}.ffn.w2"]))
                resid[j].append(np.array(x.data[0], copy=True))
            source.append(np.array(x.data[0], copy=True))
            final = T.layer_norm(x, W["final_ln.gain"], W["final_ln.bias"])
            logits_row = T.matmul(final, W["unembed"]).data[0]
    return np.array(logits_row, copy=True)


# ---------------------------------------------------------------------------
# Generation driver

@dataclass
class GenerateResult:
    ids: list[int]
    step_seconds: list[float]
    per_stack_seconds: list[list[float]]
    cache_trajectory: list[dict[str, int]]
    step_logits: list[np.ndarray]


def generate(cfg: ModelConfig, W: ModelWeights, prompt_ids: Sequence[int],
             n_tokens: int, sampler: Optional[SamplerSpec] = None,
             mode: str = "parallel") -> GenerateResult:
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    sampler = sampler or SamplerSpec()
    if mode == "parallel":
        state = prefill(cfg, W, prompt_ids, sampler)
        step = lambda: decode_step_parallel(state, cfg, W, sampler)
    elif mode == "oracle":
        state = make_oracle_state(cfg, W, prompt_ids, sampler)
        step = lambda: (decode_step_oracle(state, cfg, W, sampler), [])
    elif mode == "recurrent":
        state = make_recurrent_state(cfg, W, prompt_ids, sampler)
        step = lambda: (decode_step_recurrent(state, cfg, W, sampler), [])
    else:
        raise ValueError(f"unknown decode mode: {mode}")

    ids, times, stack_times, caches, logits = [], [], [], [], []
    for _ in range(n_tokens):
        t0 = time.perf_counter()
        token, per_stack = step()
        times.append(time.perf_counter() - t0)
        ids.append(token)
        stack_times.append(per_stack)
        caches.append(state.cache_sizes())
        logits.append(np.array(state.last_logits, copy=True))
    return GenerateResult(ids, times, stack_times, caches, logits)
