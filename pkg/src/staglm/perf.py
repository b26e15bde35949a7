"""Cost accounting: closed-form FLOPs, instrumented MAC counting,
KV-cache memory reports, and a deterministic decode schedule simulator.

Symbols: per forward pass the embedding and unembedding cost e units
each, every layer costs m (MLP) + a (attention) units. A plain model of
depth l therefore costs 2e + l(m+a). Staggering over p stacks adds one
cross-attention layer to every non-first-stack layer; pricing each of
those at (m+a) ("paper" pricing) gives a total of 2e + 3l(m+a)/2 for
p=2 while the per-token critical path, with free communication, drops to
2e + l(m+a)/2.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig, validate_config
from .model import forward_teacher_forced, init_weights


@dataclass
class PerfParams:
    e: float  # embedding / unembedding cost, each
    m: float  # per-layer MLP cost
    a: float  # per-layer attention cost (per key in "measured" mode)
    comm: float = 0.0  # per-step cross-stack transfer cost
    cross_term: Optional[float] = None  # per cross layer; None = paper pricing (m + a)
    time_per_unit: float = 1.0

    def __post_init__(self):
        for name in ("e", "m", "a", "comm", "time_per_unit"):
            if getattr(self, name) < 0:
                raise ValueError(f"PerfParams.{name} must be >= 0")


def _executed_layers(cfg: ModelConfig) -> tuple[int, int]:
    """(total layer applications, cross-attention-bearing layer count)."""
    if cfg.weight_sharing:
        return cfg.stacks * cfg.total_layers, (cfg.stacks - 1) * cfg.total_layers
    return cfg.total_layers, cfg.total_layers * (cfg.stacks - 1) // cfg.stacks


def flops_closed_form(cfg: ModelConfig, params: PerfParams) -> dict[str, float]:
    """Exact arithmetic of the three headline cost formulas, in units."""
    validate_config(cfg)
    e, m, a = params.e, params.m, params.a
    layers, cross = _executed_layers(cfg)
    cross_price = (m + a) if params.cross_term is None else params.cross_term
    baseline = 2 * e + cfg.total_layers * (m + a)
    total = 2 * e + layers * (m + a) + cross * cross_price
    ideal = 2 * e + (layers / cfg.stacks) * (m + a)
    return {"baseline": baseline, "stagformer_total": total,
            "stagformer_ideal_latency": ideal}


def flops_counted(cfg: ModelConfig, seq_len: int, seed: int = 0) -> dict:
    """Exact MAC count of one teacher-forced forward, by partition."""
    validate_config(cfg)
    W = init_weights(cfg, seed)
    tokens = list(np.random.default_rng(seed).integers(0, cfg.vocab_size, size=seq_len))
    counter = T.MacCounter()
    with T.no_grad(), T.count_macs(counter):
        forward_teacher_forced(cfg, W, tokens)
    counts = {k: counter.counts.get(k, 0)
              for k in ("embed", "self_attn", "cross_attn", "ffn", "unembed")}
    calls = {k: counter.calls.get(k, 0) for k in counter.calls}
    return {"partitions": counts, "total": sum(counts.values()), "calls": calls}


def paper_mode_aggregate(cfg: ModelConfig, params: PerfParams,
                         counted: Optional[dict] = None) -> float:
    """Total units when each counted block is priced at the coarse symbols:
    e per embedding/unembedding pass, (m + a) per layer and per cross
    layer. Must equal ``flops_closed_form``'s total under paper pricing."""
    counted = counted or flops_counted(cfg, seq_len=4)
    calls = counted["calls"]
    n_layers = calls.get("self_attn", 0)
    n_cross = calls.get("cross_attn", 0)
    return 2 * params.e + (n_layers + n_cross) * (params.m + params.a)


# ---------------------------------------------------------------------------
# KV-cache memory

def variant_cache_counts(cfg: ModelConfig, decode_mode: str = "parallel") -> dict[str, int]:
    """Number of (layer, kind) caches a decode engine holds for cfg."""
    validate_config(cfg)
    if decode_mode == "recurrent":
        if not cfg.weight_sharing or cfg.stacks < 2:
            raise ValueError("recurrent decode requires shared weights and >= 2 passes")
        return {"self": cfg.total_layers, "cross": cfg.total_layers}
    layers, cross = _executed_layers(cfg)
    return {"self": layers, "cross": cross}


def kv_cache_report(cfg: ModelConfig, context_len: int) -> dict[str, dict]:
    """Cache counts, ratios vs a same-depth baseline, and bytes at
    ``context_len`` for the four canonical variants at cfg's depth."""
    validate_config(cfg)
    l = cfg.total_layers
    variants = {
        "baseline": {"self": l, "cross": 0},
        "separate_p2": {"self": l, "cross": l // 2},
        "shared_2pass": {"self": 2 * l, "cross": l},
        "recurrent": {"self": l, "cross": l},
    }
    bytes_per_cache = context_len * 2 * cfg.d_model * 8  # K and V rows, float64
    report = {}
    for name, counts in variants.items():
        total = counts["self"] + counts["cross"]
        report[name] = {
            "self_caches": counts["self"],
            "cross_caches": counts["cross"],
            "total_caches": total,
            "ratio_vs_baseline": total / l,
            "bytes": total * bytes_per_cache,
        }
    return report


# ---------------------------------------------------------------------------
# Schedule simulation

@dataclass
class ScheduleResult:
    variant: str
    l: int
    p: int
    window: Optional[int]
    prefill_len: int
    decode_len: int
    workers: int
    prefill_units: float
    per_token_units: list[float]
    total_units: float
    baseline_per_token_units: list[float]
    baseline_total_units: float
    speedup: float
    self_caches: int
    cross_caches: int
    busy: list[list[tuple[int, float, float]]] = field(default_factory=list)


def simulate_decode(cfg: ModelConfig, params: PerfParams, prefill_len: int,
                    decode_len: int, workers: Optional[int] = None,
                    mode: str = "paper") -> ScheduleResult:
    """Deterministic decode schedule under the abstract cost model.

    Per token: embed (e), all stacks in parallel across workers, unembed
    (e), plus the cross-stack transfer cost when p > 1. "paper" mode
    treats attention cost as context-independent; "measured" mode scales
    it linearly with context length. Fewer workers than stacks
    time-multiplexes stacks (reported, not an error).
    """
    validate_config(cfg)
    if mode not in ("paper", "measured"):
        raise ValueError(f"unknown simulation mode: {mode}")
    if decode_len < 1:
        raise ValueError("decode_len must be >= 1")
    p = cfg.stacks
    workers = p if workers is None else workers
    if workers < 1:
        raise ValueError("workers must be >= 1")
    layers, cross_layers = _executed_layers(cfg)
    cross_price = (params.m + params.a) if params.cross_term is None else params.cross_term
    rounds = -(-p // workers)  # stacks per worker when oversubscribed
    tpu = params.time_per_unit

    def attn_cost(ctx: int) -> float:
        return params.a if mode == "paper" else params.a * ctx

    def cross_cost(ctx: int) -> float:
        if params.cross_term is not None and mode == "measured":
            return params.cross_term * ctx
        return cross_price if mode == "paper" else cross_price * ctx

    per_token, baseline_per_token, busy = [], [], []
    for i in range(decode_len):
        ctx = prefill_len + i + 1
        # critical path: the busiest worker runs l/p layers, each carrying
        # a cross-attention sublayer on every non-first stack
        stack_units = (layers / p) * (params.m + attn_cost(ctx))
        if p > 1:
            stack_units += (layers / p) * cross_cost(ctx)
        step_units = (2 * params.e + rounds * stack_units) * tpu
        if p > 1:
            step_units += params.comm * tpu
        per_token.append(step_units)
        base_units = (2 * params.e + cfg.total_layers * (params.m + attn_cost(ctx))) * tpu
        baseline_per_token.append(base_units)
        t0 = sum(per_token[:-1])
        start = t0 + params.e * tpu
        busy.append([(k, start, start + rounds * stack_units * tpu) for k in range(min(p, workers))])

    prefill_units = (2 * params.e + layers * (params.m + attn_cost(prefill_len))
                     + cross_layers * cross_cost(prefill_len)) * tpu
    total = sum(per_token)
    baseline_total = sum(baseline_per_token)
    caches = variant_cache_counts(cfg)
    return ScheduleResult(
        variant=_variant_name(cfg), l=cfg.total_layers, p=p, window=cfg.cross_window,
        prefill_len=prefill_len, decode_len=decode_len, workers=workers,
        prefill_units=prefill_units, per_token_units=per_token, total_units=total,
        baseline_per_token_units=baseline_per_token, baseline_total_units=baseline_total,
        speedup=baseline_total / total, self_caches=caches["self"],
        cross_caches=caches["cross"], busy=busy)


def _variant_name(cfg: ModelConfig) -> str:
    if cfg.stacks == 1:
        return "baseline"
    kind = "shared" if cfg.weight_sharing else "separate"
    return f"{kind}_p{cfg.stacks}"


CSV_COLUMNS = ["variant", "l", "p", "window", "prefill", "decode",
               "per_token_units", "total_units", "speedup",
               "self_caches", "cross_caches"]


def emit_report(results: list[ScheduleResult], csv_path: Optional[str] = None,
                json_path: Optional[str] = None) -> str:
    """Render results as CSV (stable column order); optionally write CSV
    and a JSON summary to disk. Returns the CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in results:
        mean_pt = sum(r.per_token_units) / len(r.per_token_units)
        writer.writerow([r.variant, r.l, r.p,
                         "" if r.window is None else r.window,
                         r.prefill_len, r.decode_len,
                         repr(mean_pt), repr(r.total_units), repr(r.speedup),
                         r.self_caches, r.cross_caches])
    text = buf.getvalue()
    if csv_path:
        with open(csv_path, "w") as f:
            f.write(text)
    if json_path:
        summary = [{k: v for k, v in asdict(r).items() if k != "busy"} for r in results]
        with open(json_path, "w") as f:
            json.dump(summary, f, indent=2)
    return text
