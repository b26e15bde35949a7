"""Self-check suites runnable from the CLI (`staglm verify`).

Each suite returns (name, passed, detail) rows; a suite passes iff every
row does. These are the same invariants the test suite asserts, packaged
for quick post-install verification.
"""

from __future__ import annotations

import numpy as np

from . import model as M
from . import perf as P
from . import tensor as T
from .attention import build_causal_mask, build_staggered_mask
from .config import ModelConfig
from .decode import SamplerSpec, generate
from .model import forward_teacher_forced, init_weights
from .tensor import Tensor

Check = tuple[str, bool, str]


def _cfg(p=2, l=4, shared=False, window=None, d=16, heads=2, ff=32) -> ModelConfig:
    return ModelConfig(vocab_size=61, d_model=d, n_heads=heads, d_ff=ff,
                       total_layers=l, stacks=p, weight_sharing=shared,
                       cross_window=window, max_seq_len=64, seed=7)


def suite_masks() -> list[Check]:
    out = []
    c = build_causal_mask(4)
    out.append(("causal allowed-pair count n(n+1)/2", int(c.allowed.sum()) == 10,
                f"got {int(c.allowed.sum())}"))
    s = build_staggered_mask(5, 5)
    out.append(("staggered diagonal never allowed",
                not np.diagonal(s.allowed).any(), ""))
    out.append(("staggered row 0 empty", not s.allowed[0].any(), ""))
    w1 = build_staggered_mask(6, 6, window=1)
    rows_ok = all(w1.allowed[i].sum() == (1 if i >= 1 else 0) for i in range(6))
    out.append(("window-1 rows have exactly one key", rows_ok, ""))
    w2 = build_staggered_mask(5, 5, window=2)
    out.append(("window-2 row 3 sees {1,2}",
                list(np.flatnonzero(w2.allowed[3])) == [1, 2], ""))
    return out


def suite_grad() -> list[Check]:
    out = []
    rng = np.random.default_rng(3)
    a = Tensor(rng.uniform(-2, 2, (3, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (3, 3)), requires_grad=True)
    err = T.finite_diff_check(lambda: T.sum_all(T.matmul(a, b)), [a, b],
                              h=1e-5, samples=18, seed=0)
    out.append(("matmul gradient vs finite differences", err < 1e-6, f"rel err {err:.2e}"))
    x = Tensor(np.array([[-2.0, -0.5, 0.5, 2.0]]), requires_grad=True)
    err = T.finite_diff_check(lambda: T.sum_all(T.gelu(x)), [x], h=1e-5, samples=4, seed=0)
    out.append(("gelu gradient vs finite differences", err < 1e-6, f"rel err {err:.2e}"))
    cfg = _cfg()
    W = init_weights(cfg)
    tokens = list(np.random.default_rng(0).integers(0, cfg.vocab_size, size=8))
    targets = list(np.random.default_rng(1).integers(0, cfg.vocab_size, size=8))
    params = [p for _, p in W.trainable_items()]

    def loss():
        return T.cross_entropy_logits(forward_teacher_forced(cfg, W, tokens).logits, targets)

    err = T.finite_diff_check(loss, params, h=1e-5, samples=40, seed=5)
    out.append(("model gradient vs finite differences", err < 1e-5, f"rel err {err:.2e}"))
    return out


EQUIV_MATRIX = [
    dict(p=1, l=4, shared=False, window=None),
    dict(p=2, l=4, shared=False, window=None),
    dict(p=2, l=4, shared=False, window=4),
    dict(p=2, l=4, shared=False, window=2),
    dict(p=2, l=4, shared=False, window=1),
    dict(p=2, l=2, shared=True, window=None),
    dict(p=2, l=2, shared=True, window=2),
    dict(p=2, l=2, shared=True, window=1),
    dict(p=3, l=6, shared=False, window=None),
    dict(p=4, l=4, shared=False, window=None),
]


def suite_equiv(n_tokens: int = 8) -> list[Check]:
    out = []
    for spec in EQUIV_MATRIX:
        cfg = _cfg(p=spec["p"], l=spec["l"], shared=spec["shared"], window=spec["window"])
        W = init_weights(cfg)
        prompt = list(np.random.default_rng(11).integers(0, cfg.vocab_size, size=6))
        par = generate(cfg, W, prompt, n_tokens, SamplerSpec(), mode="parallel")
        orc = generate(cfg, W, prompt, n_tokens, SamplerSpec(), mode="oracle")
        diff = max(float(np.abs(a - b).max())
                   for a, b in zip(par.step_logits, orc.step_logits))
        ok = par.ids == orc.ids and diff < 1e-10
        name = (f"parallel==oracle p={spec['p']} shared={spec['shared']} "
                f"window={spec['window']}")
        out.append((name, ok, f"ids match={par.ids == orc.ids}, logit diff {diff:.2e}"))
    return out


def suite_cache() -> list[Check]:
    out = []
    for l in (4, 8, 36):
        cfg = ModelConfig(total_layers=l, stacks=2, d_model=16, n_heads=2, d_ff=32)
        rep = P.kv_cache_report(cfg, context_len=128)
        ratios = {k: rep[k]["ratio_vs_baseline"] for k in rep}
        ok = (ratios["baseline"] == 1.0 and ratios["separate_p2"] == 1.5
              and ratios["shared_2pass"] == 3.0 and ratios["recurrent"] == 2.0)
        out.append((f"cache ratios {{1,1.5,3,2}} at l={l}", ok, str(ratios)))
    cfg = _cfg(p=2, l=4)
    W = init_weights(cfg)
    res = generate(cfg, W, [1, 2, 3], 4, SamplerSpec(), mode="parallel")
    sizes = res.cache_trajectory[-1]
    counts = P.variant_cache_counts(cfg)
    ok = (sizes["self_caches"] == counts["self"]
          and sizes["cross_caches"] == counts["cross"])
    out.append(("engine cache counts match report", ok, str(sizes)))
    return out


def suite_flops() -> list[Check]:
    out = []
    pp = P.PerfParams(e=10, m=6, a=2)
    cfg = ModelConfig(total_layers=8, stacks=2, d_model=16, n_heads=2, d_ff=32)
    forms = P.flops_closed_form(cfg, pp)
    ok = (forms["baseline"] == 84 and forms["stagformer_total"] == 116
          and forms["stagformer_ideal_latency"] == 52)
    out.append(("closed forms at e=10,m=6,a=2,l=8", ok, str(forms)))
    totals = []
    for l in (2, 4, 8):
        c = ModelConfig(total_layers=l, stacks=1, d_model=16, n_heads=2, d_ff=32,
                        vocab_size=61)
        counted = P.flops_counted(c, seq_len=6)
        totals.append(counted["partitions"]["self_attn"] + counted["partitions"]["ffn"])
    ok = totals[1] == 2 * totals[0] and totals[2] == 2 * totals[1]
    out.append(("counted MACs linear in depth", ok, str(totals)))
    cfg2 = ModelConfig(total_layers=4, stacks=2, d_model=16, n_heads=2, d_ff=32,
                       vocab_size=61)
    agg = P.paper_mode_aggregate(cfg2, pp)
    closed = P.flops_closed_form(cfg2, pp)["stagformer_total"]
    out.append(("paper-mode aggregation equals closed form", agg == closed,
                f"{agg} vs {closed}"))
    return out


SUITES = {
    "masks": suite_masks,
    "grad": suite_grad,
    "equiv": suite_equiv,
    "cache": suite_cache,
    "flops": suite_flops,
}


def run_suites(names: list[str]) -> tuple[list[Check], bool]:
    checks: list[Check] = []
    for name in names:
        checks.extend(SUITES[name]())
    return checks, all(ok for _, ok, _ in checks)
