"""Command-line entry point: train / generate / bench / verify / inspect.

Exit codes are a stable contract: 0 success, 2 usage or configuration
error, 3 runtime numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig, config_from_dict
from .decode import DecodeError, SamplerSpec, generate
from .model import CheckpointError, count_params, load_checkpoint
from .perf import PerfParams, emit_report, kv_cache_report, simulate_decode
from .train import (BOS, Corpus, NonFiniteLossError, TrainHyper, detokenize, train)
from .verify import SUITES, run_suites

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class CliError(Exception):
    pass


def _apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise CliError(f"override must look like section.key=value: {item!r}")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = doc
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise CliError(f"unknown override section: {key!r}")
            node = node[part]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[parts[-1]] = value
    return doc


def _load_run_config(path: str, overrides: list[str]) -> tuple[ModelConfig, TrainHyper]:
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {path}")
    doc = json.loads(p.read_text())
    known = {"model", "train", "config_version"}
    unknown = set(doc) - known
    if unknown:
        raise CliError(f"unknown top-level config keys: {sorted(unknown)}")
    doc.setdefault("model", {})
    doc.setdefault("train", {})
    _apply_overrides(doc, overrides)
    cfg = config_from_dict(doc["model"])
    hyper_fields = set(TrainHyper.__dataclass_fields__)
    bad = set(doc["train"]) - hyper_fields
    if bad:
        raise CliError(f"unknown train config keys: {sorted(bad)}")
    return cfg, TrainHyper(**doc["train"])


def cmd_train(args) -> int:
    cfg, hyper = _load_run_config(args.config, args.set)
    corpus_path = Path(args.corpus)
    if not corpus_path.exists():
        raise CliError(f"corpus file not found: {args.corpus}")
    if args.steps < 1:
        raise CliError("--steps must be >= 1")
    corpus = Corpus.from_bytes(corpus_path.read_bytes())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log, ckpt = train(cfg, corpus, args.steps, hyper, str(out_dir / "run"))
    print(f"final loss {log.rows[-1]['loss']:.4f} after {args.steps} steps; "
          f"checkpoint at {ckpt}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.n < 1:
        raise CliError("--n must be >= 1")
    try:
        cfg, W = load_checkpoint(args.ckpt)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {args.ckpt}")
    if args.mode == "recurrent" and not cfg.weight_sharing:
        raise CliError("recurrent decoding needs a shared-weights checkpoint; "
                       "this one has separate stack weights")
    prompt = [BOS] + list(args.prompt.encode("utf-8"))
    sampler = (SamplerSpec("temperature", args.temperature, args.seed)
               if args.temperature is not None else SamplerSpec(seed=args.seed))
    result = generate(cfg, W, prompt, args.n, sampler, mode=args.mode)
    sys.stdout.buffer.write(detokenize(result.ids))
    sys.stdout.buffer.flush()
    side = {
        "mode": args.mode,
        "ids": result.ids,
        "step_seconds": result.step_seconds,
        "per_stack_seconds": result.per_stack_seconds,
        "cache_trajectory": result.cache_trajectory,
    }
    Path(args.timing_json).write_text(json.dumps(side, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg, _ = _load_run_config(args.config, args.set)
    params = PerfParams(e=args.e, m=args.m, a=args.a, comm=args.comm,
                        cross_term=args.cross_term)
    base_cfg = ModelConfig(**{**cfg.__dict__, "stacks": 1, "weight_sharing": False,
                              "cross_window": None})
    rows = [simulate_decode(base_cfg, params, args.prefill, args.decode, mode=args.mode)]
    if cfg.stacks > 1:
        rows.append(simulate_decode(cfg, params, args.prefill, args.decode,
                                    workers=args.workers, mode=args.mode))
    text = emit_report(rows, csv_path=args.csv_out, json_path=args.json_out)
    print(text, end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    checks, ok = run_suites(names)
    width = max(len(name) for name, _, _ in checks)
    for name, passed, detail in checks:
        status = "PASS" if passed else "FAIL"
        print(f"{name:<{width}}  {status}  {detail}")
    print(f"{'all suites' if ok else 'FAILURES'}: {sum(p for _, p, _ in checks)}"
          f"/{len(checks)} checks passed")
    return EXIT_OK if ok else 1


def cmd_inspect(args) -> int:
    try:
        cfg, W = load_checkpoint(args.ckpt)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {args.ckpt}")
    print(f"config: {cfg.to_json()}")
    print(f"parameters: {count_params(cfg)}")
    if cfg.stacks >= 2:
        print(f"alpha: {W['alpha'].data.tolist()}")
    report = kv_cache_report(cfg, args.context_len)
    print(f"kv cache report at context {args.context_len}:")
    for variant, row in report.items():
        print(f"  {variant}: self={row['self_caches']} cross={row['cross_caches']} "
              f"ratio={row['ratio_vs_baseline']:.2f} bytes={row['bytes']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="staglm",
        description="Staggered-execution transformer LM: train, decode, benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a byte corpus")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--corpus", required=True, help="raw byte/text corpus file")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. model.d_model=64")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate bytes from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--mode", choices=["parallel", "oracle", "recurrent"],
                   default="parallel")
    p.add_argument("--temperature", type=float, default=None,
                   help="sample with this temperature instead of greedy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timing-json", default="generation_timing.json")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="simulated latency benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--prefill", type=int, default=256)
    p.add_argument("--decode", type=int, default=64)
    p.add_argument("--e", type=float, default=1.0)
    p.add_argument("--m", type=float, default=1.0)
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--comm", type=float, default=0.0)
    p.add_argument("--cross-term", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--mode", choices=["paper", "measured"], default="paper")
    p.add_argument("--csv-out", default=None)
    p.add_argument("--json-out", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run self-check suites")
    p.add_argument("--suite", choices=[*SUITES, "all"], default="all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("inspect", help="describe a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--context-len", type=int, default=1024)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, DecodeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
