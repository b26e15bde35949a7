"""Byte-level causal-LM training: tokenizer, batching, Adam, loop.

Vocabulary is 259 ids: raw bytes 0-255 plus BOS=256, EOS=257, PAD=258.
Training is single-worker and fully deterministic given the seeds; the
per-step batch stream is derived from (seed, step) so a resumed run sees
exactly the batches an uninterrupted run would.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig, validate_config
from .model import (ModelWeights, forward_teacher_forced, init_weights,
                    load_checkpoint, save_checkpoint)
from .tensor import Tensor

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259


def byte_tokenize(text: bytes) -> list[int]:
    return list(text)


def detokenize(ids: Sequence[int]) -> bytes:
    return bytes(i for i in ids if 0 <= i < 256)


@dataclass
class Corpus:
    ids: np.ndarray  # int64 token ids
    val_fraction: float = 0.02

    @classmethod
    def from_bytes(cls, raw: bytes, val_fraction: float = 0.02) -> "Corpus":
        return cls(np.asarray(byte_tokenize(raw), dtype=np.int64), val_fraction)

    @property
    def train_ids(self) -> np.ndarray:
        return self.ids[: self._split()]

    @property
    def val_ids(self) -> np.ndarray:
        return self.ids[self._split():]

    def _split(self) -> int:
        return len(self.ids) - int(len(self.ids) * self.val_fraction)


def sample_batch(ids: np.ndarray, seq_len: int, batch_size: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random windows; targets are inputs shifted by one. No window
    crosses the end of ``ids``."""
    if len(ids) < seq_len + 1:
        raise ValueError(f"corpus of {len(ids)} ids is shorter than seq_len+1={seq_len + 1}")
    starts = rng.integers(0, len(ids) - seq_len, size=batch_size)
    inputs = np.stack([ids[s: s + seq_len] for s in starts])
    targets = np.stack([ids[s + 1: s + seq_len + 1] for s in starts])
    return inputs, targets


def make_batches(corpus: Corpus, seq_len: int, batch_size: int,
                 seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Deterministic stream of (inputs [B,S], targets [B,S]); batch for
    step t is a pure function of (seed, t)."""
    step = 0
    while True:
        rng = np.random.default_rng((seed, step))
        yield sample_batch(corpus.train_ids, seq_len, batch_size, rng)
        step += 1


# ---------------------------------------------------------------------------
# Optimizer

@dataclass
class TrainHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = 1.0
    warmup_steps: int = 100
    seq_len: int = 256
    batch_size: int = 16
    seed: int = 0
    val_every: int = 50
    checkpoint_every: int = 100


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(W: ModelWeights, state: OptimizerState, hyper: TrainHyper,
              lr_override: Optional[float] = None) -> None:
    """Bias-corrected Adam with optional global-norm gradient clipping.
    Mutates parameter data and optimizer state in place."""
    items = W.trainable_items()
    for name, p in items:
        if p.grad is None:
            raise ValueError(f"missing gradient for trainable parameter {name}")
    grads = {name: p.grad for name, p in items}
    if hyper.clip_norm is not None:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > hyper.clip_norm:
            scale = hyper.clip_norm / norm
            grads = {name: g * scale for name, g in grads.items()}
    state.t += 1
    t = state.t
    lr = hyper.lr if lr_override is None else lr_override
    b1, b2 = hyper.beta1, hyper.beta2
    for name, p in items:
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1 - b1) * (g - m)
        v += (1 - b2) * (g * g - v)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + hyper.eps)


def warmup_lr(hyper: TrainHyper, step: int) -> float:
    """Linear warmup to hyper.lr over warmup_steps (step is 1-based)."""
    if hyper.warmup_steps <= 0 or step >= hyper.warmup_steps:
        return hyper.lr
    return hyper.lr * step / hyper.warmup_steps


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, step: int, tokens: int, loss: float,
               val_loss: Optional[float], seconds: float) -> None:
        if self.rows and step != self.rows[-1]["step"] + 1:
            raise ValueError("training log steps must be contiguous")
        self.rows.append({"step": step, "tokens": tokens, "loss": loss,
                          "val_loss": val_loss, "seconds": seconds})

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "tokens", "loss", "val_loss", "seconds"])
            for r in self.rows:
                writer.writerow([r["step"], r["tokens"], f"{r['loss']:.6f}",
                                 "" if r["val_loss"] is None else f"{r['val_loss']:.6f}",
                                 f"{r['seconds']:.3f}"])

    def smoothed_final_loss(self, window: int = 20) -> float:
        tail = [r["loss"] for r in self.rows[-window:]]
        return sum(tail) / len(tail)


class NonFiniteLossError(RuntimeError):
    pass


def batch_loss(cfg: ModelConfig, W: ModelWeights, inputs: np.ndarray,
               targets: np.ndarray) -> Tensor:
    """Mean over the batch of per-sequence mean cross-entropy, computed on
    the final combined logits only."""
    total = None
    for b in range(inputs.shape[0]):
        trace = forward_teacher_forced(cfg, W, list(inputs[b]))
        loss = T.cross_entropy_logits(trace.logits, list(targets[b]))
        total = loss if total is None else T.add(total, loss)
    return T.scale(total, 1.0 / inputs.shape[0])


def eval_loss(cfg: ModelConfig, W: ModelWeights, inputs: np.ndarray,
              targets: np.ndarray) -> float:
    with T.no_grad():
        return float(batch_loss(cfg, W, inputs, targets).data)


def save_optimizer_state(path: str, state: OptimizerState) -> None:
    blob = {"t": state.t,
            "m": {k: v.tolist() for k, v in state.m.items()},
            "v": {k: v.tolist() for k, v in state.v.items()}}
    with open(path, "w") as f:
        json.dump(blob, f)


def load_optimizer_state(path: str) -> OptimizerState:
    with open(path) as f:
        blob = json.load(f)
    return OptimizerState(
        m={k: np.asarray(v) for k, v in blob["m"].items()},
        v={k: np.asarray(v) for k, v in blob["v"].items()},
        t=blob["t"])


def train(cfg: ModelConfig, corpus: Corpus, steps: int, hyper: TrainHyper,
          out_prefix: str, resume_from: Optional[str] = None,
          start_step: int = 0, log: Optional[TrainLog] = None,
          opt_state: Optional[OptimizerState] = None) -> tuple[TrainLog, str]:
    """Run ``steps`` optimizer steps; writes ``<out_prefix>.ckpt``,
    ``<out_prefix>.opt.json`` and ``<out_prefix>.log.csv``. Returns the
    log and the checkpoint path."""
    validate_config(cfg)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if resume_from is not None:
        cfg, W = load_checkpoint(resume_from)
    else:
        W = init_weights(cfg)
    opt = opt_state or OptimizerState()
    log = log or TrainLog()
    ckpt_path = f"{out_prefix}.ckpt"
    opt_path = f"{out_prefix}.opt.json"

    val_rng = np.random.default_rng((hyper.seed, 999_983))  # distinct stream from batches
    val_ids = corpus.val_ids if len(corpus.val_ids) >= hyper.seq_len + 1 else corpus.train_ids
    val_batch = sample_batch(val_ids, hyper.seq_len,
                             min(hyper.batch_size, 4), val_rng)

    tokens_seen = start_step * hyper.batch_size * hyper.seq_len
    for step in range(start_step + 1, start_step + steps + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng((hyper.seed, step - 1))
        inputs, targets = sample_batch(corpus.train_ids, hyper.seq_len,
                                       hyper.batch_size, rng)
        loss = batch_loss(cfg, W, inputs, targets)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise NonFiniteLossError(
                f"non-finite loss at step {step} (batch seed ({hyper.seed}, {step - 1}))")
        T.zero_grads([p for _, p in W.trainable_items()])
        T.backward(loss)
        adam_step(W, opt, hyper, lr_override=warmup_lr(hyper, step))
        tokens_seen += hyper.batch_size * hyper.seq_len
        val = None
        if hyper.val_every and step % hyper.val_every == 0:
            val = eval_loss(cfg, W, *val_batch)
        log.append(step, tokens_seen, loss_val, val, time.perf_counter() - t0)
        if hyper.checkpoint_every and step % hyper.checkpoint_every == 0:
            save_checkpoint(ckpt_path, cfg, W)
            save_optimizer_state(opt_path, opt)
            log.to_csv(f"{out_prefix}.log.csv")
    save_checkpoint(ckpt_path, cfg, W)
    save_optimizer_state(opt_path, opt)
    log.to_csv(f"{out_prefix}.log.csv")
    return log, ckpt_path
