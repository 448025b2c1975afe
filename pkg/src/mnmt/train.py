"""Optimization loops: multilingual fine-tuning, MLM pretraining, averaging.

One optimizer step samples a direction per micro-batch (temperature-scheduled
multinomial over direction sizes), accumulates the gradient of the summed
label-smoothed cross-entropy over all micro-batches, divides by the total
number of target tokens, and applies a bias-corrected Adam update under a
linear-warmup / inverse-sqrt learning-rate schedule. The epoch index that
drives the temperature ramp advances every
ceil(total_pairs / (batch_size * accumulation)) steps.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import (MultilingualCorpus, SamplingSchedule, Vocabulary,
                     compute_sampling_probs, sample_batch, temperature_at_epoch,
                     tokenize)
from .errors import NonFiniteGradientError, UsageError
from .model import TransformerModel, decode, encode
from .tensor import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LRSchedule:
    peak_lr: float
    warmup_steps: int

    def validate(self) -> "LRSchedule":
        if self.peak_lr <= 0:
            raise UsageError("peak_lr must be positive")
        if self.warmup_steps < 1:
            raise UsageError("warmup_steps must be >= 1")
        return self


def lr_at_step(schedule: LRSchedule, step: int) -> float:
    """Linear ramp to peak over warmup, then peak * sqrt(warmup / step)."""
    if step < 1:
        raise UsageError("step index starts at 1")
    if step <= schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    return schedule.peak_lr * math.sqrt(schedule.warmup_steps / step)


class AdamState:
    """First/second moments plus the shared step counter."""

    def __init__(self, params: dict, beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for {name} at step {t}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        param.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def label_smoothed_loss(logits: Tensor, targets, pad_mask, epsilon: float) -> Tensor:
    """Mean label-smoothed cross-entropy over non-pad positions."""
    mask = ~np.asarray(pad_mask, dtype=bool)
    if not mask.any():
        raise UsageError("label_smoothed_loss: batch is entirely padding")
    return tt.label_smoothed_ce(logits, targets, mask, epsilon, reduction="mean")


@dataclass
class TrainConfig:
    max_steps: int
    batch_size: int = 32
    gradient_accumulation: int = 1
    label_smoothing: float = 0.1
    peak_lr: float = 3e-4
    warmup_steps: int = 4000
    checkpoint_interval: int = 500
    seed: int = 1
    schedule: SamplingSchedule = field(default_factory=SamplingSchedule)

    def validate(self) -> "TrainConfig":
        if self.max_steps < 1 or self.batch_size < 1:
            raise UsageError("max_steps and batch_size must be >= 1")
        if self.gradient_accumulation < 1:
            raise UsageError("gradient_accumulation must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise UsageError("label_smoothing must be in [0, 1)")
        if self.checkpoint_interval < 1:
            raise UsageError("checkpoint_interval must be >= 1")
        LRSchedule(self.peak_lr, self.warmup_steps).validate()
        self.schedule.validate()
        return self


def zero_grads(params: dict) -> None:
    for t in params.values():
        t.grad = None


def train_step(model: TransformerModel, params: dict, opt: AdamState,
               batches, lr: float, label_smoothing: float,
               dropout_rng=None, training: bool = True):
    """Apply one optimizer step over the given micro-batches.

    Gradients are accumulated from each micro-batch's summed loss and divided
    by the total target-token count, so k micro-batches of size b update the
    parameters exactly like one batch of size k*b.
    """
    zero_grads(params)
    total_tokens = 0
    total_loss = 0.0
    per_batch = []
    for batch in batches:
        with tt.Tape() as tape:
            enc = encode(model, batch.src, batch.src_pad, training, dropout_rng)
            dec = decode(model, batch.tgt_in, enc, training, dropout_rng)
            loss_sum = tt.label_smoothed_ce(
                dec.logits, batch.labels, batch.label_mask,
                label_smoothing, reduction="sum")
            tt.backward(tape, loss_sum)
        tokens = int(batch.label_mask.sum())
        total_tokens += tokens
        total_loss += loss_sum.item()
        per_batch.append((batch.direction, loss_sum.item() / tokens))
    grads = {name: tt.grad_of(t) / total_tokens for name, t in params.items()}
    adam_step(params, grads, opt, lr)
    return total_loss / total_tokens, per_batch


def steps_per_epoch(total_pairs: int, batch_size: int, accumulation: int) -> int:
    return max(1, math.ceil(total_pairs / (batch_size * accumulation)))


@dataclass
class TrainResult:
    checkpoint_paths: list
    metrics: list


class MetricsLog:
    """Newline-delimited JSON records, one per optimizer step."""

    def __init__(self, path=None):
        self.path = path
        self.records = []
        if path:
            os.makedirs(os.path.dirname(path), exist_ok=True)
            self._fh = open(path, "w", encoding="utf-8")
        else:
            self._fh = None

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _checkpoint_name(step: int) -> str:
    return f"step{step:07d}.ckpt"


def train(model: TransformerModel, corpus: MultilingualCorpus, vocab: Vocabulary,
          cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Fine-tune on multilingual parallel data with dynamic-temperature sampling."""
    cfg.validate()
    if len(vocab) != model.config.vocab_size:
        raise UsageError(
            f"vocabulary size {len(vocab)} != model vocab_size {model.config.vocab_size}")
    seed_seq = np.random.SeedSequence(cfg.seed)
    data_rng, dropout_rng = [np.random.default_rng(s) for s in seed_seq.spawn(2)]
    params = dict(model.named_tensors())
    opt = AdamState(params)
    lrs = LRSchedule(cfg.peak_lr, cfg.warmup_steps).validate()
    spe = steps_per_epoch(sum(corpus.sizes), cfg.batch_size, cfg.gradient_accumulation)

    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
    log = MetricsLog(os.path.join(out_dir, "logs", "metrics.jsonl") if out_dir else None)
    paths = []
    start = time.time()
    try:
        for step in range(1, cfg.max_steps + 1):
            epoch = (step - 1) // spe
            temp = temperature_at_epoch(cfg.schedule, epoch)
            q = compute_sampling_probs(corpus.sizes, temp)
            batches = [
                sample_batch(data_rng, corpus, q, cfg.batch_size, vocab,
                             model.config.max_positions)
                for _ in range(cfg.gradient_accumulation)
            ]
            lr = lr_at_step(lrs, step)
            loss, per_batch = train_step(
                model, params, opt, batches, lr, cfg.label_smoothing, dropout_rng)
            direction_losses = {}
            for direction, batch_loss in per_batch:
                direction_losses.setdefault(str(direction), []).append(batch_loss)
            log.append({
                "step": step,
                "epoch": epoch,
                "loss": loss,
                "direction_losses": {k: sum(v) / len(v)
                                     for k, v in direction_losses.items()},
                "lr": lr,
                "temperature": temp,
                "wall_time": time.time() - start,
            })
            if ckpt_dir and (step % cfg.checkpoint_interval == 0 or step == cfg.max_steps):
                path = os.path.join(ckpt_dir, _checkpoint_name(step))
                if not paths or paths[-1] != path:
                    save_checkpoint(model, path)
                    paths.append(path)
    finally:
        log.close()
    return TrainResult(checkpoint_paths=paths, metrics=log.records)


# ---------------------------------------------------------------------------
# Masked-LM pretraining
# ---------------------------------------------------------------------------

MLM_RATE = 0.15


def mask_tokens(ids: np.ndarray, pad_mask: np.ndarray, vocab: Vocabulary,
                rng: np.random.Generator, rate: float = MLM_RATE):
    """BERT-style corruption: select `rate` of the content positions, then
    replace 80% with <mask>, 10% with a random content token, 10% unchanged.
    Rows whose Bernoulli draw selects nothing get one forced position."""
    ids = np.asarray(ids)
    selectable = (~pad_mask) & (ids >= vocab.first_content_id)
    if not selectable.any(axis=1).all():
        raise UsageError("a row has no maskable position")
    selected = selectable & (rng.random(ids.shape) < rate)
    for row in np.flatnonzero(~selected.any(axis=1)):
        options = np.flatnonzero(selectable[row])
        selected[row, options[rng.integers(0, options.size)]] = True
    corrupted = ids.copy()
    roll = rng.random(ids.shape)
    corrupted[selected & (roll < 0.8)] = vocab.mask_id
    random_pos = selected & (roll >= 0.8) & (roll < 0.9)
    corrupted[random_pos] = rng.integers(
        vocab.first_content_id, len(vocab), size=int(random_pos.sum()))
    return corrupted, selected


def mlm_step(model: TransformerModel, ids, pad_mask, vocab: Vocabulary,
             rng: np.random.Generator, training: bool = True,
             dropout_rng=None, reduction: str = "mean"):
    """Masked-LM loss for one batch; the LM head is the tied embedding."""
    corrupted, selected = mask_tokens(ids, pad_mask, vocab, rng)
    enc = encode(model, corrupted, pad_mask, training, dropout_rng)
    logits = tt.matmul(enc.states, tt.transpose(model.tensor("tok_embed"), (1, 0)))
    loss = tt.label_smoothed_ce(logits, ids, selected, 0.0, reduction=reduction)
    return loss, selected


def _pack_mono(sentences, vocab, max_positions):
    rows = []
    for text in sentences:
        ids = tokenize(text, vocab)[:max_positions - 1]
        rows.append(ids + [vocab.eos_id])
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), vocab.pad_id, dtype=np.int64)
    pad = np.ones((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
        pad[i, :len(r)] = False
    return out, pad


def pretrain_mlm(model: TransformerModel, mono: dict, vocab: Vocabulary,
                 cfg: TrainConfig, out_dir=None) -> TrainResult:
    """MLM-pretrain the encoder on per-language monolingual sentence lists."""
    cfg.validate()
    langs = sorted(mono)
    sizes = [len(mono[lang]) for lang in langs]
    if any(s == 0 for s in sizes):
        raise UsageError("every language needs at least one monolingual sentence")
    seed_seq = np.random.SeedSequence(cfg.seed)
    data_rng, mask_rng, dropout_rng = [np.random.default_rng(s) for s in seed_seq.spawn(3)]
    params = dict(model.named_tensors())
    opt = AdamState(params)
    lrs = LRSchedule(cfg.peak_lr, cfg.warmup_steps).validate()
    lang_probs = np.asarray(sizes, dtype=np.float64) / sum(sizes)

    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
    log = MetricsLog(os.path.join(out_dir, "logs", "metrics.jsonl") if out_dir else None)
    paths = []
    start = time.time()
    try:
        for step in range(1, cfg.max_steps + 1):
            lang_idx = int(data_rng.choice(len(langs), p=lang_probs))
            sentences = mono[langs[lang_idx]]
            picks = data_rng.integers(0, len(sentences), size=cfg.batch_size)
            ids, pad = _pack_mono([sentences[i] for i in picks], vocab,
                                  model.config.max_positions)
            zero_grads(params)
            with tt.Tape() as tape:
                loss, selected = mlm_step(model, ids, pad, vocab, mask_rng,
                                          True, dropout_rng, reduction="sum")
                tt.backward(tape, loss)
            count = int(selected.sum())
            grads = {name: tt.grad_of(t) / count for name, t in params.items()}
            lr = lr_at_step(lrs, step)
            adam_step(params, grads, opt, lr)
            log.append({
                "step": step,
                "lang": langs[lang_idx],
                "loss": loss.item() / count,
                "lr": lr,
                "wall_time": time.time() - start,
            })
            if ckpt_dir and (step % cfg.checkpoint_interval == 0 or step == cfg.max_steps):
                path = os.path.join(ckpt_dir, _checkpoint_name(step))
                if not paths or paths[-1] != path:
                    save_checkpoint(model, path)
                    paths.append(path)
    finally:
        log.close()
    return TrainResult(checkpoint_paths=paths, metrics=log.records)


# ---------------------------------------------------------------------------
# Checkpoint averaging and back-translation
# ---------------------------------------------------------------------------

def average_checkpoints(paths) -> Checkpoint:
    """Elementwise mean of every tensor across checkpoints with equal directories."""
    if not paths:
        raise UsageError("need at least one checkpoint to average")
    loaded = [p if isinstance(p, Checkpoint) else load_checkpoint(p) for p in paths]
    first = loaded[0]
    for other in loaded[1:]:
        if other.directory() != first.directory() or other.config != first.config:
            raise UsageError("checkpoints do not share a shape table")
    averaged = {}
    for name, arr in first.tensors.items():
        acc = arr.astype(np.float64).copy()
        for other in loaded[1:]:
            acc += other.tensors[name]
        averaged[name] = (acc / len(loaded)).astype(arr.dtype)
    return Checkpoint(config=first.config, tensors=averaged)


def backtranslate(reverse_model: TransformerModel, mono_sentences, src_lang: str,
                  tgt_lang: str, vocab: Vocabulary, beam_params) -> tuple:
    """Synthesize (source, target) pairs for src->tgt from target-side text.

    `reverse_model` must translate tgt->src: each monolingual target sentence
    is decoded into a synthetic source. Empty hypotheses are dropped and
    counted rather than emitted.
    """
    from .evaluate import translate_corpus
    hyps = translate_corpus(reverse_model, mono_sentences, src_lang, vocab, beam_params)
    pairs = []
    dropped = 0
    for target_text, hyp in zip(mono_sentences, hyps):
        if not hyp.strip():
            dropped += 1
            continue
        pairs.append((hyp, target_text))
    return pairs, dropped


def write_parallel_tsv(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, t in pairs:
            fh.write(f"{s}\t{t}\n")
