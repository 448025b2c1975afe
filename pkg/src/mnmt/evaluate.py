"""Beam-search decoding and corpus BLEU.

Hypotheses are ranked by length-normalized score logprob / len^alpha, where
len counts the scored tokens (everything after <bos>, including <eos>). Ties
break deterministically toward the lexicographically smallest token sequence,
which prefers lower token ids and then shorter hypotheses. BLEU is the
corpus-level geometric mean of modified 1..4-gram precisions with exponential
smoothing (the k-th zero precision becomes 1/2^k) and the usual brevity
penalty exp(1 - ref_len / hyp_len) for short output.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .corpus import Vocabulary, detokenize, tokenize
from .errors import UsageError
from .model import EncodedBatch, TransformerModel, decode, encode


@dataclass(frozen=True)
class BeamParams:
    beam_size: int = 5
    length_penalty: float = 1.0
    max_decode_len: int = 64

    def validate(self) -> "BeamParams":
        if self.beam_size < 1:
            raise UsageError("beam_size must be >= 1")
        if self.length_penalty < 0:
            raise UsageError("length_penalty must be >= 0")
        if self.max_decode_len < 1:
            raise UsageError("max_decode_len must be >= 1")
        return self


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple          # <bos> ... (<eos> when finished)
    logprob: float
    normalized: float
    finished: bool

    @staticmethod
    def score(logprob: float, tokens, alpha: float) -> float:
        return logprob / (len(tokens) - 1) ** alpha

    @classmethod
    def make(cls, tokens, logprob, alpha, finished) -> "Hypothesis":
        return cls(tuple(tokens), logprob, cls.score(logprob, tokens, alpha), finished)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _last_logprobs(model, prefixes: np.ndarray, enc_states, enc_pad) -> np.ndarray:
    n = prefixes.shape[0]
    enc = EncodedBatch(
        states=tt.constant(np.broadcast_to(enc_states, (n,) + enc_states.shape[1:])),
        pad_mask=np.broadcast_to(enc_pad, (n,) + enc_pad.shape[1:]))
    result = decode(model, prefixes, enc)
    return log_softmax(result.logits.data[:, -1, :].astype(np.float64))


def beam_search_single(model: TransformerModel, enc_states, enc_pad,
                       vocab: Vocabulary, params: BeamParams) -> Hypothesis:
    """Best hypothesis for one encoded sentence.

    Standard beam expansion without cached decoder state: each step re-decodes
    the live prefixes as a batch. Beams ending in <eos> retire; an unfinished
    beam is pruned once enough hypotheses have finished and its best reachable
    normalized score cannot beat the current best. If nothing finishes within
    max_decode_len the best unfinished hypothesis is returned, flagged.
    """
    params.validate()
    if params.max_decode_len > model.config.max_positions:
        raise UsageError(
            f"max_decode_len {params.max_decode_len} exceeds the model's "
            f"max_positions {model.config.max_positions}")
    alpha = params.length_penalty
    forbidden = (vocab.pad_id, vocab.bos_id)
    beams = [((vocab.bos_id,), 0.0)]
    last_beams = beams
    finished = []
    for _ in range(params.max_decode_len):
        prefixes = np.array([toks for toks, _ in beams], dtype=np.int64)
        logp = _last_logprobs(model, prefixes, enc_states, enc_pad)
        candidates = []
        for (toks, lp), row in zip(beams, logp):
            for tok in range(len(vocab)):
                if tok not in forbidden:
                    candidates.append((toks + (tok,), lp + float(row[tok])))
        candidates.sort(key=lambda c: (-c[1], c[0]))
        beams = []
        for toks, lp in candidates[:params.beam_size]:
            if toks[-1] == vocab.eos_id:
                finished.append(Hypothesis.make(toks, lp, alpha, True))
            else:
                beams.append((toks, lp))
        if not beams:
            break
        if len(finished) >= params.beam_size:
            best = max(h.normalized for h in finished)
            # reachable upper bound: all future tokens free, maximal length
            def bound(lp):
                return lp / params.max_decode_len ** alpha if lp < 0 else lp
            beams = [b for b in beams if not bound(b[1]) < best]
            if not beams:
                break
        last_beams = beams
    if finished:
        return min(finished, key=lambda h: (-h.normalized, h.tokens))
    best_toks, best_lp = min(
        last_beams, key=lambda b: (-Hypothesis.score(b[1], b[0], alpha), b[0]))
    return Hypothesis.make(best_toks, best_lp, alpha, False)


def beam_search(model: TransformerModel, src, src_pad, vocab: Vocabulary,
                params: BeamParams):
    """Best hypothesis per sentence of an already-wrapped source batch."""
    src = np.asarray(src)
    src_pad = np.asarray(src_pad, dtype=bool)
    out = []
    for i in range(src.shape[0]):
        keep = ~src_pad[i]
        row = src[i, keep][None, :]
        enc = encode(model, row, np.zeros_like(row, dtype=bool))
        out.append(beam_search_single(model, enc.states.data, enc.pad_mask, vocab, params))
    return out


def wrap_source(text: str, tgt_lang: str, vocab: Vocabulary, max_positions: int):
    ids = tokenize(text, vocab)[:max_positions - 2]
    return [vocab.lang_id(tgt_lang)] + ids + [vocab.eos_id]


def translate_corpus_full(model: TransformerModel, sentences, tgt_lang: str,
                          vocab: Vocabulary, params: BeamParams):
    """Translate raw sentences into `tgt_lang`; (text, Hypothesis) per line."""
    results = []
    for text in sentences:
        row = np.asarray(wrap_source(text, tgt_lang, vocab, model.config.max_positions),
                         dtype=np.int64)[None, :]
        enc = encode(model, row, np.zeros_like(row, dtype=bool))
        hyp = beam_search_single(model, enc.states.data, enc.pad_mask, vocab, params)
        results.append((detokenize(hyp.tokens, vocab), hyp))
    return results


def translate_corpus(model: TransformerModel, sentences, tgt_lang: str,
                     vocab: Vocabulary, params: BeamParams):
    """Translate raw sentences into `tgt_lang`; returns detokenized strings."""
    return [text for text, _ in
            translate_corpus_full(model, sentences, tgt_lang, vocab, params)]


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

MAX_NGRAM = 4


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references) -> float:
    """Corpus BLEU-4 over whitespace-style token sequences, in [0, 100]."""
    if not hypotheses or len(hypotheses) != len(references):
        raise UsageError("need equal, nonzero numbers of hypotheses and references")
    matches = [0] * MAX_NGRAM
    totals = [0] * MAX_NGRAM
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = list(hyp)
        ref = list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_NGRAM + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    zeros = 0
    for n in range(MAX_NGRAM):
        if matches[n] == 0 or totals[n] == 0:
            zeros += 1
            precision = 1.0 / 2 ** zeros
        else:
            precision = matches[n] / totals[n]
        log_sum += math.log(precision)
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_sum / MAX_NGRAM)
