"""Multilingual data handling: vocabulary, tokenization, and batch sampling.

Translation directions are sampled with the temperature-flattened multinomial
q_i = p_i^(1/T) / sum_j p_j^(1/T) over the proportional shares
p_i = |L_i| / sum |L_j|, and the temperature itself ramps linearly from an
initial to a peak value over the first warmup epochs. Every source row starts
with the target-language token so one model can serve all directions.
"""

from __future__ import annotations

import glob
import logging
import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import UsageError

log = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>", "<mask>")

_LANG_TOKEN = re.compile(r"^__([a-z0-9]+)__$")


def language_token(lang: str) -> str:
    return f"__{lang}__"


class Vocabulary:
    """Total token<->id bijection: specials, then language tokens, then content."""

    def __init__(self, languages, content_tokens):
        self.languages = tuple(languages)
        tokens = list(SPECIALS)
        tokens += [language_token(lang) for lang in self.languages]
        tokens += list(content_tokens)
        self._tokens = tokens
        self._index = {tok: i for i, tok in enumerate(tokens)}
        if len(self._index) != len(tokens):
            raise UsageError("duplicate token in vocabulary")

    pad_id, bos_id, eos_id, unk_id, mask_id = range(5)
    num_specials = len(SPECIALS)

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def first_content_id(self) -> int:
        return self.num_specials + len(self.languages)

    def lang_id(self, lang: str) -> int:
        try:
            return self.num_specials + self.languages.index(lang)
        except ValueError:
            raise UsageError(f"language {lang!r} not in vocabulary") from None

    def id_of(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise UsageError(f"{path}: vocabulary must start with {SPECIALS}")
        languages = []
        i = len(SPECIALS)
        while i < len(tokens):
            m = _LANG_TOKEN.match(tokens[i])
            if not m:
                break
            languages.append(m.group(1))
            i += 1
        return cls(languages, tokens[i:])


def tokenize_words(text: str, vocab: Vocabulary, mode: str = "word"):
    """Token ids plus a piece->word index map (for subword merging).

    Word mode splits on whitespace. Char mode further splits each word into a
    head character and '+'-prefixed continuation pieces, so "abc" becomes
    ["a", "+b", "+c"]; the '+' marks recover word boundaries.
    """
    if mode not in ("word", "char"):
        raise UsageError(f"unknown tokenize mode: {mode}")
    ids, word_map = [], []
    for w, word in enumerate(text.split()):
        pieces = [word] if mode == "word" else [word[0]] + ["+" + c for c in word[1:]]
        for piece in pieces:
            ids.append(vocab.id_of(piece))
            word_map.append(w)
    return ids, word_map


def tokenize(text: str, vocab: Vocabulary, mode: str = "word"):
    return tokenize_words(text, vocab, mode)[0]


def detokenize(ids, vocab: Vocabulary) -> str:
    """Inverse of tokenize: drops specials/language tokens, rejoins '+'-pieces."""
    words = []
    for idx in ids:
        tok = vocab.token_of(int(idx))
        if idx < vocab.num_specials and idx != vocab.unk_id:
            continue
        if _LANG_TOKEN.match(tok):
            continue
        if tok.startswith("+") and len(tok) > 1 and words:
            words[-1] += tok[1:]
        else:
            words.append(tok)
    return " ".join(words)


@dataclass
class MultilingualCorpus:
    directions: list          # (src_lang, tgt_lang) pairs
    pairs: list               # per direction: list of (src_text, tgt_text)

    def __post_init__(self):
        if len(self.directions) != len(self.pairs):
            raise UsageError("directions and pair lists must align")
        for d, p in zip(self.directions, self.pairs):
            if not p:
                raise UsageError(f"direction {d[0]}-{d[1]} has no sentence pairs")

    @property
    def sizes(self):
        return [len(p) for p in self.pairs]


def parallel_path(data_dir, src: str, tgt: str, split: str = "train") -> str:
    return os.path.join(data_dir, f"{split}.{src}-{tgt}.tsv")


def discover_directions(data_dir, split: str = "train"):
    paths = sorted(glob.glob(os.path.join(data_dir, f"{split}.*.tsv")))
    directions = []
    for path in paths:
        stem = os.path.basename(path)[len(split) + 1:-len(".tsv")]
        src, _, tgt = stem.partition("-")
        directions.append((src, tgt))
    return directions


def load_parallel(data_dir, directions=None, split: str = "train",
                  max_tokens: int | None = None) -> MultilingualCorpus:
    """Read one TSV per direction; overlong sides are truncated with a logged count."""
    if directions is None:
        directions = discover_directions(data_dir, split)
    if not directions:
        raise UsageError(f"no {split}.*.tsv files under {data_dir}")
    all_pairs = []
    truncated = 0
    for src, tgt in directions:
        path = parallel_path(data_dir, src, tgt, split)
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                s, _, t = line.partition("\t")
                if max_tokens is not None:
                    s_toks, t_toks = s.split(), t.split()
                    if len(s_toks) > max_tokens or len(t_toks) > max_tokens:
                        truncated += 1
                        s = " ".join(s_toks[:max_tokens])
                        t = " ".join(t_toks[:max_tokens])
                pairs.append((s, t))
        all_pairs.append(pairs)
    if truncated:
        log.info("truncated %d overlong pairs to %d tokens", truncated, max_tokens)
    return MultilingualCorpus(directions=list(directions), pairs=all_pairs)


def load_monolingual(data_dir, lang: str):
    path = os.path.join(data_dir, f"mono.{lang}.txt")
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingSchedule:
    t0: float = 1.0
    t_peak: float = 5.0
    warmup_epochs: int = 5

    def validate(self) -> "SamplingSchedule":
        if self.t0 <= 0:
            raise UsageError("initial temperature must be positive")
        if self.t_peak < self.t0:
            raise UsageError("peak temperature must be >= initial temperature")
        if self.warmup_epochs < 1:
            raise UsageError("warmup_epochs must be >= 1")
        return self


def compute_sampling_probs(sizes, temperature: float) -> np.ndarray:
    """Temperature-flattened direction probabilities q from corpus sizes."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0 or (sizes <= 0).any():
        raise UsageError("every direction must have a positive size")
    if temperature <= 0:
        raise UsageError("temperature must be positive")
    p = sizes / sizes.sum()
    if temperature == 1.0:
        return p  # q == p exactly at T=1; skip the renormalization noise
    flattened = p ** (1.0 / temperature)
    return flattened / flattened.sum()


def temperature_at_epoch(schedule: SamplingSchedule, epoch: int) -> float:
    """Linear ramp from t0 to t_peak over the warmup epochs, then flat."""
    if epoch < 0:
        raise UsageError("epoch must be >= 0")
    ramp = schedule.t0 + (epoch / schedule.warmup_epochs) * (schedule.t_peak - schedule.t0)
    return min(schedule.t_peak, ramp)


@dataclass
class Batch:
    src: np.ndarray          # [batch, src_len]; row starts with the target-language token
    src_pad: np.ndarray      # True where padding
    tgt_in: np.ndarray       # decoder input, starts with <bos>
    labels: np.ndarray       # decoder targets, ends with <eos>
    label_mask: np.ndarray   # True at real (non-pad) label positions
    direction: int


def _pad_rows(rows, pad_id: int):
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad_id, dtype=np.int64)
    mask = np.ones((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
        mask[i, :len(r)] = False
    return out, mask


def make_batch(pairs, direction, vocab: Vocabulary, max_positions: int) -> Batch:
    """Wrap raw text pairs into padded id matrices for one direction."""
    tgt_tok = vocab.lang_id(direction[1])
    src_rows, tgt_rows = [], []
    for s, t in pairs:
        s_ids = tokenize(s, vocab)[:max_positions - 2]
        t_ids = tokenize(t, vocab)[:max_positions - 2]
        src_rows.append([tgt_tok] + s_ids + [vocab.eos_id])
        tgt_rows.append([vocab.bos_id] + t_ids + [vocab.eos_id])
    src, src_pad = _pad_rows(src_rows, vocab.pad_id)
    tgt, tgt_padmask = _pad_rows(tgt_rows, vocab.pad_id)
    return Batch(src=src, src_pad=src_pad,
                 tgt_in=tgt[:, :-1], labels=tgt[:, 1:],
                 label_mask=~tgt_padmask[:, 1:], direction=-1)


def sample_batch(rng: np.random.Generator, corpus: MultilingualCorpus,
                 q, batch_size: int, vocab: Vocabulary,
                 max_positions: int) -> Batch:
    """Draw a direction from multinomial(q), then pairs uniformly within it."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (len(corpus.directions),):
        raise UsageError("q must have one probability per direction")
    direction = int(rng.choice(len(q), p=q))
    picks = rng.integers(0, len(corpus.pairs[direction]), size=batch_size)
    pairs = [corpus.pairs[direction][i] for i in picks]
    batch = make_batch(pairs, corpus.directions[direction], vocab, max_positions)
    batch.direction = direction
    return batch
