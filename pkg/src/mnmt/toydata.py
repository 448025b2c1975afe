"""Synthetic cipher corpus: a desk-scale stand-in for multilingual bitext.

One base language of random token sentences; every other language is the same
sentence under a fixed bijective token substitution plus a deterministic word
order rule (identity, reversal, rotation). That makes gold word alignments,
round-trip checks, and low/high-resource skews available by construction.

Emitted files: a vocabulary, per-direction train/dev TSVs with skewed sizes,
per-language monolingual text for MLM and back-translation, Pharaoh gold
alignments for each dev set, a toy dependency treebank, a classification
split, and a JSON manifest recording the ciphers so everything is invertible.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .corpus import SPECIALS, Vocabulary, language_token
from .errors import UsageError

ORDER_RULES = ("identity", "rotate1", "reverse")


def _order_rule(foreign_index: int) -> str:
    return ORDER_RULES[(foreign_index - 1) % len(ORDER_RULES)]


def _apply_order(seq, rule: str):
    if rule == "identity":
        return list(seq)
    if rule == "reverse":
        return list(seq)[::-1]
    if rule.startswith("rotate"):
        k = int(rule[len("rotate"):]) % max(len(seq), 1)
        return list(seq)[k:] + list(seq)[:k]
    raise UsageError(f"unknown order rule: {rule}")


def _positions(rule: str, n: int):
    """position -> base position map for a rendered sentence of length n."""
    return {p: base for p, base in enumerate(_apply_order(range(n), rule))}


def default_directions(languages, n: int):
    """Alternate foreign->base and base->foreign across the foreign languages."""
    foreign = list(languages[1:])
    if not foreign:
        raise UsageError("need at least two languages")
    if n > 2 * len(foreign):
        raise UsageError(f"at most {2 * len(foreign)} directions for these languages")
    directions = []
    for i in range(n):
        f = foreign[(i // 2) % len(foreign)]
        directions.append((f, languages[0]) if i % 2 == 0 else (languages[0], f))
    return directions


class CipherSpec:
    """Per-language substitution tables and order rules over a shared base."""

    def __init__(self, languages, content_per_lang: int, rng: np.random.Generator):
        self.languages = list(languages)
        self.content_per_lang = content_per_lang
        self.substitution = {languages[0]: list(range(content_per_lang))}
        self.order_rule = {languages[0]: "identity"}
        for k, lang in enumerate(languages[1:], start=1):
            self.substitution[lang] = [int(x) for x in rng.permutation(content_per_lang)]
            self.order_rule[lang] = _order_rule(k)

    def token(self, lang: str, base_index: int) -> str:
        return f"{lang}{self.substitution[lang][base_index]:02d}"

    def render(self, base_indices, lang: str):
        ordered = _apply_order(base_indices, self.order_rule[lang])
        return [self.token(lang, i) for i in ordered]

    def invert(self, tokens, lang: str):
        """Recover the base token indices from a rendered sentence."""
        inverse = {v: i for i, v in enumerate(self.substitution[lang])}
        base_ordered = [inverse[int(tok[len(lang):])] for tok in tokens]
        n = len(base_ordered)
        undo = [0] * n
        for p, base_pos in _positions(self.order_rule[lang], n).items():
            undo[base_pos] = base_ordered[p]
        return undo

    def alignment(self, src_lang: str, tgt_lang: str, n: int):
        """Gold (i, j) word pairs for renders of the same n-token base sentence."""
        src_pos = _positions(self.order_rule[src_lang], n)
        tgt_inv = {base: p for p, base in _positions(self.order_rule[tgt_lang], n).items()}
        return sorted((i, tgt_inv[base]) for i, base in src_pos.items())

    def content_tokens(self):
        tokens = []
        for lang in self.languages:
            tokens += [f"{lang}{i:02d}" for i in range(self.content_per_lang)]
        return tokens

    def to_dict(self):
        return {"languages": self.languages,
                "content_per_lang": self.content_per_lang,
                "substitution": self.substitution,
                "order_rule": self.order_rule}


def make_toy_data(out_dir, languages=("aa", "bb", "cc"),
                  sizes=(20000, 5000, 1000), seed: int = 13,
                  dev_size: int = 200, mono_size: int = 5000,
                  content_per_lang: int = 40, min_len: int = 3,
                  max_len: int = 9, cls_examples: int = 500,
                  ud_sentences: int = 50) -> dict:
    """Generate the full toy dataset; returns the manifest."""
    languages = list(languages)
    sizes = [int(s) for s in sizes]
    if any(s <= 0 for s in sizes):
        raise UsageError("direction sizes must be positive")
    if len(languages) < 2 or len(set(languages)) != len(languages):
        raise UsageError("need at least two distinct languages")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    cipher = CipherSpec(languages, content_per_lang, rng)
    directions = default_directions(languages, len(sizes))

    vocab = Vocabulary(languages, cipher.content_tokens())
    vocab.save(os.path.join(out_dir, "vocab.txt"))

    # mild Zipf prior plus a first-order transition structure: each token
    # prefers a few successors, so masked-LM pretraining has contextual
    # signal to learn and transfer (i.i.d. draws reduce MLM to unigrams)
    weights = 1.0 / (np.arange(content_per_lang) + 2.7)
    weights /= weights.sum()
    successors = np.stack([rng.choice(content_per_lang, size=4, replace=False)
                           for _ in range(content_per_lang)])
    successor_probs = np.array([0.35, 0.28, 0.22, 0.15])
    prior_mix = 0.15

    def base_sentence():
        n = int(rng.integers(min_len, max_len + 1))
        toks = [int(rng.choice(content_per_lang, p=weights))]
        while len(toks) < n:
            if rng.random() < prior_mix:
                toks.append(int(rng.choice(content_per_lang, p=weights)))
            else:
                toks.append(int(successors[toks[-1]][rng.choice(4, p=successor_probs)]))
        return toks

    for (src, tgt), size in zip(directions, sizes):
        train_path = os.path.join(out_dir, f"train.{src}-{tgt}.tsv")
        dev_path = os.path.join(out_dir, f"dev.{src}-{tgt}.tsv")
        align_path = os.path.join(out_dir, f"align.{src}-{tgt}.txt")
        with open(train_path, "w", encoding="utf-8") as fh:
            for _ in range(size):
                base = base_sentence()
                fh.write(" ".join(cipher.render(base, src)) + "\t"
                         + " ".join(cipher.render(base, tgt)) + "\n")
        with open(dev_path, "w", encoding="utf-8") as dev_fh, \
                open(align_path, "w", encoding="utf-8") as align_fh:
            for _ in range(dev_size):
                base = base_sentence()
                dev_fh.write(" ".join(cipher.render(base, src)) + "\t"
                             + " ".join(cipher.render(base, tgt)) + "\n")
                pairs = cipher.alignment(src, tgt, len(base))
                align_fh.write(" ".join(f"{i}-{j}" for i, j in pairs) + "\n")

    for lang in languages:
        with open(os.path.join(out_dir, f"mono.{lang}.txt"), "w", encoding="utf-8") as fh:
            for _ in range(mono_size):
                fh.write(" ".join(cipher.render(base_sentence(), lang)) + "\n")

    base_lang = languages[0]
    with open(os.path.join(out_dir, f"ud.{base_lang}.conllu"), "w", encoding="utf-8") as fh:
        for _ in range(ud_sentences):
            words = cipher.render(base_sentence(), base_lang)
            for i, form in enumerate(words, start=1):
                head = 0 if i == 1 else i - 1
                fh.write(f"{i}\t{form}\t_\t_\t_\t_\t{head}\tdep\t_\t_\n")
            fh.write("\n")

    n_train = int(cls_examples * 0.8)
    cls_rows = []
    for _ in range(cls_examples):
        prem = cipher.render(base_sentence(), base_lang)
        hyp = cipher.render(base_sentence(), base_lang)
        label = int(prem[0][len(base_lang):]) % 3
        cls_rows.append(f"{' '.join(prem)}\t{' '.join(hyp)}\t{label}\n")
    for name, rows in ((f"cls.{base_lang}.train.tsv", cls_rows[:n_train]),
                       (f"cls.{base_lang}.dev.tsv", cls_rows[n_train:])):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            fh.writelines(rows)

    manifest = {
        "seed": seed,
        "languages": languages,
        "directions": [list(d) for d in directions],
        "sizes": sizes,
        "dev_size": dev_size,
        "mono_size": mono_size,
        "min_len": min_len,
        "max_len": max_len,
        "specials": list(SPECIALS),
        "language_tokens": [language_token(lang) for lang in languages],
        "cipher": cipher.to_dict(),
        "markov": {"successors": successors.tolist(),
                   "successor_probs": successor_probs.tolist(),
                   "prior_mix": prior_mix},
    }
    with open(os.path.join(out_dir, "toy_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir) -> dict:
    path = os.path.join(data_dir, "toy_manifest.json")
    if not os.path.exists(path):
        raise UsageError(f"no toy_manifest.json under {data_dir}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
