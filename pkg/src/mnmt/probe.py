"""Structure probes over encoder internals.

Word alignment: subword states are averaged into word vectors, a cosine
similarity matrix is built across a sentence pair, and alignments come from
iterated mutual argmax (iteration one is the plain mutual-argmax set; later
iterations repeat it on the submatrix of still-unaligned rows and columns).
Scored with alignment error rate against sure/possible gold sets.

Dependency parsing: per-layer attention maps are averaged over heads, merged
from subwords to words, and fed to Chu-Liu/Edmonds for the maximum spanning
arborescence rooted at the gold root; scored with unlabeled attachment score.

Classification: an affine projection over the first position's encoder state,
with the two text segments joined by a single <eos>.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .corpus import Vocabulary, tokenize, tokenize_words
from .errors import UsageError
from .model import TransformerModel, encode
from .train import AdamState, adam_step

NEG = -math.inf


# ---------------------------------------------------------------------------
# Word vectors and similarity
# ---------------------------------------------------------------------------

def word_vectors(states: np.ndarray, word_map) -> np.ndarray:
    """Average subword state vectors into one vector per word.

    `word_map[t]` is the word index of position t, or None for positions to
    drop (language token, <eos>, padding).
    """
    states = np.asarray(states)
    if states.ndim != 2 or len(word_map) != states.shape[0]:
        raise UsageError("word_map must assign every state position")
    indices = [w for w in word_map if w is not None]
    if not indices:
        raise UsageError("word_map selects no words")
    n_words = max(indices) + 1
    out = np.zeros((n_words, states.shape[1]), dtype=np.float64)
    counts = np.zeros(n_words, dtype=np.int64)
    for t, w in enumerate(word_map):
        if w is None:
            continue
        out[w] += states[t]
        counts[w] += 1
    if (counts == 0).any():
        raise UsageError("a word has an empty subword span")
    return out / counts[:, None]


def cosine_matrix(src_vectors: np.ndarray, tgt_vectors: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity, rows = source words, columns = target words."""
    def unit(v):
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return v / norms
    sim = unit(np.asarray(src_vectors, dtype=np.float64)) @ unit(
        np.asarray(tgt_vectors, dtype=np.float64)).T
    return np.clip(sim, -1.0, 1.0)


# ---------------------------------------------------------------------------
# IterMax alignment and AER
# ---------------------------------------------------------------------------

def _mutual_argmax(sim, rows, cols):
    """Mutual best pairs within the rows x cols submatrix, ties to lowest index."""
    sub = sim[np.ix_(rows, cols)]
    best_col = sub.argmax(axis=1)
    best_row = sub.argmax(axis=0)
    return {(rows[i], cols[best_col[i]])
            for i in range(len(rows)) if best_row[best_col[i]] == i}


def itermax(sim: np.ndarray, iterations: int = 2) -> set:
    """Iterated mutual argmax over a similarity matrix.

    Iteration 1 takes every (i, j) where j is i's best column and i is j's
    best row. Each later iteration reruns that rule restricted to rows and
    columns that are still unaligned, so already-made alignments never block
    or change.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if iterations < 1:
        raise UsageError("iterations must be >= 1")
    if sim.ndim != 2 or sim.size == 0:
        raise UsageError("similarity matrix must be a nonempty 2-d array")
    aligned = set()
    taken_rows, taken_cols = set(), set()
    for _ in range(iterations):
        rows = [i for i in range(sim.shape[0]) if i not in taken_rows]
        cols = [j for j in range(sim.shape[1]) if j not in taken_cols]
        if not rows or not cols:
            break
        new = _mutual_argmax(sim, rows, cols) - aligned
        if not new:
            break
        aligned |= new
        taken_rows |= {i for i, _ in new}
        taken_cols |= {j for _, j in new}
    return aligned


@dataclass(frozen=True)
class GoldAlignment:
    sure: frozenset
    possible: frozenset

    def __post_init__(self):
        if not self.sure <= self.possible:
            raise UsageError("sure alignments must be a subset of possible ones")

    @classmethod
    def from_pairs(cls, pairs) -> "GoldAlignment":
        pairs = frozenset(pairs)
        return cls(sure=pairs, possible=pairs)

    @classmethod
    def parse(cls, line: str) -> "GoldAlignment":
        """Pharaoh format: 'i-j' sure pairs and 'i?j' possible-only pairs."""
        sure, possible = set(), set()
        for item in line.split():
            sep = "-" if "-" in item else "?"
            i, _, j = item.partition(sep)
            pair = (int(i), int(j))
            possible.add(pair)
            if sep == "-":
                sure.add(pair)
        return cls(sure=frozenset(sure), possible=frozenset(possible))


def aer(predicted: set, gold: GoldAlignment) -> float:
    """Alignment error rate: 1 - (|A n S| + |A n P|) / (|A| + |S|)."""
    predicted = set(predicted)
    denom = len(predicted) + len(gold.sure)
    if denom == 0:
        return 0.0
    hits = len(predicted & gold.sure) + len(predicted & gold.possible)
    return 1.0 - hits / denom


# ---------------------------------------------------------------------------
# Attention graphs and maximum spanning arborescence
# ---------------------------------------------------------------------------

def attention_graph(layer_maps: np.ndarray, word_map) -> np.ndarray:
    """Head-averaged attention merged from subwords to a word-level digraph.

    `layer_maps` is one layer's [heads, T, T] stack; entry (u, v) of the
    result is the mean attention from word u's positions to word v's.
    """
    maps = np.asarray(layer_maps, dtype=np.float64)
    if maps.ndim != 3 or maps.shape[1] != maps.shape[2]:
        raise UsageError("layer_maps must be [heads, T, T]")
    if len(word_map) != maps.shape[1]:
        raise UsageError("word_map must assign every attention position")
    mean_heads = maps.mean(axis=0)
    groups = {}
    for t, w in enumerate(word_map):
        if w is not None:
            groups.setdefault(w, []).append(t)
    if not groups or set(groups) != set(range(len(groups))):
        raise UsageError("word_map must cover words 0..W-1")
    n = len(groups)
    rows = np.stack([mean_heads[groups[w]].mean(axis=0) for w in range(n)])
    return np.stack([rows[:, groups[w]].mean(axis=1) for w in range(n)], axis=1)


@dataclass
class DependencyTree:
    heads: list   # head index per word; the root holds -1
    root: int

    def validate(self) -> "DependencyTree":
        n = len(self.heads)
        if not 0 <= self.root < n or self.heads[self.root] != -1:
            raise UsageError("root must be in range and have head -1")
        if sum(1 for h in self.heads if h == -1) != 1:
            raise UsageError("exactly one root expected")
        for start in range(n):
            seen = set()
            v = start
            while v != self.root:
                if v in seen:
                    raise UsageError("head assignment contains a cycle")
                seen.add(v)
                v = self.heads[v]
                if not 0 <= v < n:
                    raise UsageError("head index out of range")
        return self


def chu_liu_edmonds(weights: np.ndarray, root: int) -> DependencyTree:
    """Maximum-weight spanning arborescence rooted at `root`.

    Greedy best-incoming selection with cycle contraction; -inf marks a
    missing edge, and a node with no usable incoming edge (even after
    contraction) means no arborescence exists.
    """
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.shape[0]
    if weights.ndim != 2 or weights.shape != (n, n) or n < 1:
        raise UsageError("weights must be a square matrix")
    if not 0 <= root < n:
        raise UsageError("root index out of range")
    heads = _cle(weights, root)
    return DependencyTree(heads=heads, root=root).validate()


def _best_heads(weights, root):
    n = weights.shape[0]
    heads = [-1] * n
    for v in range(n):
        if v == root:
            continue
        col = weights[:, v].copy()
        col[v] = NEG
        u = int(col.argmax())
        if col[u] == NEG:
            raise UsageError(f"no incoming edge for node {v}; no arborescence exists")
        heads[v] = u
    return heads


def _find_cycle(heads, root):
    n = len(heads)
    color = [0] * n
    for start in range(n):
        path = []
        v = start
        while v != root and color[v] == 0:
            color[v] = 1
            path.append(v)
            v = heads[v]
        if v != root and color[v] == 1 and v in path:
            return path[path.index(v):]
        for u in path:
            color[u] = 2
    return None


def _cle(weights, root):
    heads = _best_heads(weights, root)
    cycle = _find_cycle(heads, root)
    if cycle is None:
        return heads
    n = weights.shape[0]
    in_cycle = set(cycle)
    outside = [v for v in range(n) if v not in in_cycle]
    index = {v: i for i, v in enumerate(outside)}
    super_idx = len(outside)
    m = super_idx + 1
    cycle_in_weight = {v: weights[heads[v], v] for v in cycle}

    contracted = np.full((m, m), NEG)
    enter_choice = {}   # outside node u -> cycle node whose edge (u, v) wins
    exit_choice = {}    # outside node x -> cycle node u with the best (u, x)
    for u in outside:
        for v in outside:
            if u != v:
                contracted[index[u], index[v]] = weights[u, v]
        gains = [weights[u, v] - cycle_in_weight[v] for v in cycle]
        best = int(np.argmax(gains))
        if gains[best] != NEG:
            contracted[index[u], super_idx] = gains[best]
            enter_choice[u] = cycle[best]
    for x in outside:
        col = [weights[u, x] for u in cycle]
        best = int(np.argmax(col))
        if col[best] != NEG:
            contracted[super_idx, index[x]] = col[best]
            exit_choice[x] = cycle[best]

    sub_heads = _cle(contracted, index[root] if root in index else super_idx)
    heads_out = [-1] * n
    for v in outside:
        h = sub_heads[index[v]]
        if h == -1:
            continue
        heads_out[v] = exit_choice[v] if h == super_idx else outside[h]
    super_head = sub_heads[super_idx]
    if super_head == -1:
        raise UsageError("contracted root lost its incoming edge")
    entering_outside = outside[super_head]
    entering_cycle_node = enter_choice[entering_outside]
    for v in cycle:
        heads_out[v] = heads[v]
    heads_out[entering_cycle_node] = entering_outside
    return heads_out


def uas(predicted: DependencyTree, gold_heads) -> float:
    """Fraction of non-root words whose predicted head matches gold."""
    gold_heads = list(gold_heads)
    if len(gold_heads) != len(predicted.heads):
        raise UsageError("predicted and gold trees cover different word counts")
    scored = [(p, g) for p, g in zip(predicted.heads, gold_heads) if g != -1]
    if not scored:
        return 1.0
    return sum(1 for p, g in scored if p == g) / len(scored)


# ---------------------------------------------------------------------------
# Corpus-level probe drivers
# ---------------------------------------------------------------------------

def _probe_word_map(word_map, total_len):
    """word_map for [lang] + pieces + [eos]: specials become None."""
    return [None] + list(word_map) + [None] * (total_len - len(word_map) - 1)


def encode_for_probe(model: TransformerModel, text: str, lang_token_id: int,
                     vocab: Vocabulary, mode: str = "word"):
    """Encode one sentence the way the translator sees it; returns the
    EncodedBatch plus the position->word map with specials dropped."""
    ids, word_map = tokenize_words(text, vocab, mode)
    if not ids:
        raise UsageError("cannot probe an empty sentence")
    row = np.asarray([lang_token_id] + ids + [vocab.eos_id], dtype=np.int64)[None, :]
    enc = encode(model, row, np.zeros_like(row, dtype=bool))
    return enc, _probe_word_map(word_map, row.shape[1])


def _states_at(enc, layer: int) -> np.ndarray:
    """Hidden states for one sentence: -1 means the final encoder output."""
    if layer == -1:
        return enc.states.data[0]
    return enc.layer_states[layer][0]


def align_sentence_pair(model, src_text, tgt_text, src_lang, tgt_lang, vocab,
                        layer: int = -1, iterations: int = 2, mode: str = "word"):
    """IterMax alignment for one sentence pair from encoder states.

    Each side is encoded with the language token it would carry as translation
    input: the source with the target's token and vice versa.
    """
    n_layers = model.config.encoder_layers
    if not -1 <= layer < n_layers:
        raise UsageError(f"layer {layer} out of range for {n_layers} encoder layers")
    src_enc, src_map = encode_for_probe(model, src_text, vocab.lang_id(tgt_lang), vocab, mode)
    tgt_enc, tgt_map = encode_for_probe(model, tgt_text, vocab.lang_id(src_lang), vocab, mode)
    sim = cosine_matrix(word_vectors(_states_at(src_enc, layer), src_map),
                        word_vectors(_states_at(tgt_enc, layer), tgt_map))
    return itermax(sim, iterations)


def alignment_error_rate(model, pairs, gold_lines, src_lang, tgt_lang, vocab,
                         layer: int = -1, iterations: int = 2,
                         mode: str = "word") -> dict:
    """Corpus AER over (src, tgt) text pairs and Pharaoh gold lines."""
    if len(pairs) != len(gold_lines):
        raise UsageError("need one gold line per sentence pair")
    a_total = s_total = hit_s = hit_p = 0
    for (src_text, tgt_text), line in zip(pairs, gold_lines):
        gold = GoldAlignment.parse(line)
        predicted = align_sentence_pair(model, src_text, tgt_text, src_lang,
                                        tgt_lang, vocab, layer, iterations, mode)
        a_total += len(predicted)
        s_total += len(gold.sure)
        hit_s += len(predicted & gold.sure)
        hit_p += len(predicted & gold.possible)
    denom = a_total + s_total
    score = 0.0 if denom == 0 else 1.0 - (hit_s + hit_p) / denom
    return {"aer": score, "predicted": a_total, "sure": s_total,
            "sentences": len(pairs)}


def read_conllu(path):
    """CoNLL-U subset: only ID, FORM, HEAD are honored (0-indexed out)."""
    sentences = []
    forms, heads = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                if forms:
                    sentences.append((forms, heads))
                    forms, heads = [], []
                continue
            if line.startswith("#"):
                continue
            cols = line.split("\t")
            if "-" in cols[0] or "." in cols[0]:
                continue
            forms.append(cols[1])
            head = int(cols[6])
            heads.append(head - 1 if head > 0 else -1)
    if forms:
        sentences.append((forms, heads))
    return sentences


def probe_parse(model: TransformerModel, sentences, vocab: Vocabulary,
                lang: str, mode: str = "word") -> dict:
    """Per-layer UAS of MST parses from attention, plus the best layer.

    `sentences` holds (forms, gold_heads) with the gold root marked -1; the
    gold root seeds the arborescence. Ties in the per-layer means break toward
    the lowest layer.
    """
    n_layers = model.config.encoder_layers
    totals = np.zeros(n_layers)
    lang_id = vocab.lang_id(lang)
    for forms, gold_heads in sentences:
        root = gold_heads.index(-1)
        enc, word_map = encode_for_probe(model, " ".join(forms), lang_id, vocab, mode)
        for layer in range(n_layers):
            graph = attention_graph(enc.attention[layer][0], word_map)
            tree = chu_liu_edmonds(graph, root)
            totals[layer] += uas(tree, gold_heads)
    per_layer = totals / len(sentences)
    best = int(np.argmax(per_layer))
    return {"per_layer": per_layer.tolist(), "best_layer": best,
            "best_uas": float(per_layer[best]), "sentences": len(sentences)}


def classify_probe(model: TransformerModel, train_pairs, eval_pairs,
                   vocab: Vocabulary, lang: str, steps: int = 200,
                   batch_size: int = 16, lr: float = 1e-3, seed: int = 0,
                   finetune_encoder: bool = False) -> dict:
    """Fine-tune a projection over the first token's state; returns accuracy.

    Input is [lang] premise <eos> hypothesis <eos>. With `finetune_encoder`
    the gradient flows into the encoder as well; otherwise encoder states are
    treated as fixed features.
    """
    if not train_pairs or not eval_pairs:
        raise UsageError("classification probe needs nonempty splits")
    labels = sorted({label for _, _, label in train_pairs} |
                    {label for _, _, label in eval_pairs})
    label_idx = {lab: i for i, lab in enumerate(labels)}
    rng = np.random.default_rng(seed)
    hidden = model.config.hidden
    proj_w = tt.Tensor(rng.normal(0, 0.02, size=(hidden, len(labels))), requires_grad=True)
    proj_b = tt.Tensor(np.zeros(len(labels)), requires_grad=True)
    head = {"proj_w": proj_w, "proj_b": proj_b}
    params = dict(head)
    if finetune_encoder:
        params.update(dict(model.named_tensors()))
    opt = AdamState(params)
    lang_id = vocab.lang_id(lang)

    def pack(batch):
        rows = []
        for prem, hyp, _ in batch:
            ids = ([lang_id] + tokenize(prem, vocab) + [vocab.eos_id]
                   + tokenize(hyp, vocab) + [vocab.eos_id])
            rows.append(ids[:model.config.max_positions])
        width = max(len(r) for r in rows)
        out = np.full((len(rows), width), vocab.pad_id, dtype=np.int64)
        pad = np.ones((len(rows), width), dtype=bool)
        for i, r in enumerate(rows):
            out[i, :len(r)] = r
            pad[i, :len(r)] = False
        return out, pad

    for _ in range(steps):
        picks = rng.integers(0, len(train_pairs), size=batch_size)
        batch = [train_pairs[i] for i in picks]
        ids, pad = pack(batch)
        targets = np.array([label_idx[b[2]] for b in batch], dtype=np.int64)
        if not finetune_encoder:
            feats = encode(model, ids, pad).states.data[:, 0, :]
        with tt.Tape() as tape:
            if finetune_encoder:
                first = _take_first(encode(model, ids, pad).states)
            else:
                first = tt.constant(feats)
            logits = tt.add(tt.matmul(first, proj_w), proj_b)
            loss = tt.label_smoothed_ce(
                logits, targets, np.ones(len(batch), dtype=bool), 0.0)
            tt.backward(tape, loss)
        grads = {name: tt.grad_of(t) for name, t in params.items()}
        adam_step(params, grads, opt, lr)
        for t in params.values():
            t.zero_grad()

    correct = 0
    for start in range(0, len(eval_pairs), batch_size):
        batch = eval_pairs[start:start + batch_size]
        ids, pad = pack(batch)
        enc = encode(model, ids, pad)
        logits = enc.states.data[:, 0, :] @ proj_w.data + proj_b.data
        predictions = logits.argmax(axis=1)
        correct += sum(int(predictions[i] == label_idx[batch[i][2]])
                       for i in range(len(batch)))
    return {"accuracy": correct / len(eval_pairs), "labels": labels,
            "train_size": len(train_pairs), "eval_size": len(eval_pairs)}


def _take_first(states: tt.Tensor) -> tt.Tensor:
    """Differentiable slice of position 0: [B, T, h] -> [B, h]."""
    batch, length, hidden = states.shape
    selector = np.zeros((length, 1), dtype=states.data.dtype)
    selector[0, 0] = 1.0
    picked = tt.matmul(tt.transpose(states, (0, 2, 1)), tt.constant(selector))
    return tt.reshape(picked, (batch, hidden))
