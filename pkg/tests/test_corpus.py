"""Vocabulary, tokenization, and the temperature-sampling machinery."""

from decimal import Decimal, getcontext

import numpy as np
import pytest
from scipy.stats import chi2

from mnmt.corpus import (MultilingualCorpus, SamplingSchedule, Vocabulary,
                         compute_sampling_probs, detokenize, language_token,
                         load_parallel, sample_batch, temperature_at_epoch,
                         tokenize, tokenize_words)
from mnmt.errors import UsageError


def toy_vocab():
    return Vocabulary(["aa", "bb"], [f"w{i:02d}" for i in range(10)])


def decimal_q(sizes, temperature):
    """Independent high-precision evaluation of the flattening formula."""
    getcontext().prec = 50
    total = Decimal(sum(sizes))
    p = [Decimal(s) / total for s in sizes]
    inv_t = Decimal(1) / Decimal(temperature)
    flattened = [(x.ln() * inv_t).exp() for x in p]
    norm = sum(flattened)
    return [float(x / norm) for x in flattened]


class TestVocabulary:
    def test_layout_and_ids(self):
        v = toy_vocab()
        assert v.pad_id == 0 and v.mask_id == 4
        assert v.token_of(0) == "<pad>"
        assert v.lang_id("aa") == 5 and v.lang_id("bb") == 6
        assert v.id_of("w00") == 7
        assert v.first_content_id == 7
        assert len(v) == 17

    def test_unknown_maps_to_unk(self):
        v = toy_vocab()
        assert v.id_of("zzz") == v.unk_id

    def test_unknown_language_rejected(self):
        with pytest.raises(UsageError):
            toy_vocab().lang_id("cc")

    def test_save_load_roundtrip(self, tmp_path):
        v = toy_vocab()
        path = tmp_path / "vocab.txt"
        v.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.languages == ("aa", "bb")
        assert [loaded.token_of(i) for i in range(len(loaded))] == \
            [v.token_of(i) for i in range(len(v))]

    def test_duplicate_token_rejected(self):
        with pytest.raises(UsageError):
            Vocabulary(["aa"], ["x", "x"])


class TestTokenize:
    def test_word_roundtrip(self):
        v = toy_vocab()
        text = "w00 w03 w09"
        assert detokenize(tokenize(text, v), v) == text

    def test_unknown_becomes_unk(self):
        v = toy_vocab()
        assert tokenize("w00 mystery", v) == [7, v.unk_id]

    def test_char_mode_pieces(self):
        v = Vocabulary([], ["a", "+b", "+c", "b"])
        ids, word_map = tokenize_words("abc b", v, mode="char")
        assert [v.token_of(i) for i in ids] == ["a", "+b", "+c", "b"]
        assert word_map == [0, 0, 0, 1]

    def test_char_mode_roundtrip_random_strings(self):
        letters = "abcdef"
        pieces = list(letters) + ["+" + c for c in letters]
        v = Vocabulary([], pieces)
        rng = np.random.default_rng(0)
        for _ in range(50):
            words = ["".join(rng.choice(list(letters), size=rng.integers(1, 6)))
                     for _ in range(rng.integers(1, 5))]
            text = " ".join(words)
            assert detokenize(tokenize(text, v, mode="char"), v) == text

    def test_detokenize_skips_specials_and_language_tokens(self):
        v = toy_vocab()
        ids = [v.lang_id("aa"), v.bos_id, 7, 8, v.eos_id]
        assert detokenize(ids, v) == "w00 w01"


class TestSamplingProbs:
    def test_t1_is_exactly_proportional(self):
        q = compute_sampling_probs([9000, 1000], 1.0)
        assert (q == np.array([0.9, 0.1])).all()

    def test_t5_against_decimal_oracle(self):
        q = compute_sampling_probs([9000, 1000], 5.0)
        oracle = decimal_q([9000, 1000], 5)
        np.testing.assert_allclose(q, oracle, atol=1e-12)
        # value pinned from the oracle; the coarse target is [0.60813, 0.39187]
        np.testing.assert_allclose(q, [0.6081267572685931, 0.3918732427314069],
                                   atol=1e-5)

    def test_equal_sizes_uniform_any_temperature(self):
        for t in (0.5, 1.0, 3.0, 100.0):
            q = compute_sampling_probs([777, 777, 777], t)
            np.testing.assert_allclose(q, 1 / 3, atol=1e-12)

    def test_infinite_temperature_limit(self):
        q = compute_sampling_probs([100000, 50, 3], 1e6)
        assert q.max() - q.min() < 1e-4

    def test_entropy_monotone_in_temperature(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            sizes = rng.integers(1, 100000, size=rng.integers(2, 8))
            t1, t2 = sorted(rng.uniform(1.0, 20.0, size=2))
            def entropy(q):
                return float(-(q * np.log(q)).sum())
            assert entropy(compute_sampling_probs(sizes, t2)) >= \
                entropy(compute_sampling_probs(sizes, t1)) - 1e-12

    def test_order_preservation(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            sizes = rng.integers(1, 100000, size=5)
            t = rng.uniform(0.2, 50.0)
            q = compute_sampling_probs(sizes, t)
            order = np.argsort(-sizes, kind="stable")
            assert (np.diff(q[order]) <= 1e-15).all()

    def test_sums_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            sizes = rng.integers(1, 10**6, size=rng.integers(1, 10))
            q = compute_sampling_probs(sizes, rng.uniform(0.1, 100))
            assert abs(q.sum() - 1.0) < 1e-9

    def test_preconditions(self):
        with pytest.raises(UsageError):
            compute_sampling_probs([10, 0], 5.0)
        with pytest.raises(UsageError):
            compute_sampling_probs([10, 10], 0.0)


class TestTemperatureSchedule:
    def test_paper_defaults(self):
        sched = SamplingSchedule(1.0, 5.0, 5).validate()
        assert temperature_at_epoch(sched, 0) == 1.0
        assert abs(temperature_at_epoch(sched, 3) - 3.4) < 1e-12
        assert temperature_at_epoch(sched, 5) == 5.0
        assert temperature_at_epoch(sched, 7) == 5.0

    def test_nondecreasing_and_clamped(self):
        sched = SamplingSchedule(0.5, 9.0, 4).validate()
        temps = [temperature_at_epoch(sched, e) for e in range(12)]
        assert all(b >= a for a, b in zip(temps, temps[1:]))
        assert temps[4:] == [9.0] * 8

    def test_validation(self):
        with pytest.raises(UsageError):
            SamplingSchedule(0.0, 5.0, 5).validate()
        with pytest.raises(UsageError):
            SamplingSchedule(2.0, 1.0, 5).validate()
        with pytest.raises(UsageError):
            SamplingSchedule(1.0, 5.0, 0).validate()
        with pytest.raises(UsageError):
            temperature_at_epoch(SamplingSchedule(), -1)


def tiny_corpus():
    return MultilingualCorpus(
        directions=[("bb", "aa"), ("aa", "bb")],
        pairs=[[("w00 w01", "w02 w03"), ("w04", "w05 w06")],
               [("w07 w08 w09", "w00")]])


class TestBatchSampling:
    def test_degenerate_q_hits_only_direction_zero(self):
        v = toy_vocab()
        corpus = tiny_corpus()
        rng = np.random.default_rng(0)
        for _ in range(20):
            batch = sample_batch(rng, corpus, [1.0, 0.0], 4, v, 16)
            assert batch.direction == 0

    def test_source_rows_start_with_target_language_token(self):
        v = toy_vocab()
        corpus = tiny_corpus()
        rng = np.random.default_rng(1)
        for _ in range(20):
            batch = sample_batch(rng, corpus, [0.5, 0.5], 3, v, 16)
            expected = v.lang_id(corpus.directions[batch.direction][1])
            assert (batch.src[:, 0] == expected).all()

    def test_batch_layout(self):
        v = toy_vocab()
        corpus = tiny_corpus()
        batch = sample_batch(np.random.default_rng(2), corpus, [0.0, 1.0], 2, v, 16)
        assert batch.tgt_in.shape == batch.labels.shape
        assert (batch.tgt_in[:, 0] == v.bos_id).all()
        for row, mask in zip(batch.labels, batch.label_mask):
            real = row[mask]
            assert real[-1] == v.eos_id
        assert (batch.src[batch.src_pad] == v.pad_id).all()

    def test_empirical_direction_frequencies(self):
        # law of large numbers at the spec's operating point, plus chi-square
        q = compute_sampling_probs([9000, 1000], 5.0)
        rng = np.random.default_rng(7)
        draws = 100_000
        counts = np.bincount(rng.choice(2, size=draws, p=q), minlength=2)
        freq = counts / draws
        assert np.abs(freq - q).sum() < 0.01
        stat = ((counts - draws * q) ** 2 / (draws * q)).sum()
        assert stat < chi2.ppf(0.999, df=1)

    def test_q_length_mismatch(self):
        with pytest.raises(UsageError):
            sample_batch(np.random.default_rng(0), tiny_corpus(), [1.0], 2,
                         toy_vocab(), 16)


class TestCorpusLoading:
    def test_load_parallel_with_truncation(self, tmp_path):
        path = tmp_path / "train.bb-aa.tsv"
        long_side = " ".join(["w00"] * 30)
        path.write_text(f"w00 w01\tw02\n{long_side}\tw03\n", encoding="utf-8")
        corpus = load_parallel(tmp_path, max_tokens=10)
        assert corpus.directions == [("bb", "aa")]
        assert corpus.sizes == [2]
        assert len(corpus.pairs[0][1][0].split()) == 10

    def test_empty_direction_rejected(self, tmp_path):
        (tmp_path / "train.bb-aa.tsv").write_text("", encoding="utf-8")
        with pytest.raises(UsageError):
            load_parallel(tmp_path)

    def test_missing_files_rejected(self, tmp_path):
        with pytest.raises(UsageError):
            load_parallel(tmp_path)

    def test_language_token_surface_form(self):
        assert language_token("aa") == "__aa__"
