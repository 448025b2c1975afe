"""Optimizer math, MLM corruption, the training loop, back-translation."""

import math

import numpy as np
import pytest

import mnmt.tensor as tt
from mnmt.corpus import (MultilingualCorpus, SamplingSchedule, Vocabulary,
                         make_batch)
from mnmt.errors import NonFiniteGradientError, UsageError
from mnmt.evaluate import BeamParams
from mnmt.initialize import InitStrategy, initialize, weight_fingerprint
from mnmt.model import ModelConfig, TransformerModel
from mnmt.train import (AdamState, LRSchedule, TrainConfig, adam_step,
                        backtranslate, label_smoothed_loss, lr_at_step,
                        mask_tokens, mlm_step, steps_per_epoch, train,
                        train_step, write_parallel_tsv)

CONTENT = [f"w{i:02d}" for i in range(12)]


def copy_vocab():
    return Vocabulary(["aa"], CONTENT)


def copy_corpus(n=200, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        s = " ".join(rng.choice(CONTENT, size=rng.integers(2, 7)))
        pairs.append((s, s))
    return MultilingualCorpus([("aa", "aa")], [pairs])


def copy_model_config(vocab):
    return ModelConfig(encoder_layers=2, decoder_layers=1, hidden=32, heads=2,
                       ffn_dim=64, vocab_size=len(vocab), max_positions=16,
                       dropout=0.0)


@pytest.fixture(scope="module")
def trained_copy():
    """Copy-task model trained to convergence; shared across this module."""
    vocab = copy_vocab()
    corpus = copy_corpus()
    model = initialize(copy_model_config(vocab), InitStrategy("random"), None, seed=1)
    cfg = TrainConfig(max_steps=1500, batch_size=8, label_smoothing=0.0,
                      peak_lr=2e-3, warmup_steps=50, checkpoint_interval=10**9,
                      seed=3, schedule=SamplingSchedule(1.0, 1.0, 1))
    result = train(model, corpus, vocab, cfg)
    return model, vocab, corpus, result


class TestLRSchedule:
    def test_ramp_and_decay_points(self):
        sched = LRSchedule(peak_lr=3e-4, warmup_steps=4000).validate()
        assert lr_at_step(sched, 4000) == pytest.approx(3e-4)
        assert lr_at_step(sched, 2000) == pytest.approx(1.5e-4)
        assert lr_at_step(sched, 16000) == pytest.approx(1.5e-4)

    def test_continuous_at_boundary_then_nonincreasing(self):
        sched = LRSchedule(1e-3, 100).validate()
        values = [lr_at_step(sched, s) for s in range(1, 1000)]
        assert abs(values[99] - sched.peak_lr) < 1e-15
        assert abs(values[100] - sched.peak_lr * math.sqrt(100 / 101)) < 1e-15
        tail = values[99:]
        assert all(b <= a for a, b in zip(tail, tail[1:]))

    def test_step_starts_at_one(self):
        with pytest.raises(UsageError):
            lr_at_step(LRSchedule(1e-3, 10), 0)


class TestAdam:
    def _params(self, values):
        return {"w": tt.Tensor(np.array(values, dtype=np.float64), requires_grad=True)}

    def test_zero_gradient_leaves_parameters(self):
        params = self._params([1.0, -2.0])
        state = AdamState(params)
        adam_step(params, {"w": np.zeros(2)}, state, 0.1)
        np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])
        assert state.step_count == 1

    def test_single_step_closed_form(self, f64):
        # from zero state: update = -lr * g / (|g| + eps), any g
        g = np.array([0.3, -5.0, 1e-4])
        params = self._params([0.0, 0.0, 0.0])
        state = AdamState(params)
        adam_step(params, {"w": g.copy()}, state, 0.01)
        expected = -0.01 * g / (np.abs(g) + state.eps)
        np.testing.assert_allclose(params["w"].data, expected, rtol=1e-12)

    def test_non_finite_gradient_aborts_with_name(self):
        params = self._params([1.0])
        with pytest.raises(NonFiniteGradientError, match="w"):
            adam_step(params, {"w": np.array([np.nan])}, AdamState(params), 0.1)

    def test_two_runs_same_seed_bit_identical(self):
        def run():
            vocab = copy_vocab()
            model = initialize(copy_model_config(vocab), InitStrategy("random"),
                               None, seed=9)
            cfg = TrainConfig(max_steps=5, batch_size=4, checkpoint_interval=10**9,
                              seed=11, warmup_steps=10, label_smoothing=0.1)
            train(model, copy_corpus(20), vocab, cfg)
            return weight_fingerprint(model)
        assert run() == run()


class TestLabelSmoothedLoss:
    def test_all_pad_batch_rejected(self):
        logits = tt.Tensor(np.zeros((1, 2, 4)))
        with pytest.raises(UsageError):
            label_smoothed_loss(logits, np.zeros((1, 2), int),
                                np.ones((1, 2), bool), 0.1)

    def test_loss_ignores_padded_positions(self, f64):
        rng = np.random.default_rng(0)
        logits_data = rng.standard_normal((2, 3, 5))
        targets = rng.integers(0, 5, size=(2, 3))
        pad = np.array([[False, False, True], [False, True, True]])
        base = label_smoothed_loss(tt.Tensor(logits_data), targets, pad, 0.1).item()
        noised = logits_data.copy()
        noised[pad] = 0.0
        again = label_smoothed_loss(tt.Tensor(noised), targets, pad, 0.1).item()
        assert base == pytest.approx(again, abs=1e-12)


class TestMLM:
    def _mono_batch(self, vocab, rows=64, width=20, seed=0):
        rng = np.random.default_rng(seed)
        ids = rng.integers(vocab.first_content_id, len(vocab), size=(rows, width))
        ids[:, -1] = vocab.eos_id
        return ids, np.zeros((rows, width), dtype=bool)

    def test_masking_rate_near_fifteen_percent(self):
        vocab = copy_vocab()
        ids, pad = self._mono_batch(vocab, rows=40, width=16)
        rng = np.random.default_rng(1)
        selected_total = positions = 0
        for _ in range(20):
            _, selected = mask_tokens(ids, pad, vocab, rng)
            selected_total += selected.sum()
            positions += (ids >= vocab.first_content_id).sum()
        rate = selected_total / positions
        assert 0.13 <= rate <= 0.17

    def test_corruption_mix(self):
        vocab = copy_vocab()
        ids, pad = self._mono_batch(vocab, rows=400, width=24, seed=2)
        corrupted, selected = mask_tokens(ids, pad, vocab, np.random.default_rng(3))
        assert (corrupted[~selected] == ids[~selected]).all()
        sel_orig, sel_new = ids[selected], corrupted[selected]
        masked = (sel_new == vocab.mask_id).mean()
        unchanged = (sel_new == sel_orig).mean()
        assert 0.75 < masked < 0.85
        assert 0.06 < unchanged < 0.14
        assert (sel_new >= vocab.first_content_id).sum() + \
            (sel_new == vocab.mask_id).sum() == sel_new.size

    def test_rows_without_bernoulli_hits_get_forced_pick(self):
        vocab = copy_vocab()
        ids = np.array([[vocab.first_content_id, vocab.eos_id]])
        pad = np.zeros((1, 2), dtype=bool)
        rng = np.random.default_rng(0)
        for _ in range(50):
            _, selected = mask_tokens(ids, pad, vocab, rng)
            assert selected.sum() == 1 and selected[0, 0]

    def test_unselectable_row_rejected(self):
        vocab = copy_vocab()
        ids = np.array([[vocab.eos_id]])
        with pytest.raises(UsageError):
            mask_tokens(ids, np.zeros((1, 1), bool), vocab, np.random.default_rng(0))

    def test_untrained_uniform_model_loss_is_log_vocab(self):
        vocab = copy_vocab()
        cfg = ModelConfig(encoder_layers=1, decoder_layers=0, hidden=8, heads=2,
                          ffn_dim=16, vocab_size=len(vocab), max_positions=32,
                          dropout=0.0)
        model = TransformerModel.build(cfg, lambda n, s: np.zeros(s))
        ids, pad = self._mono_batch(vocab, rows=8, width=10, seed=4)
        loss, _ = mlm_step(model, ids, pad, vocab, np.random.default_rng(5),
                           training=False)
        assert loss.item() == pytest.approx(math.log(len(vocab)), rel=1e-6)


class TestGradientAccumulation:
    def test_accumulated_microbatches_match_single_batch(self, f64):
        vocab = copy_vocab()
        rng = np.random.default_rng(6)
        pairs = [(" ".join(rng.choice(CONTENT, size=4)),) * 2 for _ in range(32)]
        big = make_batch(pairs, ("aa", "aa"), vocab, 16)
        micros = [make_batch(pairs[i:i + 8], ("aa", "aa"), vocab, 16)
                  for i in range(0, 32, 8)]

        def run(batch_lists):
            model = initialize(copy_model_config(vocab), InitStrategy("random"),
                               None, seed=7)
            params = dict(model.named_tensors())
            opt = AdamState(params)
            for batches in batch_lists:
                train_step(model, params, opt, batches, 1e-3, 0.1)
            return {n: t.data.copy() for n, t in params.items()}

        merged = run([[big]] * 3)
        split = run([micros] * 3)
        for name in merged:
            np.testing.assert_allclose(split[name], merged[name], atol=1e-10)


class TestTrainLoop:
    def test_metrics_steps_monotone_and_temperature_schedule(self):
        vocab = copy_vocab()
        corpus = copy_corpus(8)
        model = initialize(copy_model_config(vocab), InitStrategy("random"), None, seed=8)
        cfg = TrainConfig(max_steps=8, batch_size=2, gradient_accumulation=2,
                          checkpoint_interval=10**9, seed=1, warmup_steps=10,
                          schedule=SamplingSchedule(1.0, 5.0, 2))
        result = train(model, corpus, vocab, cfg)
        steps = [m["step"] for m in result.metrics]
        assert steps == list(range(1, 9))
        # 8 pairs / (2 * 2) per step -> 2 steps per epoch; Eq.-style ramp over 2 epochs
        temps = [m["temperature"] for m in result.metrics]
        assert temps == [1.0, 1.0, 3.0, 3.0, 5.0, 5.0, 5.0, 5.0]
        assert steps_per_epoch(8, 2, 2) == 2
        # single-direction corpus: only direction 0 ever appears in the log
        assert all(set(m["direction_losses"]) == {"0"} for m in result.metrics)

    def test_checkpoint_cadence_includes_final_step(self, tmp_path):
        vocab = copy_vocab()
        model = initialize(copy_model_config(vocab), InitStrategy("random"), None, seed=9)
        cfg = TrainConfig(max_steps=5, batch_size=2, checkpoint_interval=2,
                          seed=2, warmup_steps=10)
        result = train(model, copy_corpus(10), vocab, cfg, out_dir=tmp_path)
        names = [p.split("/")[-1] for p in result.checkpoint_paths]
        assert names == ["step0000002.ckpt", "step0000004.ckpt", "step0000005.ckpt"]
        assert (tmp_path / "logs" / "metrics.jsonl").exists()

    def test_vocab_model_mismatch_rejected(self):
        vocab = copy_vocab()
        model = initialize(copy_model_config(vocab), InitStrategy("random"), None, seed=9)
        small = Vocabulary(["aa"], CONTENT[:5])
        with pytest.raises(UsageError):
            train(model, copy_corpus(10), small, TrainConfig(max_steps=1))

    def test_copy_task_smoke_converges(self, trained_copy):
        _, _, _, result = trained_copy
        losses = [m["loss"] for m in result.metrics]
        below = next((i + 1 for i, l in enumerate(losses) if l < 0.1), None)
        assert below is not None and below <= 2000


class TestBacktranslate:
    def test_identity_model_produces_identity_pairs(self, trained_copy):
        model, vocab, corpus, _ = trained_copy
        mono = [s for s, _ in corpus.pairs[0][:20]]
        pairs, dropped = backtranslate(model, mono, "aa", "aa", vocab,
                                       BeamParams(beam_size=2, max_decode_len=12))
        assert dropped == 0
        assert pairs == [(s, s) for s in mono]

    def test_empty_hypotheses_are_dropped_and_counted(self, tmp_path):
        # a model trained to emit <eos> immediately yields only empty texts
        vocab = copy_vocab()
        rng = np.random.default_rng(0)
        pairs = [(" ".join(rng.choice(CONTENT, size=3)), "") for _ in range(30)]
        corpus = MultilingualCorpus([("aa", "aa")], [pairs])
        model = initialize(copy_model_config(vocab), InitStrategy("random"), None, seed=2)
        cfg = TrainConfig(max_steps=300, batch_size=8, label_smoothing=0.0,
                          peak_lr=2e-3, warmup_steps=20, checkpoint_interval=10**9,
                          seed=4, schedule=SamplingSchedule(1.0, 1.0, 1))
        train(model, corpus, vocab, cfg)
        mono = ["w00 w01", "w02"]
        bt_pairs, dropped = backtranslate(model, mono, "aa", "aa", vocab,
                                          BeamParams(beam_size=2, max_decode_len=4))
        assert dropped + len(bt_pairs) == len(mono)
        assert dropped == 2
        out = tmp_path / "bt.tsv"
        write_parallel_tsv(bt_pairs, out)
        assert len(out.read_text().splitlines()) == len(mono) - dropped
