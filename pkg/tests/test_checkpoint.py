"""Checkpoint round trips, load validation, init strategies, averaging."""

import struct

import numpy as np
import pytest

from mnmt.checkpoint import (MAGIC, Checkpoint, checkpoint_from_model,
                             load_checkpoint, model_from_checkpoint,
                             save_checkpoint)
from mnmt.errors import (CheckpointShapeError, CheckpointTruncatedError,
                         CheckpointVersionError, UsageError)
from mnmt.initialize import InitStrategy, initialize, weight_fingerprint
from mnmt.model import ModelConfig, encode
from mnmt.train import average_checkpoints


def config(**kw):
    base = dict(encoder_layers=2, decoder_layers=2, hidden=16, heads=2, ffn_dim=32,
                vocab_size=24, max_positions=10, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def encoder_checkpoint(seed=7, **kw):
    src_cfg = config(decoder_layers=0, **kw)
    src = initialize(src_cfg, InitStrategy("random"), None, seed=seed)
    return checkpoint_from_model(src), src


class TestRoundTrip:
    def test_bit_exact_roundtrip_random_models(self, tmp_path):
        for seed in range(8):
            m = initialize(config(), InitStrategy("random"), None, seed=seed)
            path = tmp_path / f"m{seed}.ckpt"
            save_checkpoint(m, path)
            loaded = load_checkpoint(path)
            assert loaded.config == m.config
            for name, t in m.named_tensors():
                assert loaded.tensors[name].dtype == t.data.dtype
                assert (loaded.tensors[name] == t.data).all()

    def test_model_rebuild_keeps_tying(self, tmp_path):
        m = initialize(config(), InitStrategy("random"), None, seed=1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        rebuilt = model_from_checkpoint(load_checkpoint(path))
        assert rebuilt.output_matrix() is rebuilt.tensor("tok_embed")
        ids = np.array([[6, 7, 8]])
        pad = np.zeros_like(ids, dtype=bool)
        assert (encode(rebuilt, ids, pad).states.data
                == encode(m, ids, pad).states.data).all()


class TestLoadValidation:
    def _saved(self, tmp_path):
        m = initialize(config(), InitStrategy("random"), None, seed=2)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        return path

    def test_bad_magic(self, tmp_path):
        path = self._saved(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = self._saved(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_corrupted_header_shape(self, tmp_path):
        path = self._saved(tmp_path)
        blob = path.read_bytes()
        # the embedding is 24 rows; lie about it in the JSON header
        patched = blob.replace(b'"shape":[24,16]', b'"shape":[25,16]', 1)
        assert patched != blob
        path.write_bytes(patched)
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = self._saved(tmp_path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-1])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = self._saved(tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)


class TestInitStrategies:
    def test_random_is_seed_deterministic(self):
        a = initialize(config(), InitStrategy("random"), None, seed=3)
        b = initialize(config(), InitStrategy("random"), None, seed=3)
        c = initialize(config(), InitStrategy("random"), None, seed=4)
        assert weight_fingerprint(a) == weight_fingerprint(b)
        assert weight_fingerprint(a) != weight_fingerprint(c)

    def test_source_required_for_transfer(self):
        with pytest.raises(UsageError):
            initialize(config(), InitStrategy("encoder"), None, seed=0)

    def test_dimension_mismatch_rejected(self):
        ckpt, _ = encoder_checkpoint(hidden=32, heads=2)
        with pytest.raises(UsageError):
            initialize(config(), InitStrategy("encoder"), ckpt, seed=0)

    def test_encoder_only_preserves_encoder_function_exactly(self):
        ckpt, src = encoder_checkpoint()
        target = initialize(config(), InitStrategy("encoder"), ckpt, seed=5)
        rng = np.random.default_rng(0)
        for _ in range(10):
            ids = rng.integers(5, 24, size=(2, 6))
            pad = np.zeros_like(ids, dtype=bool)
            ours = encode(target, ids, pad).states.data
            theirs = encode(src, ids, pad).states.data
            assert (ours == theirs).all()

    def test_encoder_decoder_also_preserves_encoder(self):
        ckpt, src = encoder_checkpoint()
        target = initialize(config(), InitStrategy("encoder_decoder"), ckpt, seed=5)
        ids = np.array([[5, 9, 13, 2]])
        pad = np.zeros_like(ids, dtype=bool)
        assert (encode(target, ids, pad).states.data
                == encode(src, ids, pad).states.data).all()

    def test_share_self_attn_clones_cross_attention(self):
        ckpt, _ = encoder_checkpoint()
        m = initialize(config(), InitStrategy("encoder_decoder", "share"), ckpt, seed=6)
        for k in range(m.config.decoder_layers):
            for part in ("q_w", "k_w", "v_w", "o_w", "q_b"):
                cross = m.tensor(f"dec.{k}.cross_attn.{part}").data
                self_attn = m.tensor(f"dec.{k}.self_attn.{part}").data
                assert (cross == self_attn).all()
                assert (cross == ckpt.tensors[f"enc.{k}.attn.{part}"]).all()
            assert (m.tensor(f"dec.{k}.cross_attn_ln.g").data
                    == ckpt.tensors[f"enc.{k}.attn_ln.g"]).all()

    def test_random_cross_attention_differs_from_self(self):
        ckpt, _ = encoder_checkpoint()
        m = initialize(config(), InitStrategy("encoder_decoder", "random"), ckpt, seed=6)
        cross = m.tensor("dec.0.cross_attn.q_w").data
        self_attn = m.tensor("dec.0.self_attn.q_w").data
        assert not (cross == self_attn).all()
        assert (self_attn == ckpt.tensors["enc.0.attn.q_w"]).all()

    def test_three_strategies_have_distinct_fingerprints(self):
        ckpt, _ = encoder_checkpoint(seed=7)
        prints = {
            variant: weight_fingerprint(
                initialize(config(), InitStrategy(variant), ckpt if variant != "random"
                           else None, seed=21))
            for variant in ("random", "encoder", "encoder_decoder")
        }
        assert len(set(prints.values())) == 3

    def test_extended_vocabulary_rows_untouched(self):
        ckpt, _ = encoder_checkpoint()
        grown = initialize(config(vocab_size=30), InitStrategy("encoder"), ckpt, seed=8)
        embed = grown.tensor("tok_embed").data
        assert (embed[:24] == ckpt.tensors["tok_embed"]).all()
        assert embed[24:].std() > 0  # new language-token rows are drawn, not zeros

    def test_layer_map_top_differs_from_bottom(self):
        ckpt, _ = encoder_checkpoint()
        kw = dict(decoder_layers=1)
        bottom = initialize(config(**kw), InitStrategy("encoder_decoder", "share", "bottom"),
                            ckpt, seed=9)
        top = initialize(config(**kw), InitStrategy("encoder_decoder", "share", "top"),
                         ckpt, seed=9)
        assert (bottom.tensor("dec.0.self_attn.q_w").data
                == ckpt.tensors["enc.0.attn.q_w"]).all()
        assert (top.tensor("dec.0.self_attn.q_w").data
                == ckpt.tensors["enc.1.attn.q_w"]).all()

    def test_too_few_source_layers_rejected(self):
        ckpt, _ = encoder_checkpoint()
        with pytest.raises(UsageError):
            initialize(config(encoder_layers=3), InitStrategy("encoder"), ckpt, seed=0)


class TestAveraging:
    def _save(self, tmp_path, name, model):
        path = tmp_path / name
        save_checkpoint(model, path)
        return path

    def test_average_of_identical_is_identity(self, tmp_path):
        m = initialize(config(), InitStrategy("random"), None, seed=10)
        paths = [self._save(tmp_path, f"{i}.ckpt", m) for i in range(3)]
        avg = average_checkpoints(paths)
        for name, t in m.named_tensors():
            assert (avg.tensors[name] == t.data).all()

    def test_average_of_opposites_is_zero(self, tmp_path):
        m = initialize(config(), InitStrategy("random"), None, seed=11)
        neg = Checkpoint(m.config, {n: -t.data for n, t in m.named_tensors()})
        p1 = self._save(tmp_path, "a.ckpt", m)
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(neg, p2)
        avg = average_checkpoints([p1, p2])
        for arr in avg.tensors.values():
            assert (arr == 0).all()

    def test_average_of_shifted_pair(self, tmp_path):
        # weights on a 2^-10 grid so W, W+2, and W+1 are all exact in float32
        m = initialize(config(), InitStrategy("random"), None, seed=12)
        rng = np.random.default_rng(0)
        base = Checkpoint(m.config, {
            n: (rng.integers(-512, 512, size=t.data.shape) / 1024.0).astype(np.float32)
            for n, t in m.named_tensors()})
        shifted = Checkpoint(m.config, {n: a + 2.0 for n, a in base.tensors.items()})
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(base, p1)
        save_checkpoint(shifted, p2)
        avg = average_checkpoints([p1, p2])
        for name, arr in base.tensors.items():
            np.testing.assert_array_equal(avg.tensors[name], arr + 1.0)

    def test_average_commutes_with_permutation(self, tmp_path):
        models = [initialize(config(), InitStrategy("random"), None, seed=s)
                  for s in (13, 14, 15)]
        paths = [self._save(tmp_path, f"{i}.ckpt", m) for i, m in enumerate(models)]
        fwd = average_checkpoints(paths)
        rev = average_checkpoints(paths[::-1])
        for name in fwd.tensors:
            assert (fwd.tensors[name] == rev.tensors[name]).all()

    def test_mismatched_tables_rejected(self, tmp_path):
        a = initialize(config(), InitStrategy("random"), None, seed=16)
        b = initialize(config(hidden=32, ffn_dim=64), InitStrategy("random"), None, seed=16)
        pa = self._save(tmp_path, "a.ckpt", a)
        pb = self._save(tmp_path, "b.ckpt", b)
        with pytest.raises(UsageError):
            average_checkpoints([pa, pb])
