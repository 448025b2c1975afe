"""Model initialization: random, encoder-only, or encoder-and-decoder.

The two transfer strategies transplant a pretrained encoder checkpoint into a
fresh translation model. Encoder-only copies the token/positional embeddings,
the embedding layer norm, and every encoder block; the decoder stays random.
Encoder-and-decoder additionally fills decoder block k from a source encoder
layer (bottom-up mapping by default, top slice as an option), with the
cross-attention sublayer either cloned from that layer's self-attention or
left random. Embedding rows beyond the source vocabulary (new language
tokens) and positions beyond the source table are drawn from the random
scheme; copied rows are never perturbed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .checkpoint import Checkpoint
from .errors import UsageError
from .model import ModelConfig, TransformerModel

RANDOM_STD = 0.02

_VARIANTS = ("random", "encoder", "encoder_decoder")
_CROSS = ("share", "random")
_MAPS = ("bottom", "top")


@dataclass(frozen=True)
class InitStrategy:
    variant: str = "random"
    cross_attention: str = "share"
    layer_map: str = "bottom"

    def validate(self) -> "InitStrategy":
        if self.variant not in _VARIANTS:
            raise UsageError(f"unknown init variant: {self.variant}")
        if self.cross_attention not in _CROSS:
            raise UsageError(f"unknown cross-attention policy: {self.cross_attention}")
        if self.layer_map not in _MAPS:
            raise UsageError(f"unknown layer map: {self.layer_map}")
        return self


def random_value(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    """The seeded random scheme: N(0, 0.02) weights, zero biases, unit gains."""
    if name.endswith(".g"):
        return np.ones(shape)
    if name.endswith((".b", "_b")):
        return np.zeros(shape)
    return rng.normal(0.0, RANDOM_STD, size=shape)


def _check_source_compatible(config: ModelConfig, src: ModelConfig) -> None:
    for attr in ("hidden", "heads", "ffn_dim"):
        if getattr(config, attr) != getattr(src, attr):
            raise UsageError(
                f"source checkpoint {attr}={getattr(src, attr)} does not match "
                f"target {attr}={getattr(config, attr)}")
    for attr in ("post_layernorm", "embed_layernorm", "scale_embeddings", "activation"):
        if getattr(config, attr) != getattr(src, attr):
            raise UsageError(
                f"source architecture flag {attr} differs from the target config")


def _copy_plan(config: ModelConfig, strategy: InitStrategy, src: ModelConfig) -> dict:
    """Map of target tensor name -> (source tensor name, 'full' | 'rows')."""
    plan = {
        "tok_embed": ("tok_embed", "rows"),
        "enc.pos_embed": ("enc.pos_embed", "rows"),
    }
    if config.embed_layernorm:
        plan["enc.embed_ln.g"] = ("enc.embed_ln.g", "full")
        plan["enc.embed_ln.b"] = ("enc.embed_ln.b", "full")
    if src.encoder_layers < config.encoder_layers:
        raise UsageError(
            f"source has {src.encoder_layers} encoder layers, target needs "
            f"{config.encoder_layers}")
    for k in range(config.encoder_layers):
        for part in ("attn", "attn_ln", "ffn", "ffn_ln"):
            plan[f"enc.{k}.{part}"] = (f"enc.{k}.{part}", "block")
    if not config.post_layernorm:
        plan["enc.final_ln.g"] = ("enc.final_ln.g", "full")
        plan["enc.final_ln.b"] = ("enc.final_ln.b", "full")

    if strategy.variant == "encoder_decoder" and config.decoder_layers > 0:
        if src.encoder_layers < config.decoder_layers:
            raise UsageError(
                f"source has {src.encoder_layers} encoder layers, decoder needs "
                f"{config.decoder_layers}")
        plan["dec.pos_embed"] = ("enc.pos_embed", "rows")
        if config.embed_layernorm:
            plan["dec.embed_ln.g"] = ("enc.embed_ln.g", "full")
            plan["dec.embed_ln.b"] = ("enc.embed_ln.b", "full")
        for k in range(config.decoder_layers):
            if strategy.layer_map == "bottom":
                s = k
            else:
                s = src.encoder_layers - config.decoder_layers + k
            plan[f"dec.{k}.self_attn"] = (f"enc.{s}.attn", "block")
            plan[f"dec.{k}.self_attn_ln"] = (f"enc.{s}.attn_ln", "block")
            if strategy.cross_attention == "share":
                plan[f"dec.{k}.cross_attn"] = (f"enc.{s}.attn", "block")
                plan[f"dec.{k}.cross_attn_ln"] = (f"enc.{s}.attn_ln", "block")
            plan[f"dec.{k}.ffn"] = (f"enc.{s}.ffn", "block")
            plan[f"dec.{k}.ffn_ln"] = (f"enc.{s}.ffn_ln", "block")
        if not config.post_layernorm:
            plan["dec.final_ln.g"] = ("enc.final_ln.g", "full")
            plan["dec.final_ln.b"] = ("enc.final_ln.b", "full")
    return plan


def _expand_blocks(plan: dict) -> dict:
    """Rewrite block entries ('enc.0.attn') into per-tensor ('enc.0.attn.q_w')."""
    attn_parts = ("q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "o_w", "o_b")
    expanded = {}
    for dst, (src, kind) in plan.items():
        if kind != "block":
            expanded[dst] = (src, kind)
            continue
        parts = ("g", "b") if dst.endswith("_ln") else (
            ("in_w", "in_b", "out_w", "out_b") if dst.endswith(".ffn") else attn_parts)
        for part in parts:
            expanded[f"{dst}.{part}"] = (f"{src}.{part}", "full")
    return expanded


def initialize(config: ModelConfig, strategy: InitStrategy,
               source: Checkpoint | None, seed: int) -> TransformerModel:
    """Build a model under `strategy`, drawing randomness from `seed` only."""
    config.validate()
    strategy.validate()
    rng = np.random.default_rng(seed)
    if strategy.variant == "random":
        return TransformerModel.build(config, lambda n, s: random_value(n, s, rng))
    if source is None:
        raise UsageError(f"init strategy '{strategy.variant}' needs a source checkpoint")
    _check_source_compatible(config, source.config)
    plan = _expand_blocks(_copy_plan(config, strategy, source.config))

    def init_fn(name, shape):
        value = random_value(name, shape, rng)
        entry = plan.get(name)
        if entry is None:
            return value
        src_name, kind = entry
        src = source.tensors[src_name]
        if kind == "full":
            if src.shape != shape:
                raise UsageError(
                    f"cannot copy {src_name} {src.shape} into {name} {shape}")
            return src.copy()
        # row-extendable tables: copy the shared prefix, keep random tail rows
        if src.shape[1:] != shape[1:]:
            raise UsageError(
                f"row copy for {name} needs matching trailing dims, "
                f"got {src.shape} vs {shape}")
        rows = min(src.shape[0], shape[0])
        value = np.asarray(value, dtype=tt.default_dtype())
        value[:rows] = src[:rows]
        return value

    return TransformerModel.build(config, init_fn)


def weight_fingerprint(model: TransformerModel) -> str:
    """Order-stable digest of every weight tensor, for change detection."""
    digest = hashlib.sha256()
    for name, t in model.named_tensors():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(t.data).tobytes())
    return digest.hexdigest()
