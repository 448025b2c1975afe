"""Transformer encoder-decoder with a pretrain-compatible layout.

The architecture mirrors an encoder-only pretrained masked-LM so its weights
can be transplanted: layer norm after the embedding, no sqrt(hidden) embedding
scaling, post layer norm around attention and feed-forward sublayers, GELU
activations, learned positions, and tied input/output embeddings. The flags on
`ModelConfig` relax each of those choices so a conventional baseline
architecture can be built from the same code for ablations.

Attention maps from every layer and head are kept on the forward results so
the probing code can read them back without re-running anything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tt
from .errors import UsageError

LN_EPS = 1e-5

_IGNORE = -1e30  # additive mask for forbidden attention keys


@dataclass
class ModelConfig:
    encoder_layers: int
    decoder_layers: int
    hidden: int
    heads: int
    ffn_dim: int
    vocab_size: int
    max_positions: int
    post_layernorm: bool = True
    embed_layernorm: bool = True
    scale_embeddings: bool = False
    activation: str = "gelu"
    tie_embeddings: bool = True
    dropout: float = 0.1
    attention_dropout: float = 0.0

    def validate(self) -> "ModelConfig":
        if self.encoder_layers < 1:
            raise UsageError("encoder_layers must be >= 1")
        if self.decoder_layers < 0:
            raise UsageError("decoder_layers must be >= 0")
        if self.hidden < 1 or self.hidden % self.heads != 0:
            raise UsageError("hidden must be a positive multiple of heads")
        if self.ffn_dim < 1:
            raise UsageError("ffn_dim must be >= 1")
        if self.vocab_size < 1:
            raise UsageError("vocab_size must be >= 1")
        if not 1 <= self.max_positions <= 256:
            raise UsageError("max_positions must be in [1, 256]")
        if self.activation != "gelu":
            raise UsageError(f"unsupported activation: {self.activation}")
        for name in ("dropout", "attention_dropout"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise UsageError(f"{name} must be in [0, 1)")
        return self

    def is_pretrain_compatible(self) -> bool:
        return (self.post_layernorm and self.embed_layernorm
                and not self.scale_embeddings and self.activation == "gelu"
                and self.tie_embeddings)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d).validate()


def _attn_shapes(prefix: str, h: int):
    return [
        (f"{prefix}.q_w", (h, h)), (f"{prefix}.q_b", (h,)),
        (f"{prefix}.k_w", (h, h)), (f"{prefix}.k_b", (h,)),
        (f"{prefix}.v_w", (h, h)), (f"{prefix}.v_b", (h,)),
        (f"{prefix}.o_w", (h, h)), (f"{prefix}.o_b", (h,)),
    ]


def _ln_shapes(prefix: str, h: int):
    return [(f"{prefix}.g", (h,)), (f"{prefix}.b", (h,))]


def shape_table(config: ModelConfig):
    """Ordered (name, shape) directory of every weight tensor.

    This is the normative layout for checkpoints: shapes are fully determined
    by the config, and the payload of a checkpoint file stores tensors in
    exactly this order. When `tie_embeddings` is set there is no `out_proj`
    entry; `tok_embed` serves encoder input, decoder input, and the output
    projection.
    """
    h, f = config.hidden, config.ffn_dim
    table = [("tok_embed", (config.vocab_size, h))]
    table.append(("enc.pos_embed", (config.max_positions, h)))
    if config.embed_layernorm:
        table += _ln_shapes("enc.embed_ln", h)
    for i in range(config.encoder_layers):
        table += _attn_shapes(f"enc.{i}.attn", h)
        table += _ln_shapes(f"enc.{i}.attn_ln", h)
        table += [
            (f"enc.{i}.ffn.in_w", (h, f)), (f"enc.{i}.ffn.in_b", (f,)),
            (f"enc.{i}.ffn.out_w", (f, h)), (f"enc.{i}.ffn.out_b", (h,)),
        ]
        table += _ln_shapes(f"enc.{i}.ffn_ln", h)
    if not config.post_layernorm:
        table += _ln_shapes("enc.final_ln", h)
    if config.decoder_layers > 0:
        table.append(("dec.pos_embed", (config.max_positions, h)))
        if config.embed_layernorm:
            table += _ln_shapes("dec.embed_ln", h)
        for i in range(config.decoder_layers):
            table += _attn_shapes(f"dec.{i}.self_attn", h)
            table += _ln_shapes(f"dec.{i}.self_attn_ln", h)
            table += _attn_shapes(f"dec.{i}.cross_attn", h)
            table += _ln_shapes(f"dec.{i}.cross_attn_ln", h)
            table += [
                (f"dec.{i}.ffn.in_w", (h, f)), (f"dec.{i}.ffn.in_b", (f,)),
                (f"dec.{i}.ffn.out_w", (f, h)), (f"dec.{i}.ffn.out_b", (h,)),
            ]
            table += _ln_shapes(f"dec.{i}.ffn_ln", h)
        if not config.post_layernorm:
            table += _ln_shapes("dec.final_ln", h)
    if not config.tie_embeddings:
        table.append(("out_proj", (config.vocab_size, h)))
    return table


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in shape_table(config))


class TransformerModel:
    """Config plus the named weight tensors of the shape table."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: ModelConfig, init_fn) -> "TransformerModel":
        """Allocate all weights; `init_fn(name, shape)` supplies each array."""
        config.validate()
        params = {}
        for name, shape in shape_table(config):
            data = np.asarray(init_fn(name, shape), dtype=tt.default_dtype())
            if data.shape != shape:
                raise UsageError(f"init for {name} produced shape {data.shape}, want {shape}")
            params[name] = tt.Tensor(data, requires_grad=True)
        return cls(config, params)

    def tensor(self, name: str) -> tt.Tensor:
        return self.params[name]

    def named_tensors(self):
        """(name, Tensor) pairs in shape-table order."""
        return [(name, self.params[name]) for name, _ in shape_table(self.config)]

    def output_matrix(self) -> tt.Tensor:
        return self.params["tok_embed" if self.config.tie_embeddings else "out_proj"]

    def num_parameters(self) -> int:
        return sum(t.data.size for _, t in self.named_tensors())


@dataclass
class EncodedBatch:
    states: tt.Tensor                   # [batch, src_len, hidden]
    attention: list = field(default_factory=list)  # per layer: [batch, heads, src, src]
    layer_states: list = field(default_factory=list)  # per layer: [batch, src_len, hidden]
    pad_mask: np.ndarray = None         # [batch, src_len], True where padding
    tokens: np.ndarray = None


@dataclass
class DecodeResult:
    logits: tt.Tensor                   # [batch, tgt_len, vocab]
    self_attention: list = field(default_factory=list)
    cross_attention: list = field(default_factory=list)


def _check_tokens(config: ModelConfig, tokens: np.ndarray, what: str) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise UsageError(f"{what} tokens must be a 2-d id matrix")
    if tokens.shape[1] > config.max_positions:
        raise UsageError(
            f"{what} length {tokens.shape[1]} exceeds max_positions {config.max_positions}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise UsageError(f"{what} contains out-of-vocabulary ids")
    return tokens


def _key_pad_bias(pad_mask: np.ndarray) -> np.ndarray:
    # [batch, 1, 1, keys]; masked keys get a large negative pre-softmax bias
    bias = np.where(pad_mask, _IGNORE, 0.0).astype(tt.default_dtype())
    return bias[:, None, None, :]


def _causal_bias(length: int) -> np.ndarray:
    bias = np.triu(np.full((length, length), _IGNORE, dtype=tt.default_dtype()), k=1)
    return bias[None, None, :, :]


def _attention(params, prefix, q_in, kv_in, bias, config, training, rng):
    batch, q_len, h = q_in.shape
    kv_len = kv_in.shape[1]
    heads = config.heads
    d = h // heads

    def project(tag, x, length):
        y = tt.linear(x, params[f"{prefix}.{tag}_w"], params[f"{prefix}.{tag}_b"])
        y = tt.reshape(y, (batch, length, heads, d))
        return tt.transpose(y, (0, 2, 1, 3))

    q = project("q", q_in, q_len)
    k = project("k", kv_in, kv_len)
    v = project("v", kv_in, kv_len)
    scores = tt.scale(tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    if bias is not None:
        scores = tt.add(scores, tt.constant(bias))
    attn = tt.softmax(scores, -1)
    maps = attn.data  # pre-dropout, [batch, heads, q_len, kv_len]
    attn = tt.dropout(attn, config.attention_dropout, rng, training)
    ctx = tt.matmul(attn, v)
    ctx = tt.reshape(tt.transpose(ctx, (0, 2, 1, 3)), (batch, q_len, h))
    out = tt.linear(ctx, params[f"{prefix}.o_w"], params[f"{prefix}.o_b"])
    return out, maps


def _ffn(params, prefix, x):
    y = tt.gelu(tt.linear(x, params[f"{prefix}.in_w"], params[f"{prefix}.in_b"]))
    return tt.linear(y, params[f"{prefix}.out_w"], params[f"{prefix}.out_b"])


def _ln(params, prefix, x):
    return tt.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], LN_EPS)


def _embed_front(model, side, tokens, training, rng):
    cfg = model.config
    params = model.params
    x = tt.embedding(params["tok_embed"], tokens)
    if cfg.scale_embeddings:
        x = tt.scale(x, math.sqrt(cfg.hidden))
    positions = tt.embedding(params[f"{side}.pos_embed"], np.arange(tokens.shape[1]))
    x = tt.add(x, positions)
    if cfg.embed_layernorm:
        x = _ln(params, f"{side}.embed_ln", x)
    return tt.dropout(x, cfg.dropout, rng, training)


def _sublayer(params, ln_prefix, x, compute, cfg, training, rng):
    """Residual sublayer in post-LN (norm after add) or pre-LN layout."""
    if cfg.post_layernorm:
        out, extra = compute(x)
        y = tt.add(x, tt.dropout(out, cfg.dropout, rng, training))
        return _ln(params, ln_prefix, y), extra
    out, extra = compute(_ln(params, ln_prefix, x))
    return tt.add(x, tt.dropout(out, cfg.dropout, rng, training)), extra


def encode(model: TransformerModel, tokens, pad_mask, training: bool = False,
           rng: np.random.Generator | None = None) -> EncodedBatch:
    """Run the encoder stack, capturing every layer's attention maps."""
    cfg = model.config
    tokens = _check_tokens(cfg, tokens, "source")
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if pad_mask.shape != tokens.shape:
        raise UsageError("pad mask must match the token matrix shape")
    if pad_mask.all(axis=1).any():
        raise UsageError("a source row is entirely padding")
    params = model.params
    bias = _key_pad_bias(pad_mask)

    x = _embed_front(model, "enc", tokens, training, rng)
    maps = []
    layer_states = []
    for i in range(cfg.encoder_layers):
        x, attn = _sublayer(
            params, f"enc.{i}.attn_ln", x,
            lambda q: _attention(params, f"enc.{i}.attn", q, q, bias, cfg, training, rng),
            cfg, training, rng)
        maps.append(attn)
        x, _ = _sublayer(
            params, f"enc.{i}.ffn_ln", x,
            lambda q: (_ffn(params, f"enc.{i}.ffn", q), None),
            cfg, training, rng)
        layer_states.append(x.data)
    if not cfg.post_layernorm:
        x = _ln(params, "enc.final_ln", x)
    return EncodedBatch(states=x, attention=maps, layer_states=layer_states,
                        pad_mask=pad_mask, tokens=tokens)


def decode(model: TransformerModel, tgt_tokens, enc: EncodedBatch,
           training: bool = False, rng: np.random.Generator | None = None) -> DecodeResult:
    """Causal decoder over `enc`; returns logits and both attention stacks."""
    cfg = model.config
    if cfg.decoder_layers < 1:
        raise UsageError("model has no decoder")
    tokens = _check_tokens(cfg, tgt_tokens, "target")
    params = model.params
    causal = _causal_bias(tokens.shape[1])
    cross_bias = _key_pad_bias(enc.pad_mask)

    x = _embed_front(model, "dec", tokens, training, rng)
    self_maps, cross_maps = [], []
    for i in range(cfg.decoder_layers):
        x, attn = _sublayer(
            params, f"dec.{i}.self_attn_ln", x,
            lambda q: _attention(params, f"dec.{i}.self_attn", q, q, causal, cfg, training, rng),
            cfg, training, rng)
        self_maps.append(attn)
        x, attn = _sublayer(
            params, f"dec.{i}.cross_attn_ln", x,
            lambda q: _attention(params, f"dec.{i}.cross_attn", q, enc.states,
                                 cross_bias, cfg, training, rng),
            cfg, training, rng)
        cross_maps.append(attn)
        x, _ = _sublayer(
            params, f"dec.{i}.ffn_ln", x,
            lambda q: (_ffn(params, f"dec.{i}.ffn", q), None),
            cfg, training, rng)
    if not cfg.post_layernorm:
        x = _ln(params, "dec.final_ln", x)
    logits = tt.matmul(x, tt.transpose(model.output_matrix(), (1, 0)))
    return DecodeResult(logits=logits, self_attention=self_maps, cross_attention=cross_maps)
