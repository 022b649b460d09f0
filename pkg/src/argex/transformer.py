"""Tiny randomly initialized encoder-decoder transformer with prefix injection.

Self-attention blocks accept extra key/value rows (a prefix) that join every
query's attention computation without occupying input positions; the output
is sliced back to the input length. Prefix rows may carry per-row gate
weights that multiply their attention mass before normalization, so a fully
closed gate removes a prefix row exactly (the no-prefix model is recovered
bit-for-bit up to float rounding) while a fully open gate reduces to plain
key/value concatenation.

The decoder is non-causal: this stack extracts spans, it does not generate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import numerics as nm
from .data import ConfigError
from .numerics import ContractViolation, ShapeError, Tensor
from .numerics import _accum, _make as _make_node


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 2
    n_enc_layers: int = 2
    n_dec_layers: int = 1
    ffn_dim: int = 64
    vocab_size: int = 0
    max_seq_len: int = 128
    msl: int = 10
    len_ins: int = 8
    len_tem: int = 4
    dropout_rate: float = 0.0
    layer_norm_eps: float = 1e-5
    variant: str = "full"
    template_variant: str = "type-part"  # or "type-markers"
    loss_reduction: str = "sum"  # "sum" (as defined) or "mean" over batch

    def validate(self) -> None:
        if self.d_model < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.msl < 2:
            raise ConfigError(f"msl must be >= 2, got {self.msl}")
        if self.len_ins < 0 or self.len_tem < 0:
            raise ConfigError("prefix lengths must be >= 0 (0 disables the family)")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be set")
        if self.template_variant not in ("type-part", "type-markers"):
            raise ConfigError(f"unknown template_variant {self.template_variant!r}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigError(f"unknown loss_reduction {self.loss_reduction!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PrefixKV:
    """Gated key/value rows injected into one self-attention call.

    gate, when present, holds the per-row attention-mass weights (the same
    lambda*a vector already multiplied into key/value); gate=None means the
    rows join ungated, i.e. classic prefix tuning.
    """

    key: Tensor
    value: Tensor
    gate: Optional[Tensor] = None

    def __post_init__(self):
        if self.key.shape != self.value.shape:
            raise nm.ShapeError(f"prefix key {self.key.shape} vs value {self.value.shape}")
        if self.gate is not None and self.gate.data.size != self.key.shape[0]:
            raise nm.ShapeError(f"gate size {self.gate.shape} vs prefix length {self.key.shape[0]}")

    @property
    def length(self) -> int:
        return self.key.shape[0]


# A provider maps (layer_index, layer_input) -> PrefixKV or None. The
# prefixes module supplies the event-guided implementation.
PrefixProvider = Callable[[int, Tensor], Optional[PrefixKV]]


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                        col_weights: Optional[Tensor] = None) -> Tensor:
    """Scaled dot-product attention over all heads in one taped node.

    q is n-by-m; k and v are L-by-m (token keys/values, possibly with
    prefix rows in front). col_weights, when given, multiplies column j's
    exponential in every row's softmax (the gated-prefix mass weighting);
    weights must be nonnegative and a zero weight removes the column from
    the distribution exactly. Output is n-by-m, heads re-concatenated.
    """
    n, m = q.shape
    length = k.shape[0]
    if m % n_heads != 0:
        raise ShapeError(f"d_model {m} not divisible by {n_heads} heads")
    if k.shape != (length, m) or v.shape != (length, m):
        raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    d = m // n_heads
    inv_sqrt = 1.0 / math.sqrt(d)

    qh = q.data.reshape(n, n_heads, d).transpose(1, 0, 2)
    kh = k.data.reshape(length, n_heads, d).transpose(1, 0, 2)
    vh = v.data.reshape(length, n_heads, d).transpose(1, 0, 2)
    logits = (qh @ kh.transpose(0, 2, 1)) * inv_sqrt  # (h, n, L)
    u = np.exp(logits - logits.max(axis=2, keepdims=True))
    if col_weights is not None:
        w = col_weights.data.reshape(-1)
        if w.shape[0] != length:
            raise ShapeError(f"{w.shape[0]} column weights for {length} keys")
        if np.any(w < 0):
            raise ContractViolation("negative attention column weight")
        un = u * w
    else:
        w = None
        un = u
    z = un.sum(axis=2, keepdims=True)
    if np.any(z == 0.0):
        raise ContractViolation("attention row with all-zero mass")
    attn = un / z
    out = (attn @ vh).transpose(1, 0, 2).reshape(n, m)

    def back(g: np.ndarray) -> None:
        gh = g.reshape(n, n_heads, d).transpose(1, 0, 2)
        d_attn = gh @ vh.transpose(0, 2, 1)          # (h, n, L)
        r = (d_attn * attn).sum(axis=2, keepdims=True)
        d_logits = attn * (d_attn - r)
        if v.requires_grad:
            _accum(v, (attn.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(length, m))
        if q.requires_grad:
            _accum(q, ((d_logits @ kh) * inv_sqrt).transpose(1, 0, 2).reshape(n, m))
        if k.requires_grad:
            _accum(k, ((d_logits.transpose(0, 2, 1) @ qh) * inv_sqrt).transpose(1, 0, 2).reshape(length, m))
        if col_weights is not None and col_weights.requires_grad:
            dw = ((u / z) * (d_attn - r)).sum(axis=(0, 1))
            _accum(col_weights, dw.reshape(col_weights.shape))

    inputs = (q, k, v) if col_weights is None else (q, k, v, col_weights)
    return _make_node(out, back, *inputs)


def init_transformer_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Scaled-normal (std 0.02) init for weights, zeros for biases,
    ones/zeros for layer-norm gain/shift."""

    params: dict[str, Tensor] = {}
    m, f = config.d_model, config.ffn_dim

    def w(name: str, shape: tuple[int, ...]) -> None:
        params[name] = Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def zeros(name: str, shape: tuple[int, ...]) -> None:
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name: str, shape: tuple[int, ...]) -> None:
        params[name] = Tensor(np.ones(shape), requires_grad=True)

    w("embed.token", (config.vocab_size, m))
    w("embed.pos", (config.max_seq_len, m))

    def attn_block(prefix: str) -> None:
        for nm_ in ("wq", "wk", "wv", "wo"):
            w(f"{prefix}.{nm_}", (m, m))

    for i in range(config.n_enc_layers):
        base = f"enc.layer.{i}"
        attn_block(f"{base}.attn")
        ones(f"{base}.ln1.gamma", (m,))
        zeros(f"{base}.ln1.beta", (m,))
        w(f"{base}.ffn.w1", (m, f))
        zeros(f"{base}.ffn.b1", (f,))
        w(f"{base}.ffn.w2", (f, m))
        zeros(f"{base}.ffn.b2", (m,))
        ones(f"{base}.ln2.gamma", (m,))
        zeros(f"{base}.ln2.beta", (m,))
    for i in range(config.n_dec_layers):
        base = f"dec.layer.{i}"
        attn_block(f"{base}.attn")
        ones(f"{base}.ln1.gamma", (m,))
        zeros(f"{base}.ln1.beta", (m,))
        attn_block(f"{base}.cross")
        ones(f"{base}.ln2.gamma", (m,))
        zeros(f"{base}.ln2.beta", (m,))
        w(f"{base}.ffn.w1", (m, f))
        zeros(f"{base}.ffn.b1", (f,))
        w(f"{base}.ffn.w2", (f, m))
        zeros(f"{base}.ffn.b2", (m,))
        ones(f"{base}.ln3.gamma", (m,))
        zeros(f"{base}.ln3.beta", (m,))

    w("span.w_start", (1, m))
    w("span.w_end", (1, m))
    return params


class TransformerCore:
    """Parameter container plus forward passes."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        config.validate()
        self.config = config
        self.params = params
        self._drop_rng: np.random.Generator | None = None

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "TransformerCore":
        config.validate()
        return cls(config, init_transformer_params(config, rng))

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        self._drop_rng = rng

    # -- building blocks ----------------------------------------------------

    def embed_tokens(self, ids: list[int]) -> Tensor:
        if len(ids) > self.config.max_seq_len:
            raise nm.ShapeError(
                f"sequence of {len(ids)} tokens exceeds max_seq_len {self.config.max_seq_len}"
            )
        tok = nm.gather_rows(self.params["embed.token"], ids)
        pos = nm.gather_rows(self.params["embed.pos"], list(range(len(ids))))
        return nm.add(tok, pos)

    def _drop(self, x: Tensor) -> Tensor:
        if self.config.dropout_rate > 0.0 and self._drop_rng is not None:
            return nm.dropout(x, self.config.dropout_rate, self._drop_rng)
        return x

    def _attend(self, q_src: Tensor, kv_src: Tensor, base: str,
                prefix: Optional[PrefixKV]) -> Tensor:
        """Multi-head attention core: queries from q_src, keys/values from
        kv_src plus optional prefix rows; returns the pre-residual output."""
        p = self.params
        q = nm.matmul(q_src, p[f"{base}.wq"])
        k = nm.matmul(kv_src, p[f"{base}.wk"])
        v = nm.matmul(kv_src, p[f"{base}.wv"])
        col_w = None
        if prefix is not None and prefix.length > 0:
            k = nm.concat_rows([prefix.key, k])
            v = nm.concat_rows([prefix.value, v])
            if prefix.gate is not None:
                if prefix.gate.data.ndim != 2:
                    raise ShapeError("prefix gate must be a 1-by-len tensor")
                col_w = nm.concat_cols([prefix.gate, Tensor(np.ones((1, kv_src.shape[0])))])
        out = multihead_attention(q, k, v, self.config.n_heads, col_w)
        return nm.matmul(out, p[f"{base}.wo"])

    def prefixed_self_attention(self, hidden: Tensor, base: str, ln: str,
                                prefix: Optional[PrefixKV]) -> Tensor:
        """Self-attention sublayer with optional prefix, residual, layer norm.

        The output always has exactly as many rows as the input; prefix rows
        only ever appear on the key/value side.
        """
        if hidden.shape[0] == 0:
            raise nm.ShapeError("attention over an empty sequence")
        attended = self._drop(self._attend(hidden, hidden, base, prefix))
        return nm.layer_norm(
            nm.add(attended, hidden),
            self.params[f"{ln}.gamma"], self.params[f"{ln}.beta"],
            self.config.layer_norm_eps,
        )

    def cross_attention(self, hidden: Tensor, source: Tensor, base: str, ln: str) -> Tensor:
        """Queries from hidden, keys/values from source; never prefixed."""
        if hidden.shape[0] == 0 or source.shape[0] == 0:
            raise nm.ShapeError("cross-attention over an empty sequence")
        attended = self._drop(self._attend(hidden, source, base, None))
        return nm.layer_norm(
            nm.add(attended, hidden),
            self.params[f"{ln}.gamma"], self.params[f"{ln}.beta"],
            self.config.layer_norm_eps,
        )

    def _ffn(self, hidden: Tensor, base: str, ln: str) -> Tensor:
        p = self.params
        x = nm.add_bias(nm.matmul(hidden, p[f"{base}.w1"]), p[f"{base}.b1"])
        x = nm.add_bias(nm.matmul(nm.gelu(x), p[f"{base}.w2"]), p[f"{base}.b2"])
        return nm.layer_norm(
            nm.add(self._drop(x), hidden),
            p[f"{ln}.gamma"], p[f"{ln}.beta"], self.config.layer_norm_eps,
        )

    # -- stacks -------------------------------------------------------------

    def encoder_forward(self, ids: list[int], provider: Optional[PrefixProvider]) -> Tensor:
        hidden = self.embed_tokens(ids)
        for i in range(self.config.n_enc_layers):
            prefix = provider(i, hidden) if provider is not None else None
            hidden = self.prefixed_self_attention(hidden, f"enc.layer.{i}.attn", f"enc.layer.{i}.ln1", prefix)
            hidden = self._ffn(hidden, f"enc.layer.{i}.ffn", f"enc.layer.{i}.ln2")
        return hidden

    def decoder_forward(self, hidden_in: Tensor, cross_src: Tensor,
                        provider: Optional[PrefixProvider]) -> Tensor:
        hidden = hidden_in
        for i in range(self.config.n_dec_layers):
            prefix = provider(i, hidden) if provider is not None else None
            hidden = self.prefixed_self_attention(hidden, f"dec.layer.{i}.attn", f"dec.layer.{i}.ln1", prefix)
            hidden = self.cross_attention(hidden, cross_src, f"dec.layer.{i}.cross", f"dec.layer.{i}.ln2")
            hidden = self._ffn(hidden, f"dec.layer.{i}.ffn", f"dec.layer.{i}.ln3")
        return hidden
