"""Transformer caption decoder.

Pre-norm layers, each: masked self-attention, cross-attention over the
refined feature context, then a position-wise feed-forward block, every
sub-layer wrapped in a residual connection.  Final states project onto the
vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ssff import glorot


class VocabularyError(ValueError):
    """A token id falls outside the embedding table."""


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    """Fixed sine/cosine position table (max_len x d)."""
    pos = np.arange(max_len)[:, None].astype(np.float64)
    dim = np.arange(d)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def causal_mask(l: int) -> np.ndarray:
    """Lower-triangular allow mask: position i may attend to j <= i."""
    if l < 1:
        raise ValueError(f"mask length must be >= 1, got {l}")
    return np.tril(np.ones((l, l), dtype=bool))


@dataclass
class AttentionBlock:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor

    @classmethod
    def init(cls, rng, d: int) -> "AttentionBlock":
        return cls(*(glorot(rng, d, d) for _ in range(4)))


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d: int) -> "LayerNormParams":
        return cls(gain=Tensor(np.ones((1, d)), requires_grad=True),
                   bias=Tensor(np.zeros((1, d)), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm_rows(x, self.gain, self.bias)


@dataclass
class DecoderLayer:
    ln_self: LayerNormParams
    self_attn: AttentionBlock
    ln_cross: LayerNormParams
    cross_attn: AttentionBlock
    ln_ffw: LayerNormParams
    ffw_in: Tensor     # d x ffw
    ffw_in_b: Tensor   # 1 x ffw
    ffw_out: Tensor    # ffw x d
    ffw_out_b: Tensor  # 1 x d

    @classmethod
    def init(cls, rng, d: int, ffw: int) -> "DecoderLayer":
        return cls(
            ln_self=LayerNormParams.init(d),
            self_attn=AttentionBlock.init(rng, d),
            ln_cross=LayerNormParams.init(d),
            cross_attn=AttentionBlock.init(rng, d),
            ln_ffw=LayerNormParams.init(d),
            ffw_in=glorot(rng, d, ffw),
            ffw_in_b=Tensor(np.zeros((1, ffw)), requires_grad=True),
            ffw_out=glorot(rng, ffw, d),
            ffw_out_b=Tensor(np.zeros((1, d)), requires_grad=True),
        )


@dataclass
class DecoderParams:
    embed: Tensor                  # V_b x d_h token table
    positions: np.ndarray          # max_len x d_h, fixed
    layers: list[DecoderLayer]
    ln_final: LayerNormParams
    out_proj: Tensor               # V_b x d_h
    out_bias: Tensor               # 1 x V_b
    heads: int

    @classmethod
    def init(cls, rng, vocab_size: int, d_h: int, heads: int,
             n_layers: int, ffw: int, max_len: int) -> "DecoderParams":
        if d_h % heads:
            raise ValueError(f"decoder dim {d_h} not divisible by {heads} heads")
        return cls(
            embed=Tensor(rng.normal(0.0, 0.02, (vocab_size, d_h)),
                         requires_grad=True),
            positions=sinusoidal_positions(max_len, d_h),
            layers=[DecoderLayer.init(rng, d_h, ffw) for _ in range(n_layers)],
            ln_final=LayerNormParams.init(d_h),
            out_proj=glorot(rng, vocab_size, d_h),
            out_bias=Tensor(np.zeros((1, vocab_size)), requires_grad=True),
            heads=heads,
        )

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def max_len(self) -> int:
        return self.positions.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        named = {"dec.embed": self.embed, "dec.out_proj": self.out_proj,
                 "dec.out_bias": self.out_bias,
                 "dec.ln_final.gain": self.ln_final.gain,
                 "dec.ln_final.bias": self.ln_final.bias}
        for i, layer in enumerate(self.layers):
            p = f"dec.layer{i}"
            named.update({
                f"{p}.ln_self.gain": layer.ln_self.gain,
                f"{p}.ln_self.bias": layer.ln_self.bias,
                f"{p}.self.W_q": layer.self_attn.W_q,
                f"{p}.self.W_k": layer.self_attn.W_k,
                f"{p}.self.W_v": layer.self_attn.W_v,
                f"{p}.self.W_o": layer.self_attn.W_o,
                f"{p}.ln_cross.gain": layer.ln_cross.gain,
                f"{p}.ln_cross.bias": layer.ln_cross.bias,
                f"{p}.cross.W_q": layer.cross_attn.W_q,
                f"{p}.cross.W_k": layer.cross_attn.W_k,
                f"{p}.cross.W_v": layer.cross_attn.W_v,
                f"{p}.cross.W_o": layer.cross_attn.W_o,
                f"{p}.ln_ffw.gain": layer.ln_ffw.gain,
                f"{p}.ln_ffw.bias": layer.ln_ffw.bias,
                f"{p}.ffw_in": layer.ffw_in,
                f"{p}.ffw_in_b": layer.ffw_in_b,
                f"{p}.ffw_out": layer.ffw_out,
                f"{p}.ffw_out_b": layer.ffw_out_b,
            })
        return named


@dataclass
class DecoderOutput:
    logits: Tensor                      # l x V_b
    cross_attention: list[np.ndarray] = field(default_factory=list)


def embed_tokens(ids: list[int], params: DecoderParams) -> Tensor:
    """Token table lookup plus the fixed positional encoding."""
    if not ids:
        raise VocabularyError("cannot embed an empty id sequence")
    if min(ids) < 0 or max(ids) >= params.vocab_size:
        raise VocabularyError(
            f"token id outside vocabulary of size {params.vocab_size}")
    if len(ids) > params.max_len:
        raise ValueError(
            f"sequence length {len(ids)} exceeds max_len {params.max_len}")
    looked_up = ad.gather_rows(params.embed, ids)
    return ad.add(looked_up, Tensor(params.positions[: len(ids)]))


def _multi_head(q_in: Tensor, kv_in: Tensor, block: AttentionBlock, heads: int,
                allow: np.ndarray | None = None):
    """Shared attention machinery; returns output and mean-head weights."""
    d = q_in.shape[1]
    d_head = d // heads
    q = ad.matmul(q_in, block.W_q)
    k = ad.matmul(kv_in, block.W_k)
    v = ad.matmul(kv_in, block.W_v)
    outs = []
    mean_weights = np.zeros((q_in.shape[0], kv_in.shape[0]))
    for h in range(heads):
        j0, j1 = h * d_head, (h + 1) * d_head
        qh = ad.slice_cols(q, j0, j1)
        kh = ad.slice_cols(k, j0, j1)
        vh = ad.slice_cols(v, j0, j1)
        logits = ad.matmul(qh, ad.transpose(kh))
        scale = 1.0 / np.sqrt(d_head)
        if allow is not None:
            weights = ad.masked_softmax_rows(logits, allow, scale=scale)
        else:
            weights = ad.softmax_rows(logits, scale=scale)
        mean_weights += weights.data / heads
        outs.append(ad.matmul(weights, vh))
    return ad.matmul(ad.concat_cols(outs), block.W_o), mean_weights


def decode(context: Tensor, ids: list[int], params: DecoderParams,
           want_attention: bool = False) -> DecoderOutput:
    """Run the full decoder stack over a token prefix.

    Returns next-token logits for every position; row t only depends on
    tokens at positions <= t.
    """
    x = embed_tokens(ids, params)
    allow = causal_mask(len(ids))
    cross_maps: list[np.ndarray] = []
    for layer in params.layers:
        normed = layer.ln_self(x)
        attn_out, _ = _multi_head(normed, normed, layer.self_attn,
                                  params.heads, allow)
        x = ad.add(x, attn_out)
        cross_out, cross_w = _multi_head(layer.ln_cross(x), context,
                                         layer.cross_attn, params.heads)
        if want_attention:
            cross_maps.append(cross_w)
        x = ad.add(x, cross_out)
        hidden = ad.relu(ad.add(ad.matmul(layer.ln_ffw(x), layer.ffw_in),
                                layer.ffw_in_b))
        ffw_out = ad.add(ad.matmul(hidden, layer.ffw_out), layer.ffw_out_b)
        x = ad.add(x, ffw_out)
    x = params.ln_final(x)
    logits = ad.add(ad.matmul(x, ad.transpose(params.out_proj)), params.out_bias)
    return DecoderOutput(logits=logits, cross_attention=cross_maps)
