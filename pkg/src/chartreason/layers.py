"""Reusable transformer pieces assembled from the tensor ops.

Everything here takes its parameters from a :class:`ParamStore` under a name
prefix, so blocks that share a prefix share weights (get-or-create), and the
whole model's parameter set is enumerable for the optimizer and checkpoints.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    AttentionParams,
    ParamStore,
    Tensor,
    add,
    embedding_lookup,
    gelu,
    layer_norm,
    linear,
    mul,
    multi_head_attention,
)


def affine_ln(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Layer norm over the last axis followed by a learned affine map."""
    return add(mul(layer_norm(x), gain), bias)


def attention_params(store: ParamStore, prefix: str, d: int) -> AttentionParams:
    return AttentionParams(
        wq=store.matrix(f"{prefix}.wq", d, d),
        bq=store.zeros(f"{prefix}.bq", d),
        wk=store.matrix(f"{prefix}.wk", d, d),
        bk=store.zeros(f"{prefix}.bk", d),
        wv=store.matrix(f"{prefix}.wv", d, d),
        bv=store.zeros(f"{prefix}.bv", d),
        wo=store.matrix(f"{prefix}.wo", d, d),
        bo=store.zeros(f"{prefix}.bo", d),
    )


class EncoderLayer:
    """One attention encoder: attention + skip + norm, then a 2d-wide gelu
    feed-forward + skip + norm.  Self-attention when called without ``kv``;
    cross-attention (queries from ``x``, keys/values from ``kv``) otherwise.
    """

    def __init__(self, store: ParamStore, prefix: str, d: int, heads: int):
        self.heads = heads
        self.attn = attention_params(store, f"{prefix}.attn", d)
        self.ff_w1 = store.matrix(f"{prefix}.ff.w1", d, 2 * d)
        self.ff_b1 = store.zeros(f"{prefix}.ff.b1", 2 * d)
        self.ff_w2 = store.matrix(f"{prefix}.ff.w2", 2 * d, d)
        self.ff_b2 = store.zeros(f"{prefix}.ff.b2", d)
        self.ln1_g = store.ones(f"{prefix}.ln1.g", d)
        self.ln1_b = store.zeros(f"{prefix}.ln1.b", d)
        self.ln2_g = store.ones(f"{prefix}.ln2.g", d)
        self.ln2_b = store.zeros(f"{prefix}.ln2.b", d)

    def __call__(self, x: Tensor, kv: Tensor | None = None, mask: Tensor | None = None) -> Tensor:
        a = multi_head_attention(x, x if kv is None else kv, self.attn, self.heads, mask)
        x = affine_ln(add(x, a), self.ln1_g, self.ln1_b)
        f = linear(gelu(linear(x, self.ff_w1, self.ff_b1)), self.ff_w2, self.ff_b2)
        return affine_ln(add(x, f), self.ln2_g, self.ln2_b)


class TokenEncoder:
    """Token ids -> contextual features: embedding + learned positions +
    ``layers`` self-attention encoder layers.  Shared by the chart encoder
    and the per-block guidance encoders."""

    def __init__(self, store: ParamStore, prefix: str, vocab_size: int,
                 d: int, heads: int, max_len: int, layers: int = 1):
        self.max_len = max_len
        self.embed = store.normal(f"{prefix}.tok", (vocab_size, d))
        self.pos = store.normal(f"{prefix}.pos", (max_len, d))
        self.layers = [
            EncoderLayer(store, f"{prefix}.l{i}", d, heads) for i in range(layers)
        ]

    def __call__(self, ids) -> Tensor:
        n = len(ids)
        x = add(embedding_lookup(self.embed, ids), embedding_lookup(self.pos, np.arange(n)))
        for layer in self.layers:
            x = layer(x)
        return x
