"""Attention and feed-forward building blocks.

Two residual blocks are reused everywhere: a multi-head attention block
(attention wrapped in a residual connection and layer norm) and a
feed-forward block (two-layer ReLU network, residual, layer norm). Both
preserve the n x d_model shape. Sinusoidal position embeddings and the
causal mask live here as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    Tensor,
    add,
    add_bias,
    concat_cols,
    layer_norm_rows,
    mask_fill,
    matmul,
    relu,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)


@dataclass
class BlockConfig:
    """Shared block dimensions; d_ff defaults to 4 * d_model."""

    d_model: int
    head_count: int
    d_ff: int | None = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.d_model % self.head_count != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by head_count {self.head_count}"
            )
        if self.d_ff < self.d_model:
            raise ValueError("d_ff must be at least d_model")


@dataclass
class AttentionWeights:
    """Projections for one attention block.

    wq maps the query input to d_model, wk/wv map the key/value input
    (which must share a width) to d_model, wo mixes the concatenated
    heads back to d_model.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    head_count: int

    def __post_init__(self):
        d_model = self.wq.values.shape[1]
        if d_model % self.head_count != 0:
            raise ValueError(
                f"d_model {d_model} not divisible by head_count {self.head_count}"
            )
        if self.wk.values.shape[0] != self.wv.values.shape[0]:
            raise ValueError("key and value projections must accept the same width")


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    eps: float = 1e-5


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def position_embedding(n: int, d: int) -> np.ndarray:
    """Sinusoidal position table: entry (pos, 2i) = sin(pos / 10000^(2i/d)),
    entry (pos, 2i+1) = cos of the same angle."""
    if d % 2 != 0:
        raise ValueError(f"width must be even, got {d}")
    if n < 1:
        raise ValueError("length must be at least 1")
    positions = np.arange(n, dtype=np.float64)[:, None]
    even = np.arange(0, d, 2, dtype=np.float64)
    angles = positions / np.power(10000.0, even / d)
    table = np.empty((n, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def causal_mask(length: int) -> np.ndarray:
    """Boolean mask where position i may attend only to positions <= i."""
    if length < 1:
        raise ValueError("length must be at least 1")
    return np.tril(np.ones((length, length), dtype=bool))


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    mask: np.ndarray | None,
    weights: AttentionWeights,
) -> Tensor:
    """Scaled dot-product attention over head_count heads.

    ``mask`` is an optional boolean n_q x n_k matrix, True where the key
    is allowed; forbidden scores become -inf before the softmax. Every
    query row must keep at least one allowed key.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            bad = int(np.flatnonzero(~mask.any(axis=1))[0])
            raise ValueError(f"query row {bad} has no allowed keys")
    q = matmul(query, weights.wq)
    k = matmul(key, weights.wk)
    v = matmul(value, weights.wv)
    d_model = weights.wq.values.shape[1]
    d_head = d_model // weights.head_count
    inv_sqrt = 1.0 / math.sqrt(d_head)
    heads = []
    for h in range(weights.head_count):
        lo, hi = h * d_head, (h + 1) * d_head
        scores = scale(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))), inv_sqrt)
        if mask is not None:
            scores = mask_fill(scores, mask)
        attn = softmax_rows(scores)
        heads.append(matmul(attn, slice_cols(v, lo, hi)))
    return matmul(concat_cols(heads), weights.wo)


def mh_block(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    mask: np.ndarray | None,
    weights: AttentionWeights,
    ln: LayerNormParams,
) -> Tensor:
    """Residual attention block: LayerNorm(query + attention(...))."""
    d_model = weights.wo.values.shape[1]
    if query.values.shape[1] != d_model:
        raise ValueError(
            f"residual width mismatch: query width {query.values.shape[1]} vs d_model {d_model}"
        )
    attended = multi_head_attention(query, key, value, mask, weights)
    return layer_norm_rows(add(query, attended), ln.gain, ln.bias, ln.eps)


def ffn_block(x: Tensor, ffn: FeedForwardParams, ln: LayerNormParams) -> Tensor:
    """Residual feed-forward block: LayerNorm(x + relu(x W1 + b1) W2 + b2)."""
    inner = add_bias(matmul(relu(add_bias(matmul(x, ffn.w1), ffn.b1)), ffn.w2), ffn.b2)
    return layer_norm_rows(add(x, inner), ln.gain, ln.bias, ln.eps)
