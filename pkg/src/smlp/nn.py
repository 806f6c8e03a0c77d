"""Dense blocks: spatial gating unit, multi-head SGU, FFN, self-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DivisibilityError, ShapeError
from .tensor import Tensor


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


@dataclass(eq=False)
class SGUParams:
    """Token-mixing weights ``w`` (T x T) and per-position bias ``b`` (T)."""

    w: Tensor
    b: Tensor
    causal: bool = True

    @property
    def seq_len(self) -> int:
        return self.w.shape[0]

    def apply_mask(self) -> None:
        if self.causal:
            self.w.data *= causal_mask(self.seq_len)


@dataclass(eq=False)
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    n_heads: int


@dataclass(eq=False)
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass(eq=False)
class LayerNormParams:
    g: Tensor
    b: Tensor


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n)))


# ---------------------------------------------------------------------------
# initialisation


def init_sgu(rng: np.random.Generator, seq_len: int, causal: bool = True) -> SGUParams:
    # near-zero spatial weights; no identity added
    bound = 1e-3 / seq_len
    p = SGUParams(_param(rng.uniform(-bound, bound, (seq_len, seq_len))),
                  _param(np.zeros(seq_len)), causal)
    p.apply_mask()
    return p


def init_attention(rng: np.random.Generator, dim: int, n_heads: int, std: float = 0.02) -> AttentionParams:
    if dim % n_heads:
        raise DivisibilityError(f"embed dim {dim} not divisible by {n_heads} heads")

    def w():
        return _param(rng.normal(0.0, std, (dim, dim)))

    def b():
        return _param(np.zeros(dim))

    return AttentionParams(w(), b(), w(), b(), w(), b(), w(), b(), n_heads)


def init_ffn(rng: np.random.Generator, dim: int, hidden: int, std: float = 0.02) -> FFNParams:
    return FFNParams(_param(rng.normal(0.0, std, (dim, hidden))), _param(np.zeros(hidden)),
                     _param(rng.normal(0.0, std, (hidden, dim))), _param(np.zeros(dim)))


def init_layernorm(dim: int) -> LayerNormParams:
    return LayerNormParams(_param(np.ones(dim)), _param(np.zeros(dim)))


# ---------------------------------------------------------------------------
# forwards


def layernorm(p: LayerNormParams, x: Tensor) -> Tensor:
    return T.layernorm(x, p.g, p.b)


def sgu_forward(p: SGUParams, x: Tensor) -> Tensor:
    """``W_s @ X + b`` along the token axis (axis -2) of ``x``."""
    n = x.shape[-2]
    if n != p.seq_len:
        raise ShapeError(f"SGU expects {p.seq_len} positions, got {n}")
    return T.add(T.matmul(p.w, x), T.reshape(p.b, (n, 1)))


def multi_head_sgu(params: list[SGUParams], x: Tensor) -> Tensor:
    """Split hidden columns into ``len(params)`` blocks, one SGU per block."""
    h = len(params)
    if h < 1 or x.shape[-1] % h:
        raise DivisibilityError(f"hidden dim {x.shape[-1]} not divisible by {h} heads")
    parts = T.chunk(x, h, axis=-1)
    return T.concat([sgu_forward(p, c) for p, c in zip(params, parts)], axis=-1)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def ffn_forward(p: FFNParams, x: Tensor) -> Tensor:
    """``gelu(x W1 + b1) W2 + b2`` applied row by row."""
    if x.shape[-1] != p.w1.shape[0]:
        raise ShapeError(f"FFN expects width {p.w1.shape[0]}, got {x.shape[-1]}")
    lead = x.shape[:-1]
    flat = T.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = _linear(T.gelu(_linear(flat, p.w1, p.b1)), p.w2, p.b2)
    return T.reshape(y, lead + (y.shape[-1],)) if x.ndim != 2 else y


def self_attention(p: AttentionParams, x: Tensor, causal: bool = True) -> Tensor:
    """Multi-head scaled dot-product attention followed by the output projection."""
    n, dim = x.shape[-2], x.shape[-1]
    if dim != p.wq.shape[0]:
        raise ShapeError(f"attention expects width {p.wq.shape[0]}, got {dim}")
    h = p.n_heads
    d = dim // h
    q = T.chunk(_linear(x, p.wq, p.bq), h, axis=-1)
    k = T.chunk(_linear(x, p.wk, p.bk), h, axis=-1)
    v = T.chunk(_linear(x, p.wv, p.bv), h, axis=-1)
    mask = causal_mask(n).astype(bool) if causal else None
    scale = 1.0 / math.sqrt(d)
    heads = []
    for qi, ki, vi in zip(q, k, v):
        scores = T.mul(T.matmul(qi, T.transpose(ki)), scale)
        heads.append(T.matmul(T.softmax(scores, axis=-1, mask=mask), vi))
    return _linear(T.concat(heads, axis=-1), p.wo, p.bo)


def count_sgu_params(seq_len: int, heads: int = 1) -> int:
    return heads * (seq_len * seq_len + seq_len)


def count_attention_params(dim: int) -> int:
    return 4 * dim * (dim + 1)
