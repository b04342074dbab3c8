"""Multi-head self/cross attention with post-norm residuals, and the affine projection layer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import glorot, ones, zeros
from .tensor import ShapeError, Tensor


@dataclass
class AttentionParams:
    """Query/key/value/output projections for `heads` heads of width d // heads.

    Head h uses columns ``h*d_h:(h+1)*d_h`` of ``wq``, ``wk`` and ``wv``.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    heads: int

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, heads: int) -> "AttentionParams":
        if heads < 1 or d % heads:
            raise ValueError(f"model width {d} is not divisible by {heads} heads")
        return cls(
            wq=glorot(rng, d, d), bq=zeros(d),
            wk=glorot(rng, d, d), bk=zeros(d),
            wv=glorot(rng, d, d), bv=zeros(d),
            wo=glorot(rng, d, d), bo=zeros(d),
            ln_gain=ones(d), ln_bias=zeros(d),
            heads=heads,
        )


@dataclass
class Projection:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int | None = None) -> "Projection":
        d_out = d_in if d_out is None else d_out
        return cls(glorot(rng, d_in, d_out), zeros(d_out))


def project(x: Tensor, p: Projection) -> Tensor:
    """Row-wise affine map ``x @ W + b``."""
    if x.shape[-1] != p.w.shape[0]:
        raise ShapeError(f"projection expects width {p.w.shape[0]}, got {x.shape[-1]}")
    return T.matmul(x, p.w) + p.b


def mask_bias(mask: np.ndarray | None) -> np.ndarray | None:
    """Boolean key mask ``[..., n]`` -> additive bias ``[..., 1, 1, n]`` (0 valid, -1e30 padded)."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("every key set needs at least one unmasked position")
    return np.where(mask, 0.0, T.MASK_VALUE)[..., None, None, :]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    nl = len(lead)
    return T.permute(x, (*range(nl), nl + 1, nl, nl + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nl = len(lead)
    x = T.permute(x, (*range(nl), nl + 1, nl, nl + 2))
    return T.reshape(x, (*lead, n, h * dh))


def attention_sublayer(
    q_in: Tensor,
    kv_in: Tensor,
    p: AttentionParams,
    mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Output-projected concatenation of per-head ``softmax(QK^T/sqrt(d_h)) V`` (no residual)."""
    d = p.d
    if q_in.shape[-1] != d or kv_in.shape[-1] != d:
        raise ShapeError(f"attention width {d} does not match inputs {q_in.shape}, {kv_in.shape}")
    if mask is not None and np.shape(mask)[-1] != kv_in.shape[-2]:
        raise ShapeError(f"mask length {np.shape(mask)[-1]} != key count {kv_in.shape[-2]}")
    h = p.heads
    q = _split_heads(T.matmul(q_in, p.wq) + p.bq, h)
    k = _split_heads(T.matmul(kv_in, p.wk) + p.bk, h)
    v = _split_heads(T.matmul(kv_in, p.wv) + p.bv, h)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d // h))
    bias = mask_bias(mask)
    if bias is not None:
        scores = scores + bias
    weights = T.softmax_rows(scores)
    out = T.matmul(_merge_heads(T.matmul(weights, v)), p.wo) + p.bo
    if return_weights:
        return out, weights.data
    return out


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    p: AttentionParams,
    mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Cross attention CA(q, kv, kv) wrapped as ``LayerNorm(q + Attn(q, kv))``.

    ``mask`` marks valid key positions; padded keys get exactly zero weight.
    """
    out, weights = attention_sublayer(q_in, kv_in, p, mask, return_weights=True)
    y = T.layer_norm(q_in + out, p.ln_gain, p.ln_bias)
    if return_weights:
        return y, weights
    return y


cross_attention = multi_head_attention


def self_attention(x: Tensor, p: AttentionParams, mask: np.ndarray | None = None, return_weights: bool = False):
    return multi_head_attention(x, x, p, mask, return_weights)
