"""Latent prompt generation: prompt init, answer-bank conditioning, consistency loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionParams, Projection, cross_attention, project, self_attention
from .tensor import ShapeError, Tensor

INIT_STD = 0.02
NORM_EPS = 1e-12


@dataclass
class LatentPrompt:
    matrix: Tensor

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def init_prompt(size: int, d: int, seed: int | np.random.Generator) -> LatentPrompt:
    """P x d prompt drawn i.i.d. from Normal(0, 0.02^2)."""
    if size < 1 or d < 1:
        raise ValueError(f"prompt needs positive size and width, got {size}x{d}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return LatentPrompt(T.parameter(rng.normal(0.0, INIT_STD, size=(size, d))))


@dataclass
class PromptGenParams:
    bank_attn: AttentionParams
    bank_proj: Projection
    gen_attn: AttentionParams

    @classmethod
    def init(cls, rng, d: int, heads: int) -> "PromptGenParams":
        return cls(
            bank_attn=AttentionParams.init(rng, d, heads),
            bank_proj=Projection.init(rng, d),
            gen_attn=AttentionParams.init(rng, d, heads),
        )


@dataclass
class AnswerBank:
    raw: Tensor
    processed: Tensor

    def __len__(self) -> int:
        return self.raw.shape[0]


def process_answer_bank(x_ta: Tensor, p: PromptGenParams) -> AnswerBank:
    if x_ta.ndim != 2 or x_ta.shape[0] < 1:
        raise ValueError(f"answer bank must be a non-empty matrix, got shape {x_ta.shape}")
    if x_ta.shape[1] != p.bank_attn.d:
        raise ShapeError(f"answer bank width {x_ta.shape[1]} != model width {p.bank_attn.d}")
    return AnswerBank(x_ta, project(self_attention(x_ta, p.bank_attn), p.bank_proj))


def generate_prompt(lp: LatentPrompt | Tensor, bank: AnswerBank, p: PromptGenParams) -> Tensor:
    """Prompt rows query the processed answer bank."""
    x_lp = lp.matrix if isinstance(lp, LatentPrompt) else lp
    if len(bank) == 0:
        raise ValueError("empty answer bank")
    return cross_attention(x_lp, bank.processed, p.gen_attn)


def pooled_cosine_distance(u: Tensor, v: Tensor) -> Tensor:
    """``1 - cos(u, v)`` along the last axis.

    Norms are guarded as ``sqrt(|u|^2 + eps^2)`` with eps = 1e-12: a zero vector
    gets norm eps while non-degenerate inputs are left exact to double precision.
    """
    dot = T.sum_axis(T.mul(u, v), -1)
    nu = T.sqrt(T.sum_axis(T.mul(u, u), -1) + NORM_EPS**2)
    nv = T.sqrt(T.sum_axis(T.mul(v, v), -1) + NORM_EPS**2)
    # rounding can push the cosine a few ulps past +-1
    return 1.0 - T.clip(T.div(dot, T.mul(nu, nv)), -1.0, 1.0)


def consistency_loss(x_hat_lp: Tensor, x_a: Tensor, answer_mask: np.ndarray | None = None) -> Tensor:
    """One minus cosine similarity between token-mean-pooled prompt and target answer.

    ``x_a`` may be batched (``[B, T_a, d]`` with an optional token mask); the
    result is then the batch mean.
    """
    if x_hat_lp.shape[-1] != x_a.shape[-1]:
        raise ShapeError(f"prompt width {x_hat_lp.shape[-1]} != answer width {x_a.shape[-1]}")
    dist = pooled_cosine_distance(T.mean_tokens(x_hat_lp), T.mean_tokens(x_a, answer_mask))
    return T.mean_all(dist) if dist.ndim else dist
