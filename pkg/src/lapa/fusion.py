"""Multi-modal fusion blocks with latent prompt fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionParams, Projection, cross_attention, project, self_attention
from .tensor import ShapeError, Tensor

MODALITIES = ("L", "I", "MM")
DEFAULT_ORDER = ("L", "I", "MM")


def parse_order(order) -> tuple[str, ...]:
    """Accept ``"L>I>MM"``, ``"L⇒I⇒MM"`` or a sequence of names."""
    if isinstance(order, str):
        parts = [s.strip().rstrip(".") for s in order.replace("⇒", ">").split(">")]
    else:
        parts = list(order)
    parts = tuple(p.upper() for p in parts)
    if sorted(parts) != sorted(MODALITIES):
        raise ValueError(f"fusion order must be a permutation of L, I, MM; got {order!r}")
    return parts


def format_order(order) -> str:
    return ">".join(parse_order(order))


@dataclass
class FusionBlockParams:
    image_sa: AttentionParams
    text_sa: AttentionParams
    image_to_text: AttentionParams
    text_to_image: AttentionParams
    image_proj: Projection
    text_proj: Projection
    prompt_image: AttentionParams | None = None
    prompt_text: AttentionParams | None = None
    prompt_mm: AttentionParams | None = None

    @classmethod
    def init(cls, rng, d: int, heads: int, prompt_fusion: bool = True) -> "FusionBlockParams":
        p = cls(
            image_sa=AttentionParams.init(rng, d, heads),
            text_sa=AttentionParams.init(rng, d, heads),
            image_to_text=AttentionParams.init(rng, d, heads),
            text_to_image=AttentionParams.init(rng, d, heads),
            image_proj=Projection.init(rng, d),
            text_proj=Projection.init(rng, d),
        )
        if prompt_fusion:
            p.prompt_image = AttentionParams.init(rng, d, heads)
            p.prompt_text = AttentionParams.init(rng, d, heads)
            p.prompt_mm = AttentionParams.init(rng, d, heads)
        return p


@dataclass
class FusionOutput:
    integrated: Tensor | None  # X~_II, absent when prompt fusion is disabled
    image_cross: Tensor  # F_FI
    text_cross: Tensor  # F_FL


def _mm_mask(n_image: int, text_mask: np.ndarray | None, lead: tuple[int, ...]) -> np.ndarray | None:
    if text_mask is None:
        return None
    text_mask = np.asarray(text_mask, dtype=bool)
    lead = np.broadcast_shapes(lead, text_mask.shape[:-1])
    img = np.ones(lead + (n_image,), dtype=bool)
    return np.concatenate([img, np.broadcast_to(text_mask, lead + text_mask.shape[-1:])], axis=-1)


def cross_modal_fuse(f_i: Tensor, f_l: Tensor, text_mask, p: FusionBlockParams):
    """Bidirectional image/language cross attention.

    Returns ``(F_MM, F_FI, F_FL, mm_mask)`` where ``F_MM = [F_FI; F_FL]`` along
    the token axis and ``mm_mask`` marks its valid rows.
    """
    if f_i.shape[-1] != f_l.shape[-1]:
        raise ShapeError(f"image width {f_i.shape[-1]} != language width {f_l.shape[-1]}")
    if f_i.shape[-2] == 0 or f_l.shape[-2] == 0:
        raise ValueError("empty modality")
    f_fi = project(cross_attention(f_i, f_l, p.image_to_text, text_mask), p.image_proj)
    f_fl = project(cross_attention(f_l, f_i, p.text_to_image), p.text_proj)
    f_mm = T.concat([f_fi, f_fl], axis=-2)
    return f_mm, f_fi, f_fl, _mm_mask(f_i.shape[-2], text_mask, f_mm.shape[:-2])


def prompt_fuse(
    prompt: Tensor,
    f_i: Tensor,
    f_l: Tensor,
    f_mm: Tensor,
    order,
    p: FusionBlockParams,
    text_mask=None,
    mm_mask=None,
) -> Tensor:
    """Thread the prompt state through cross attention over the three feature sets in `order`."""
    order = parse_order(order)
    sources = {
        "I": (f_i, p.prompt_image, None),
        "L": (f_l, p.prompt_text, text_mask),
        "MM": (f_mm, p.prompt_mm, mm_mask),
    }
    x = prompt
    for name in order:
        feats, params, mask = sources[name]
        x = cross_attention(x, feats, params, mask)
    return x


def fusion_block(f_i, f_l, text_mask, prompt, order, p: FusionBlockParams):
    f_i = self_attention(f_i, p.image_sa)
    f_l = self_attention(f_l, p.text_sa, text_mask)
    f_mm, f_fi, f_fl, mm_mask = cross_modal_fuse(f_i, f_l, text_mask, p)
    if prompt is not None:
        prompt = prompt_fuse(prompt, f_i, f_l, f_mm, order, p, text_mask, mm_mask)
    return f_fi, f_fl, prompt


def run_stack(
    f_i: Tensor,
    f_l: Tensor,
    text_mask,
    prompt: Tensor | None,
    blocks: list[FusionBlockParams],
    order=DEFAULT_ORDER,
) -> FusionOutput:
    """Apply every block; cross-modal outputs of block k feed block k+1.

    Pass ``prompt=None`` to run without latent prompt fusion.
    """
    if not blocks:
        raise ValueError("fusion stack needs at least one block")
    n_i, n_l = f_i.shape[-2], f_l.shape[-2]
    for block in blocks:
        f_i, f_l, prompt = fusion_block(f_i, f_l, text_mask, prompt, order, block)
        assert f_i.shape[-2] == n_i and f_l.shape[-2] == n_l
    return FusionOutput(prompt, f_i, f_l)
