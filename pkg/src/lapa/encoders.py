"""Small trainable image/text encoders standing in for pretrained backbones.

Both encoders are stacks of post-norm transformer layers followed by one extra
self-attention layer, whose output is the modality feature handed to the
fusion stack.  Answers and knowledge-graph node names are embedded with the
text encoder's token table and mean-pooled over their tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ConfigError
from .attention import AttentionParams, Projection, project, self_attention
from .params import glorot, normal, ones, zeros
from .tensor import Tensor

PAD = "<pad>"
EMBED_STD = 1.0  # unit-scale tables keep the first layer norm well conditioned


@dataclass
class EncoderLayer:
    attn: AttentionParams
    ff_in: Projection
    ff_out: Projection
    ln_gain: Tensor
    ln_bias: Tensor

    @classmethod
    def init(cls, rng, d: int, heads: int, ff_mult: int = 2) -> "EncoderLayer":
        return cls(
            attn=AttentionParams.init(rng, d, heads),
            ff_in=Projection.init(rng, d, ff_mult * d),
            ff_out=Projection.init(rng, ff_mult * d, d),
            ln_gain=ones(d),
            ln_bias=zeros(d),
        )


def encoder_layer(x: Tensor, p: EncoderLayer, mask=None) -> Tensor:
    x = self_attention(x, p.attn, mask)
    h = project(T.gelu(project(x, p.ff_in)), p.ff_out)
    return T.layer_norm(x + h, p.ln_gain, p.ln_bias)


@dataclass
class ImageEncoderParams:
    patch: int
    patch_embed: Projection
    pos: Tensor
    layers: list[EncoderLayer]
    outer: AttentionParams

    @classmethod
    def init(cls, rng, image_size: int, patch: int, d: int, heads: int, n_layers: int = 2) -> "ImageEncoderParams":
        if patch < 1 or image_size % patch:
            raise ConfigError(f"patch size {patch} does not divide image side {image_size}")
        n_tokens = (image_size // patch) ** 2
        return cls(
            patch=patch,
            patch_embed=Projection(glorot(rng, patch * patch, d), zeros(d)),
            pos=normal(rng, n_tokens, d, std=EMBED_STD),
            layers=[EncoderLayer.init(rng, d, heads) for _ in range(n_layers)],
            outer=AttentionParams.init(rng, d, heads),
        )


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[..., H, W]`` -> ``[..., (H/p)(W/p), p*p]`` in row-major patch order."""
    images = np.asarray(images, dtype=T.DTYPE)
    *lead, h, w = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"image of size {h}x{w} cannot be split into {patch}x{patch} patches")
    x = images.reshape(*lead, h // patch, patch, w // patch, patch)
    nl = len(lead)
    x = np.moveaxis(x, nl + 2, nl + 1)
    return x.reshape(*lead, (h // patch) * (w // patch), patch * patch)


def embed_image(images: np.ndarray, p: ImageEncoderParams) -> Tensor:
    patches = Tensor(patchify(images, p.patch))
    if patches.shape[-2] != p.pos.shape[0]:
        raise ConfigError(f"image yields {patches.shape[-2]} patches, encoder expects {p.pos.shape[0]}")
    return project(patches, p.patch_embed) + p.pos


def encode_image(images: np.ndarray, p: ImageEncoderParams) -> Tensor:
    """Image grid(s) ``[..., H, W]`` -> features ``[..., N_i, d]``."""
    x = embed_image(images, p)
    for layer in p.layers:
        x = encoder_layer(x, layer)
    return self_attention(x, p.outer)


@dataclass
class TextEncoderParams:
    token_embed: Tensor
    pos: Tensor
    layers: list[EncoderLayer]
    outer: AttentionParams

    @property
    def max_len(self) -> int:
        return self.pos.shape[0]

    @classmethod
    def init(cls, rng, vocab_size: int, max_len: int, d: int, heads: int, n_layers: int = 2) -> "TextEncoderParams":
        return cls(
            token_embed=normal(rng, vocab_size, d, std=EMBED_STD),
            pos=normal(rng, max_len, d, std=EMBED_STD),
            layers=[EncoderLayer.init(rng, d, heads) for _ in range(n_layers)],
            outer=AttentionParams.init(rng, d, heads),
        )


def encode_text(ids: np.ndarray, mask: np.ndarray, p: TextEncoderParams) -> Tensor:
    """Token ids ``[..., L]`` with validity mask -> features ``[..., L, d]``."""
    ids = np.asarray(ids, dtype=np.int64)
    n_vocab = p.token_embed.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_vocab):
        raise ValueError(f"token id outside vocabulary of size {n_vocab}")
    length = ids.shape[-1]
    if length > p.max_len:
        raise ValueError(f"sequence length {length} exceeds max_len {p.max_len}")
    x = T.embedding(p.token_embed, ids) + T.reshape(T.embedding(p.pos, np.arange(length)), (length, -1))
    for layer in p.layers:
        x = encoder_layer(x, layer, mask)
    return self_attention(x, p.outer, mask)


@dataclass
class Tokenizer:
    """Whitespace tokenizer over a closed vocabulary; id 0 is padding."""

    tokens: list[str] = field(default_factory=lambda: [PAD])

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "Tokenizer":
        words = sorted({w for text in texts for w in text.split()})
        return cls([PAD] + words)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[w] for w in text.split()]
        except KeyError as exc:
            raise ValueError(f"out-of-vocabulary token {exc.args[0]!r}") from None

    def batch(self, texts: Sequence[str], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Right-padded id matrix and validity mask."""
        seqs = [self.encode(t) for t in texts]
        if any(not s for s in seqs):
            raise ValueError("empty token sequence")
        width = max(len(s) for s in seqs)
        if max_len is not None and width > max_len:
            raise ValueError(f"sequence of {width} tokens exceeds max_len {max_len}")
        ids = np.zeros((len(seqs), width), dtype=np.int64)
        mask = np.zeros((len(seqs), width), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            mask[i, : len(s)] = True
        return ids, mask


def embed_phrases(phrases: Sequence[str], tokenizer: Tokenizer, table: Tensor) -> Tensor:
    """One mean-pooled token-embedding row per phrase, in input order."""
    if not phrases:
        raise ValueError("cannot embed an empty answer set")
    if len(set(phrases)) != len(phrases):
        raise ValueError("duplicate entries in answer set")
    ids, mask = tokenizer.batch(phrases)
    return T.mean_tokens(T.embedding(table, ids), mask)


def embed_answer_set(vocab: Sequence[str], tokenizer: Tokenizer, table: Tensor) -> Tensor:
    """Answer vocabulary -> ``[A_tot, d]`` matrix, row order = vocabulary order."""
    return embed_phrases(list(vocab), tokenizer, table)


def answer_token_embeddings(answer: str, tokenizer: Tokenizer, table: Tensor) -> Tensor:
    """Per-token embeddings ``[T_a, d]`` of a single answer."""
    return T.embedding(table, np.array(tokenizer.encode(answer)))
