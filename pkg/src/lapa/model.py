"""The assembled LaPA model: parameters, batched forward pass, checkpoints."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import Projection
from .config import ConfigError, ModelConfig
from .data import QASample
from .encoders import (
    ImageEncoderParams,
    TextEncoderParams,
    Tokenizer,
    embed_answer_set,
    embed_phrases,
    encode_image,
    encode_text,
)
from .fusion import FusionBlockParams, FusionOutput, run_stack
from .head import CombineWeights, accuracy_report, bce_loss, classify, combine, one_hot, total_loss
from .knowledge import GatParams, KnowledgeGraph, PriorFusionParams, build_graph, gat_forward, prior_fuse
from .params import count_parameters, named_parameters
from .prompt import LatentPrompt, PromptGenParams, consistency_loss, generate_prompt, init_prompt, process_answer_bank
from .tensor import Tensor

PARAM_GROUPS = ("prompt", "generation", "encoders", "fusion", "knowledge", "head")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Batch:
    images: np.ndarray  # B x H x W
    ids: np.ndarray  # B x L
    mask: np.ndarray  # B x L
    answers: np.ndarray  # B
    qtypes: list[str]

    def __len__(self) -> int:
        return len(self.answers)


@dataclass
class ForwardResult:
    logits: Tensor
    loss: Tensor
    bce: Tensor
    cs: Tensor | None
    prompt: Tensor | None  # X^_LP
    fusion: FusionOutput
    integrated: Tensor | None  # X^_II


@dataclass
class Groups:
    prompt: LatentPrompt | None
    generation: PromptGenParams | None
    encoders: dict
    fusion: list[FusionBlockParams]
    knowledge: dict | None
    head: Projection


def tokenizer_for(samples: Sequence[QASample], vocab: Sequence[str], graph: KnowledgeGraph) -> Tokenizer:
    return Tokenizer.from_texts([s.question for s in samples] + list(vocab) + list(graph.names))


class LaPA:
    def __init__(self, config: ModelConfig, tokenizer: Tokenizer, vocab: Sequence[str], graph: KnowledgeGraph):
        self.config = config.validate()
        self.tokenizer = tokenizer
        self.vocab = list(vocab)
        self.graph = graph
        self._answer_index = {a: i for i, a in enumerate(self.vocab)}
        if len(self._answer_index) != len(self.vocab):
            raise ConfigError("duplicate answers in vocabulary")
        c = config
        rng = np.random.default_rng(c.seed)
        encoders = {
            "image": ImageEncoderParams.init(rng, c.image_size, c.patch, c.d, c.heads, c.encoder_layers),
            "text": TextEncoderParams.init(rng, len(tokenizer), c.max_len, c.d, c.heads, c.encoder_layers),
        }
        self.groups = Groups(
            prompt=init_prompt(c.prompt_size, c.d, rng) if c.lf else None,
            generation=PromptGenParams.init(rng, c.d, c.heads) if c.gm else None,
            encoders=encoders,
            fusion=[FusionBlockParams.init(rng, c.d, c.heads, prompt_fusion=c.lf) for _ in range(c.n_blocks)],
            knowledge={"gat": GatParams.init(rng, c.d, c.gat_heads), "prior": PriorFusionParams.init(rng, c.d, c.heads)}
            if c.pf
            else None,
            head=Projection.init(rng, c.d, len(self.vocab)),
        )
        self.weights = CombineWeights(c.alpha, c.theta, c.beta)
        self._build_buffers()

    # frozen embeddings of answers and graph nodes, taken from the initial token table
    def _build_buffers(self) -> None:
        table = Tensor(self.groups.encoders["text"].token_embed.data.copy())
        self.x_ta = Tensor(embed_answer_set(self.vocab, self.tokenizer, table).data)
        ids, mask = self.tokenizer.batch(self.vocab)
        self.answer_tokens = table.data[ids] * mask[..., None]  # A x T_a x d
        self.answer_mask = mask
        self.node_features = Tensor(embed_phrases(self.graph.names, self.tokenizer, table).data)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return dict(named_parameters(self.groups))

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def n_parameters(self) -> int:
        return count_parameters(self.groups)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    # -- data ---------------------------------------------------------------

    def answer_id(self, answer: str) -> int:
        try:
            return self._answer_index[answer]
        except KeyError:
            raise ValueError(f"answer {answer!r} not in vocabulary") from None

    def make_batch(self, samples: Sequence[QASample]) -> Batch:
        if not samples:
            raise ValueError("empty batch")
        images = np.stack([s.image for s in samples])
        ids, mask = self.tokenizer.batch([s.question for s in samples], self.config.max_len)
        answers = np.array([self.answer_id(s.answer) for s in samples])
        return Batch(images, ids, mask, answers, [s.qtype for s in samples])

    # -- forward ------------------------------------------------------------

    def generated_prompt(self) -> Tensor | None:
        g = self.groups
        if g.generation is None:
            return g.prompt.matrix if g.prompt is not None else None
        bank = process_answer_bank(self.x_ta, g.generation)
        return generate_prompt(g.prompt, bank, g.generation)

    def forward(self, batch: Batch) -> ForwardResult:
        c, g = self.config, self.groups
        f_i = encode_image(batch.images, g.encoders["image"])
        f_l = encode_text(batch.ids, batch.mask, g.encoders["text"])
        x_hat_lp = self.generated_prompt()
        fused = run_stack(f_i, f_l, batch.mask, x_hat_lp, g.fusion, c.fusion_order)
        integrated = fused.integrated
        if g.knowledge is not None:
            f_g = gat_forward(self.graph, g.knowledge["gat"], self.node_features)
            kv = g.prompt.matrix if c.prior_kv == "raw" else x_hat_lp
            integrated = prior_fuse(integrated, f_g, kv, g.knowledge["prior"])
        x_f = combine(integrated, fused.image_cross, fused.text_cross, self.weights, batch.mask)
        logits = classify(x_f, g.head)
        bce = bce_loss(logits, one_hot(batch.answers, len(self.vocab)))
        cs = None
        if c.gm and c.cs:
            x_a = Tensor(self.answer_tokens[batch.answers])
            cs = consistency_loss(x_hat_lp, x_a, self.answer_mask[batch.answers])
        loss = total_loss(bce, cs, c.eta)
        return ForwardResult(logits, loss, bce, cs, x_hat_lp, fused, integrated)

    def predict(self, samples: Sequence[QASample], batch_size: int = 32) -> np.ndarray:
        out = []
        for start in range(0, len(samples), batch_size):
            batch = self.make_batch(samples[start : start + batch_size])
            out.append(self.forward(batch).logits.data.argmax(axis=-1))
        return np.concatenate(out)

    def evaluate(self, samples: Sequence[QASample]):
        if not samples:
            raise ValueError("cannot evaluate an empty split")
        pred = self.predict(samples)
        gold = [self.answer_id(s.answer) for s in samples]
        return accuracy_report(pred, gold, [s.qtype for s in samples])

    # -- checkpoints --------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "tokens": self.tokenizer.tokens,
            "vocab": self.vocab,
            "graph": self.graph.to_json(),
        }
        arrays = {f"param/{k}": v.data for k, v in self.parameters().items()}
        arrays["buffer/x_ta"] = self.x_ta.data
        arrays["buffer/answer_tokens"] = self.answer_tokens
        arrays["buffer/answer_mask"] = self.answer_mask
        arrays["buffer/node_features"] = self.node_features.data
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path, expected_config: ModelConfig | None = None) -> "LaPA":
        try:
            with np.load(path, allow_pickle=False) as npz:
                arrays = {k: npz[k] for k in npz.files}
            meta = json.loads(arrays.pop("meta").tobytes().decode())
            config = ModelConfig.from_dict(meta["config"])
        except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError) as exc:
            raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
        if config.hash() != meta.get("config_hash"):
            raise CheckpointError("checkpoint config hash does not match its stored configuration")
        if expected_config is not None and expected_config.hash() != config.hash():
            raise CheckpointError(
                f"config hash {expected_config.hash()} does not match checkpoint {config.hash()}"
            )
        g = meta["graph"]
        graph = build_graph([n["name"] for n in g["nodes"]], [n["kind"] for n in g["nodes"]], g["edges"])
        model = cls(config, Tokenizer(meta["tokens"]), meta["vocab"], graph)
        params = model.parameters()
        stored = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
        if set(stored) != set(params):
            raise CheckpointError("checkpoint parameters do not match the model layout")
        for name, p in params.items():
            if stored[name].shape != p.shape:
                raise CheckpointError(f"parameter {name} has shape {stored[name].shape}, expected {p.shape}")
            p.data[...] = stored[name]
        model.x_ta = Tensor(arrays["buffer/x_ta"])
        model.answer_tokens = arrays["buffer/answer_tokens"]
        model.answer_mask = arrays["buffer/answer_mask"]
        model.node_features = Tensor(arrays["buffer/node_features"])
        return model
