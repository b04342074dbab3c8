"""Training loop, run reports and the full-loss gradient check."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ConfigError, ModelConfig
from .data import QASample
from .knowledge import KnowledgeGraph
from .model import LaPA, tokenizer_for
from .optim import OptimizerState, adamw_step
from .tensor import GradCheckResult, grad_check

log = logging.getLogger(__name__)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    bce: float
    cs: float | None
    val_overall: float | None = None


@dataclass
class RunReport:
    config: dict
    config_hash: str
    seed: int
    n_parameters: int
    epochs: list[EpochLog] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")


def build_model(config: ModelConfig, data: dict) -> LaPA:
    """Model over the tokenizer/vocabulary/graph of a loaded dataset dict."""
    samples = [s for name in ("train", "val", "test") for s in data.get(name, [])]
    tokenizer = tokenizer_for(samples, data["vocab"], data["graph"])
    return LaPA(config, tokenizer, data["vocab"], data["graph"])


def check_data(config: ModelConfig, data: dict) -> None:
    for name in ("train", "val", "test"):
        for s in data.get(name, []):
            if s.image.shape != (config.image_size, config.image_size):
                raise ConfigError(f"{name} image of shape {s.image.shape} does not match image_size={config.image_size}")
            if len(s.question.split()) > config.max_len:
                raise ConfigError(f"{name} question longer than max_len={config.max_len}")


def train(
    config: ModelConfig,
    data: dict,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> tuple[LaPA, RunReport]:
    """Shuffled mini-batch AdamW training; deterministic given ``config.seed``."""
    config.validate()
    check_data(config, data)
    model = build_model(config, data)
    params = model.parameters()
    opt = OptimizerState(learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    train_set: Sequence[QASample] = data["train"]
    val_set = data.get("val")
    report = RunReport(config.to_dict(), config.hash(), config.seed, model.n_parameters())
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        sums = np.zeros(3)
        for lo in range(0, len(order), config.batch_size):
            batch = model.make_batch([train_set[i] for i in order[lo : lo + config.batch_size]])
            model.zero_grad()
            out = model.forward(batch)
            out.loss.backward()
            adamw_step(opt, params)
            n = len(batch)
            sums += n * np.array([out.loss.item(), out.bce.item(), out.cs.item() if out.cs is not None else 0.0])
        mean = sums / len(train_set)
        if not np.all(np.isfinite(mean)):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
        entry = EpochLog(epoch, float(mean[0]), float(mean[1]), float(mean[2]) if config.gm and config.cs else None)
        if val_set:
            entry.val_overall = model.evaluate(val_set).overall_acc
        report.epochs.append(entry)
        log.info("epoch %d loss %.5f val %s", epoch, entry.loss, entry.val_overall)
        if on_epoch is not None:
            on_epoch(entry)
        if config.target_val_acc and entry.val_overall is not None and entry.val_overall >= config.target_val_acc:
            break
    report.wall_time = time.perf_counter() - start
    for name in ("train", "val", "test"):
        if data.get(name):
            report.metrics[name] = asdict(model.evaluate(data[name]))
    return model, report


TINY_LIMITS = {"d": 16, "prompt_size": 4, "n_blocks": 1}


def check_tiny(config: ModelConfig, n_samples: int) -> None:
    for key, limit in TINY_LIMITS.items():
        if key == "n_blocks":
            if getattr(config, key) != limit:
                raise ConfigError("gradient checking needs n_blocks = 1")
        elif getattr(config, key) > limit:
            raise ConfigError(f"gradient checking needs {key} <= {limit}")
    if n_samples > 2:
        raise ConfigError("gradient checking uses at most 2 samples")


@dataclass
class GroupCheck:
    group: str
    max_rel_error: float
    checked: int
    passed: bool


def gradcheck_model(
    model: LaPA,
    samples: Sequence[QASample],
    h: float = 1e-5,
    tol: float = 1e-5,
    max_entries: int | None = 12,
    seed: int = 0,
) -> tuple[list[GroupCheck], list[GradCheckResult]]:
    """Central-difference check of the total loss against autograd, summarised per parameter group."""
    check_tiny(model.config, len(samples))
    batch = model.make_batch(samples)
    params = model.parameters()
    results = grad_check(lambda: model.forward(batch).loss, params, h=h, tol=tol, max_entries=max_entries, seed=seed)
    groups: dict[str, GroupCheck] = {}
    for r in results:
        name = model.group_of(r.name)
        g = groups.setdefault(name, GroupCheck(name, 0.0, 0, True))
        g.max_rel_error = max(g.max_rel_error, r.max_rel_error)
        g.checked += r.checked
        g.passed = g.passed and r.passed
    return list(groups.values()), results


def tiny_gradcheck_setup(config: ModelConfig | None = None, seed: int = 3):
    """Tiny model (4-node graph, 8x8 images) plus two samples for gradient checking."""
    from .data import SyntheticSpec, generate

    config = config or ModelConfig.tiny()
    data = generate(SyntheticSpec(n_train=2, n_val=1, n_test=1, organs=2, diseases=2, seed=seed, image_size=config.image_size))
    d = {"train": data.train, "vocab": data.vocab, "graph": data.graph}
    return build_model(config, d), data.train[:2]
