"""Run configuration: architecture, objective and training hyperparameters."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import tomli

from .fusion import format_order, parse_order


class ConfigError(ValueError):
    """A configuration violates some module precondition."""


@dataclass
class ModelConfig:
    # architecture
    d: int = 64
    heads: int = 4
    n_blocks: int = 2
    encoder_layers: int = 2
    prompt_size: int = 32
    fusion_order: str = "L>I>MM"
    gat_heads: int = 2
    image_size: int = 32
    patch: int = 8
    max_len: int = 16
    prior_kv: str = "raw"  # "raw": X_LP as key/value of the prior fusion, "generated": X^_LP
    # module toggles
    gm: bool = True  # latent prompt generation
    cs: bool = True  # consistency loss
    lf: bool = True  # latent prompt fusion
    pf: bool = True  # prior knowledge fusion
    # objective
    alpha: float = 1.0
    theta: float = 0.1
    beta: float = 0.1
    eta: float = 0.1
    # optimisation
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    target_val_acc: float = 0.0  # stop once validation overall accuracy reaches this; 0 disables

    def __post_init__(self):
        self.fusion_order = format_order(self.fusion_order)

    def validate(self) -> "ModelConfig":
        positive = ("d", "heads", "n_blocks", "prompt_size", "gat_heads", "image_size", "patch",
                    "max_len", "epochs", "batch_size")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.encoder_layers < 0:
            raise ConfigError("encoder_layers must be >= 0")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.pf and self.d % self.gat_heads:
            raise ConfigError(f"d={self.d} is not divisible by gat_heads={self.gat_heads}")
        if self.d < 2:
            raise ConfigError("layer normalisation needs d >= 2")
        if self.image_size % self.patch:
            raise ConfigError(f"patch={self.patch} does not divide image_size={self.image_size}")
        for name in ("alpha", "theta", "beta", "eta", "weight_decay"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigError("learning_rate must be positive")
        if self.prior_kv not in ("raw", "generated"):
            raise ConfigError(f"prior_kv must be 'raw' or 'generated', got {self.prior_kv!r}")
        if self.cs and not self.gm:
            raise ConfigError("the consistency loss (cs) needs prompt generation (gm)")
        if not self.lf:
            if self.gm or self.pf:
                raise ConfigError("gm and pf feed the latent prompt fusion; disable them together with lf")
            if self.alpha != 0:
                raise ConfigError("without latent prompt fusion there is no integrated information; set alpha = 0")
        if not (0.0 <= self.target_val_acc <= 100.0):
            raise ConfigError("target_val_acc is a percentage in [0, 100]")
        parse_order(self.fusion_order)
        return self

    # presets ---------------------------------------------------------------

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        base = dict(d=768, heads=12, n_blocks=6, gat_heads=8, learning_rate=5e-6, image_size=384, patch=32)
        return cls(**{**base, **overrides})

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(d=8, heads=2, n_blocks=1, prompt_size=4, gat_heads=2, image_size=8, patch=4,
                    max_len=8, batch_size=2)
        return cls(**{**base, **overrides})

    # serialisation ---------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values = {}
        for key, value in raw.items():
            want = type(getattr(cls(), key))
            if want is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, want) or (want is int and isinstance(value, bool)):
                raise ConfigError(f"config key {key!r} expects {want.__name__}, got {value!r}")
            values[key] = value
        try:
            return cls(**values)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ModelConfig":
        try:
            raw = tomli.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if any(isinstance(v, dict) for v in raw.values()):
            raise ConfigError("config files are flat key = value lists; tables are not allowed")
        return cls.from_dict(raw)

    def dumps(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, str):
                text = json.dumps(value)
            else:
                text = repr(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")
