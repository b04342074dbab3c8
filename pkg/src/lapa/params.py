"""Parameter containers and initialisers shared by the model modules."""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from .tensor import Tensor, parameter


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)))


def zeros(*shape: int) -> Tensor:
    return parameter(np.zeros(shape))


def ones(*shape: int) -> Tensor:
    return parameter(np.ones(shape))


def normal(rng: np.random.Generator, *shape: int, std: float = 0.02) -> Tensor:
    return parameter(rng.normal(0.0, std, size=shape))


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses / lists / dicts and yield every trainable tensor with a dotted name."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, _join(prefix, str(i)))
    elif isinstance(obj, dict):
        for k, item in obj.items():
            yield from named_parameters(item, _join(prefix, str(k)))


def count_parameters(obj) -> int:
    return sum(t.size for _, t in named_parameters(obj))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name
