"""Feature combination, answer classifier, training objective and accuracy report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import Projection, project
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class CombineWeights:
    alpha: float = 1.0
    theta: float = 0.1
    beta: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"combination weight {k}={v} must be finite and non-negative")


def combine(
    x_hat_ii: Tensor | None,
    f_fi: Tensor,
    f_fl: Tensor,
    w: CombineWeights,
    text_mask: np.ndarray | None = None,
) -> Tensor:
    """Weighted sum of the token-mean-pooled integrated, image-side and language-side features.

    ``x_hat_ii`` may be None only when ``alpha == 0``.  Zero-weight terms are
    left out of the graph altogether.
    """
    d = f_fi.shape[-1]
    if f_fl.shape[-1] != d or (x_hat_ii is not None and x_hat_ii.shape[-1] != d):
        raise ShapeError("combine: feature widths disagree")
    terms = []
    if w.alpha:
        if x_hat_ii is None:
            raise ValueError("alpha > 0 needs integrated information")
        terms.append(T.scale(T.mean_tokens(x_hat_ii), w.alpha))
    if w.theta:
        terms.append(T.scale(T.mean_tokens(f_fi), w.theta))
    if w.beta:
        terms.append(T.scale(T.mean_tokens(f_fl, text_mask), w.beta))
    if not terms:
        lead = np.broadcast_shapes(f_fi.shape[:-2], f_fl.shape[:-2])
        return Tensor(np.zeros(lead + (d,)))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def classify(x_f: Tensor, head: Projection) -> Tensor:
    """One logit per vocabulary answer; accepts a single ``[d]`` vector or a ``[B, d]`` batch."""
    if x_f.ndim == 1:
        return T.reshape(project(T.reshape(x_f, (1, -1)), head), (-1,))
    return project(x_f, head)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Element-wise ``max(x,0) - x*y + log1p(exp(-|x|))``, the stable sigmoid BCE."""
    x = logits.data
    y = np.asarray(targets, dtype=T.DTYPE)
    if y.shape != x.shape:
        raise ShapeError(f"targets {y.shape} do not match logits {x.shape}")
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return T._make(out, (logits,), (lambda g: g * (sig - y),))


def one_hot(index, n: int) -> np.ndarray:
    index = np.asarray(index)
    out = np.zeros(index.shape + (n,))
    np.put_along_axis(out, index[..., None], 1.0, axis=-1)
    return out


def check_one_hot(target: np.ndarray) -> None:
    t = np.asarray(target)
    if not (np.isin(t, (0.0, 1.0)).all() and (t.sum(axis=-1) == 1).all()):
        raise ValueError("target must be one-hot")


def bce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over classes (and batch) of sigmoid binary cross-entropy against one-hot targets."""
    check_one_hot(target)
    return T.mean_all(bce_with_logits(logits, target))


def total_loss(bce: Tensor, cs: Tensor | None, eta: float) -> Tensor:
    if cs is None or eta == 0:
        return bce
    return bce + T.scale(cs, eta)


@dataclass
class EvalReport:
    open_acc: float | None
    closed_acc: float | None
    overall_acc: float
    n_open: int
    n_closed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def accuracy_report(predictions: Sequence[int], answers: Sequence[int], qtypes: Sequence[str]) -> EvalReport:
    """Per-type and overall (micro-averaged) matching accuracy in percent."""
    pred = np.asarray(predictions)
    gold = np.asarray(answers)
    kinds = np.asarray(qtypes)
    if pred.size == 0:
        raise ValueError("cannot evaluate an empty split")
    correct = pred == gold

    def acc(sel):
        n = int(sel.sum())
        return (100.0 * float(correct[sel].sum()) / n if n else None), n

    open_acc, n_open = acc(kinds == "open")
    closed_acc, n_closed = acc(kinds == "closed")
    overall = 100.0 * float(correct.sum()) / pred.size
    return EvalReport(open_acc, closed_acc, overall, n_open, n_closed)
