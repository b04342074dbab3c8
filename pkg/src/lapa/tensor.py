"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every differentiable op builds a new :class:`Tensor` holding references to its
inputs and a closure that pushes the output gradient back into them.  Calling
:meth:`Tensor.backward` linearises the graph into a :class:`ComputationTape`
(a topological order) and sweeps it once in reverse.

Leading axes broadcast numpy-style so that one set of parameters can be
applied to a whole batch of samples; gradients are summed back over the
broadcast axes.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5
MASK_VALUE = -1e30


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape (results never require grad)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        live = tuple(p for p in parents if p.requires_grad) if _GRAD_ENABLED else ()
        out.requires_grad = bool(live)
        out.grad = None
        out._parents = live
        out._backward = backward if live else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def validate(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"tensor {self.name or ''} of shape {self.shape} holds NaN/Inf")

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _unbroadcast(g, self.data.shape)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        tape = ComputationTape.record(self)
        tape.sweep(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class ComputationTape:
    """Topologically ordered record of the ops that produced a tensor."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def sweep(self, root: Tensor) -> None:
        # intermediate grads live only for the sweep; leaves keep theirs
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + _unbroadcast(pg, parent.data.shape)
                else:
                    grads[key] = _unbroadcast(pg, parent.data.shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fns) -> Tensor:
    """Wrap `data`; grad_fns[i](g) returns the gradient for parents[i]."""
    if not _GRAD_ENABLED:
        return Tensor._result(data, (), None)
    parents = tuple(parents)
    live_fns = [fn for p, fn in zip(parents, grad_fns) if p.requires_grad]

    def backward(g):
        return [fn(g) for fn in live_fns]

    return Tensor._result(data, parents, backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), (lambda g: g, lambda g: g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), (lambda g: g, lambda g: -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), (lambda g: g * b.data, lambda g: g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b), (lambda g: g / b.data, lambda g: -g * out / b.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), (lambda g: g * c,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), (lambda g: g * 0.5 / out,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), (lambda g: g * inside,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), (lambda g: g * out,))


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    out = 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))
    return _make(out, (a,), (lambda g: g * _gelu_grad(x),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    d = np.where(x > 0, 1.0, slope)
    return _make(x * d, (a,), (lambda g: g * d,))


def elu(a: Tensor) -> Tensor:
    x = a.data
    neg = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)
    d = np.where(x > 0, 1.0, neg + 1.0)
    return _make(out, (a,), (lambda g: g * d,))


# ---------------------------------------------------------------------------
# shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # shared right operand: fold the batch into rows, one GEMM each way
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))
        return _make(
            out,
            (a, b),
            (
                lambda g: (g.reshape(-1, n) @ b.data.T).reshape(a.shape),
                lambda g: a2.T @ g.reshape(-1, n),
            ),
        )
    out = np.matmul(a.data, b.data)
    return _make(
        out,
        (a, b),
        (
            lambda g: np.matmul(g, np.swapaxes(b.data, -1, -2)),
            lambda g: np.matmul(np.swapaxes(a.data, -1, -2), g),
        ),
    )


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.data, -1, -2), (a,), (lambda g: np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), (lambda g: np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along `axis` (default: the token axis of ``[..., n, d]``).

    Leading axes broadcast, so an unbatched piece can join a batched one.
    """
    tensors = [as_tensor(t) for t in tensors]
    nd = max(t.ndim for t in tensors)
    ax = axis - nd if axis >= 0 else axis
    lead = np.broadcast_shapes(*[t.shape[: t.ndim + ax] for t in tensors])
    try:
        arrays = [np.broadcast_to(t.data, lead + t.shape[t.ndim + ax :]) for t in tensors]
        out = np.concatenate(arrays, axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def piece(i):
        idx = (Ellipsis, slice(bounds[i], bounds[i + 1])) + (slice(None),) * (-ax - 1)
        return lambda g: g[idx]

    return _make(out, tensors, [piece(i) for i in range(len(tensors))])


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding: id out of range for table with {n} rows")

    def grad(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return out

    return _make(table.data[ids], (table,), (grad,))


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), (lambda g: np.broadcast_to(g, shape).copy(),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)
    return _make(out, (a,), (lambda g: np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def mean_tokens(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over the token axis of ``[..., n, d]`` -> ``[..., d]``.

    With a boolean `mask` of shape ``[..., n]`` only valid tokens are averaged.
    """
    if mask is None:
        return scale(sum_axis(a, -2), 1.0 / a.shape[-2])
    w = np.asarray(mask, dtype=DTYPE)
    w = w / w.sum(axis=-1, keepdims=True)
    return sum_axis(mul(a, Tensor(w[..., None])), -2)


# ---------------------------------------------------------------------------
# normalisation


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted per row."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return out * (g - (g * out).sum(axis=-1, keepdims=True))

    return _make(out, (x,), (grad,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs at least two features")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_x(g):
        gh = g * gain.data
        return inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    return _make(out, (x, gain, bias), (grad_x, lambda g: g * xhat, lambda g: g))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    max_abs_error: float
    checked: int
    passed: bool


class NonDeterminismError(RuntimeError):
    pass


RESOLUTION_FACTOR = 1e5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def difference_floor(value: float, h: float) -> float:
    """Smallest gradient magnitude judged relatively by `grad_check`.

    A central difference cannot resolve derivatives below its rounding noise
    ``eps * max(|f|, 1) / h``.  Gradients that vanish in exact arithmetic
    (e.g. key biases under softmax) would otherwise turn that noise into
    an arbitrarily large relative error.  Below ``1e5`` times the noise the
    comparison is effectively absolute at about ``1e-11``.
    """
    return RESOLUTION_FACTOR * np.finfo(DTYPE).eps * max(abs(value), 1.0) / h


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float | None = None,
) -> list[GradCheckResult]:
    """Compare autograd gradients of scalar ``f()`` against central differences.

    `f` closes over `params` and is re-evaluated after each in-place nudge.
    With `max_entries`, at most that many coordinates per parameter are
    probed (chosen with a fixed-seed RNG); otherwise every coordinate is.
    `floor` defaults to :func:`difference_floor` of the unperturbed value.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    base = loss.item()
    if f().item() != base:
        raise NonDeterminismError("f() returned different values at the same point; gradient check aborted")
    if floor is None:
        floor = difference_floor(base, h)
    loss.backward()

    rng = np.random.default_rng(seed)
    results = []
    for name, p in params.items():
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            old = flat[i]
            with no_grad():
                flat[i] = old + h
                fp = f().item()
                flat[i] = old - h
                fm = f().item()
            flat[i] = old
            numeric[k] = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[idx]
        rel = relative_error(a, numeric, floor)
        max_rel = float(rel.max()) if rel.size else 0.0
        max_abs = float(np.abs(a - numeric).max()) if rel.size else 0.0
        results.append(GradCheckResult(name, max_rel, max_abs, int(idx.size), max_rel < tol))
    return results
