"""Dense float64 tensors with reverse-mode differentiation.

Every primitive records its inputs and a backward closure on the output
tensor. Calling ``backward`` on a scalar builds a :class:`Tape` (the
topologically ordered graph reachable from that scalar) and walks it once
in reverse, summing gradients where a tensor feeds several consumers.

Leading batch dimensions are supported by the primitives that the layers
need (matmul, softmax, layer norm, embedding lookup); elementwise ops
broadcast numpy-style and reduce gradients back to the operand shapes.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "UniformRowError",
    "EvaluationError",
    "no_grad",
    "tensor",
    "matmul",
    "add",
    "mul",
    "swapaxes",
    "reshape",
    "relu",
    "gelu",
    "softmax_rows",
    "layer_norm",
    "embedding",
    "cross_entropy",
    "grad_check",
]

_GRAD_ENABLED = contextvars.ContextVar("headfold_grad_enabled", default=True)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UniformRowError(ValueError):
    """A softmax row has no admissible entries (every position masked)."""


class EvaluationError(ArithmeticError):
    """A function under gradient check produced a non-finite value."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class Tensor:
    """A float64 array with an optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad=None) -> None:
        Tape.record(self).backward(grad)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> Tensor:
        return total(self)

    @property
    def T(self) -> Tensor:
        return swapaxes(self, -1, -2)


class Tape:
    """Topologically ordered record of the graph feeding one output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, grad=None) -> None:
        if not self.nodes:
            return
        output = self.nodes[-1]
        if grad is None:
            if output.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar, got shape {output.shape}"
                )
            grad = np.ones_like(output.data)
        output._accumulate(np.asarray(grad, dtype=np.float64).reshape(output.shape))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _GRAD_ENABLED.get():
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)

        def backward_scalar(g):
            a._accumulate(g * c)

        return _result(a.data * c, (a,), backward_scalar, "scale")
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), backward, "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        x._accumulate(g * (cdf + x.data * pdf))

    return _result(x.data * cdf, (x,), backward, "gelu")


def total(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(np.array(x.data.sum()), (x,), backward, "sum")


# -- shape ------------------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc

    def backward(g):
        x._accumulate(g.reshape(old))

    return _result(data, (x,), backward, "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    def backward(g):
        x._accumulate(np.swapaxes(g, a, b))

    return _result(np.ascontiguousarray(np.swapaxes(x.data, a, b)), (x,), backward, "swapaxes")


# -- linear algebra ---------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast.

    Backward: ``grad_a = grad_out @ b^T`` and ``grad_b = a^T @ grad_out``,
    summed over any broadcast batch axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch axes into rows: one GEMM instead of a batched one plus a sum
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            b._accumulate(gb)

    return _result(data, (a, b), backward, "matmul")


# -- normalisation / probability ---------------------------------------------------
def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    ``mask`` is a boolean array broadcastable to ``x``; ``False`` entries are
    excluded (additive -inf) and come out exactly zero.
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(mask.any(axis=-1)):
            raise UniformRowError("softmax row is fully masked")
        z = np.where(mask, z, -np.inf)
    else:
        if not np.all(np.isfinite(z).any(axis=-1)):
            raise UniformRowError("softmax row has no finite entry")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """``gain * (x - mean) / sqrt(var + eps) + bias`` over the last axis.

    Uses the population variance of each row.
    """
    if x.shape[-1] != gain.shape[-1] or gain.shape != bias.shape:
        raise DimensionError(
            f"layer_norm width mismatch: input {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            x._accumulate(
                inv
                * (
                    gh
                    - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
                )
            )

    return _result(out, (x, gain, bias), backward, "layer_norm")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(acc)

    return _result(table.data[ids], (table,), backward, "embedding")


def cross_entropy(logits: Tensor, targets, weight=None) -> Tensor:
    """Mean token-level cross entropy over positions with nonzero ``weight``."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data
    if z.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {z.shape} do not match targets {targets.shape}")
    w = np.ones(targets.shape) if weight is None else np.asarray(weight, dtype=np.float64)
    denom = w.sum()
    if denom <= 0:
        raise ValueError("cross_entropy needs at least one weighted position")
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    nll = logsum - picked
    loss = np.array((nll * w).sum() / denom)

    def backward(g):
        p = np.exp(shifted - logsum[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        logits._accumulate(p * (w / denom * g)[..., None])

    return _result(loss, (logits,), backward, "cross_entropy")


# -- verification -----------------------------------------------------------
def grad_check(f: Callable[..., Tensor], x: Tensor | Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps the tensor(s) ``x`` to a scalar tensor. The error at each
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs) if not isinstance(x, Tensor) else f(x)
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("f(x) is not finite")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    def evaluate() -> float:
        with no_grad():
            val = f(*xs) if not isinstance(x, Tensor) else f(x)
        v = float(val.data)
        if not math.isfinite(v):
            raise EvaluationError("perturbed f(x) is not finite")
        return v

    worst = 0.0
    for t, ga in zip(xs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst
