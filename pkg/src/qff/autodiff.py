"""Minimal reverse-mode differentiation over dense numpy arrays.

A :class:`Tape` records primitive operations as they are evaluated. Each
primitive knows its forward rule and its vector-Jacobian product (VJP).
``Tape.backward`` walks the recorded nodes in exact reverse order and
accumulates gradients into the :class:`ParamTensor` leaves that were used.

A tape created with ``record=False`` evaluates the same primitives without
keeping any history, which is how inference paths share code with training.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


_ids = itertools.count()


class ParamTensor:
    """A learnable dense array with a same-shape gradient accumulator."""

    def __init__(self, values: np.ndarray, name: str = ""):
        self.values = np.ascontiguousarray(values)
        self.grad = np.zeros_like(self.values)
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def zero_grads(params: Sequence[ParamTensor]) -> None:
    for p in params:
        p.zero_grad()


class Var:
    """Handle to a value produced on a tape."""

    __slots__ = ("value", "index", "param")

    def __init__(self, value: np.ndarray, index: int | None = None, param: ParamTensor | None = None):
        self.value = value
        self.index = index
        self.param = param

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, index={self.index})"


# --------------------------------------------------------------------------
# primitive registry
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    # vjp(grad_out, saved, input_values, attrs, needs) -> list of grads; ``needs[i]``
    # is False for constant inputs, whose grads may be returned as None
    vjp: Callable[..., list]


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str):
    def register(cls):
        PRIMITIVES[name] = Primitive(name, cls.forward, cls.vjp)
        return cls

    return register


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


@primitive("matmul")
class _MatMul:
    @staticmethod
    def forward(a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return a @ b, None

    @staticmethod
    def vjp(g, saved, inputs, attrs, needs):
        a, b = inputs
        return [g @ b.T if needs[0] else None, a.T @ g if needs[1] else None]


@primitive("add")
class _Add:
    @staticmethod
    def forward(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
        return a + b, None

    @staticmethod
    def vjp(g, saved, inputs, attrs, needs):
        return [g, g]


@primitive("broadcast_add")
class _BroadcastAdd:
    @staticmethod
    def forward(a, b):
        _check_broadcast("broadcast_add", a, b)
        return a + b, None

    @staticmethod
    def vjp(g, saved, inputs, attrs, needs):
        a, b = inputs
        return [
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        ]


@primitive("elementwise_mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        _check_broadcast("elementwise_mul", a, b)
        return a * b, None

    @staticmethod
    def vjp(g, saved, inputs, attrs, needs):
        a, b = inputs
        return [
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        ]


@primitive("relu")
class _Relu:
    @staticmethod
    def forward(a):
        mask = a > 0
        return a * mask, mask

    @staticmethod
    def vjp(g, mask, inputs, attrs, needs):
        return [g * mask]


@primitive("sine")
class _Sine:
    """sin(omega * x), the SIREN activation."""

    @staticmethod
    def forward(a, omega=1.0):
        return np.sin(omega * a), None

    @staticmethod
    def vjp(g, saved, inputs, attrs, needs):
        omega = attrs.get("omega", 1.0)
        return [g * (omega * np.cos(omega * inputs[0]))]


@primitive("sin")
class _Sin:
    @staticmethod
    def forward(a):
        return np.sin(a), None

    @staticmethod
    def vjp(g, saved, inputs, attrs, needs):
        return [g * np.cos(inputs[0])]


@primitive("cos")
class _Cos:
    @staticmethod
    def forward(a):
        return np.cos(a), None

    @staticmethod
    def vjp(g, saved, inputs, attrs, needs):
        return [-g * np.sin(inputs[0])]


@primitive("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(a):
        out = 0.5 * (np.tanh(0.5 * a) + 1.0)
        return out, out

    @staticmethod
    def vjp(g, out, inputs, attrs, needs):
        return [g * out * (1.0 - out)]


@primitive("sqrt")
class _Sqrt:
    @staticmethod
    def forward(a):
        out = np.sqrt(a)
        return out, out

    @staticmethod
    def vjp(g, out, inputs, attrs, needs):
        return [g * 0.5 / out]


@primitive("scale")
class _Scale:
    @staticmethod
    def forward(a, factor=1.0):
        return a * factor, None

    @staticmethod
    def vjp(g, saved, inputs, attrs, needs):
        return [g * attrs.get("factor", 1.0)]


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(a, axis=None):
        return a.sum(axis=axis), None

    @staticmethod
    def vjp(g, saved, inputs, attrs, needs):
        (a,) = inputs
        axis = attrs.get("axis")
        if axis is not None:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, a.shape).copy()]


@primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(a, shape=()):
        return a.reshape(shape), None

    @staticmethod
    def vjp(g, saved, inputs, attrs, needs):
        return [g.reshape(inputs[0].shape)]


@primitive("concat")
class _Concat:
    @staticmethod
    def forward(*arrays, axis=-1):
        try:
            return np.concatenate(arrays, axis=axis), None
        except ValueError:
            shapes = [a.shape for a in arrays]
            raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None

    @staticmethod
    def vjp(g, saved, inputs, attrs, needs):
        axis = attrs.get("axis", -1)
        bounds = np.cumsum([a.shape[axis] for a in inputs])[:-1]
        return list(np.split(g, bounds, axis=axis))


@primitive("mse_loss")
class _MSE:
    @staticmethod
    def forward(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mse_loss: shapes differ {a.shape} vs {b.shape}")
        diff = a - b
        return np.asarray(np.mean(diff * diff), dtype=a.dtype), diff

    @staticmethod
    def vjp(g, diff, inputs, attrs, needs):
        d = diff * (2.0 * g / diff.size)
        return [d, -d]


def _gather_forward(table, idx, w):
    """out[b, c, :] = sum_j w[b, c, j] * table[c, idx[b, c, j], :].

    ``table`` has shape (C, S, N) where S is the flattened bin count of one
    component (M for lines, M*M for planes). ``w`` may carry a trailing axis
    of R weight sets sharing the same taps; the output is then (B, C, R, N).
    """
    if table.ndim != 3:
        raise ShapeError(f"gather: table must be (components, bins, channels), got {table.shape}")
    if idx.ndim != 3 or w.shape[:3] != idx.shape or w.ndim not in (3, 4) or idx.shape[1] != table.shape[0]:
        raise ShapeError(
            f"gather: table {table.shape} incompatible with index {idx.shape} / weight {w.shape}"
        )
    c, s, n = table.shape
    flat = (np.arange(c)[None, :, None] * s + idx).reshape(-1)
    rows = table.reshape(c * s, n)[flat].reshape(*idx.shape, n)
    # taps are few (2 or 4): an explicit loop beats einsum here
    if w.ndim == 3:
        out = w[:, :, 0, None] * rows[:, :, 0]
        for j in range(1, idx.shape[2]):
            out = out + w[:, :, j, None] * rows[:, :, j]
    else:
        out = w[:, :, 0, :, None] * rows[:, :, 0, None, :]
        for j in range(1, idx.shape[2]):
            out = out + w[:, :, j, :, None] * rows[:, :, j, None, :]
    return out, flat


def _gather_vjp(g, flat, inputs, attrs, needs):
    table, idx, w = inputs
    c, s, n = table.shape
    # scatter-add of weight-scaled upstream grads into exactly the touched bins;
    # bincount sums in index order, so the result is deterministic
    if w.ndim == 3:
        contrib = w[..., None] * g[:, :, None, :]
    else:
        contrib = w[:, :, :, 0, None] * g[:, :, None, 0, :]
        for r in range(1, w.shape[3]):
            contrib = contrib + w[:, :, :, r, None] * g[:, :, None, r, :]
    slots = (flat[:, None] * n + np.arange(n)[None, :]).reshape(-1)
    dtable = np.bincount(slots, weights=contrib.reshape(-1), minlength=c * s * n)
    return [dtable.reshape(table.shape).astype(table.dtype, copy=False), None, None]


def _check_taps(kind, idx, taps):
    if idx.ndim != 3 or idx.shape[-1] != taps:
        raise ShapeError(f"{kind} expects index shape (B, C, {taps}), got {idx.shape}")


@primitive("gather_interp_1d")
class _GatherInterp1D:
    @staticmethod
    def forward(table, idx, w):
        _check_taps("gather_interp_1d", idx, 2)
        return _gather_forward(table, idx, w)

    vjp = staticmethod(_gather_vjp)


@primitive("gather_interp_2d")
class _GatherInterp2D:
    @staticmethod
    def forward(table, idx, w):
        _check_taps("gather_interp_2d", idx, 4)
        return _gather_forward(table, idx, w)

    vjp = staticmethod(_gather_vjp)


@primitive("take")
class _Take:
    """Constant-index selection along one axis."""

    @staticmethod
    def forward(a, indices=(), axis=0):
        indices = np.asarray(indices)
        if indices.size and (indices.min() < -a.shape[axis] or indices.max() >= a.shape[axis]):
            raise ShapeError(f"take: index out of range for axis {axis} of shape {a.shape}")
        return np.take(a, indices, axis=axis), None

    @staticmethod
    def vjp(g, saved, inputs, attrs, needs):
        (a,) = inputs
        axis = attrs.get("axis", 0) % a.ndim
        indices = np.asarray(attrs["indices"]) % a.shape[axis]
        if indices.ndim == 0:
            g = np.expand_dims(g, axis)
            indices = indices[None]
        grad = np.zeros(a.shape, dtype=g.dtype)
        moved = np.moveaxis(grad, axis, 0)
        g_moved = np.moveaxis(g, axis, 0)
        if np.unique(indices).size == indices.size:
            moved[indices] = g_moved
        else:
            np.add.at(moved, indices, g_moved)
        return [grad]


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


@dataclass
class Node:
    kind: str
    inputs: list  # Var | None (constant) per positional input
    input_values: list
    output: Var
    saved: Any
    attrs: dict = field(default_factory=dict)


class Tape:
    """Records primitives in evaluation order for reverse-mode differentiation."""

    def __init__(self, record: bool = True):
        self.record_enabled = record
        self.nodes: list[Node] = []
        self._leaves: dict[int, Var] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _as_var(self, x) -> Var | None:
        if isinstance(x, Var):
            return x
        if isinstance(x, ParamTensor):
            leaf = self._leaves.get(x.id)
            if leaf is None:
                leaf = Var(x.values, param=x)
                self._leaves[x.id] = leaf
            return leaf
        return None

    def record(self, kind: str, *inputs, **attrs) -> Var:
        """Evaluate primitive ``kind`` on ``inputs`` and append it to the tape.

        Inputs may be :class:`Var`, :class:`ParamTensor` or plain arrays; plain
        arrays are constants and receive no gradient.
        """
        try:
            prim = PRIMITIVES[kind]
        except KeyError:
            raise ContractError(f"unknown primitive {kind!r}") from None
        handles = [self._as_var(x) for x in inputs]
        values = [h.value if h is not None else np.asarray(x) for h, x in zip(handles, inputs)]
        out_value, saved = prim.forward(*values, **attrs)
        out = Var(out_value)
        if self.record_enabled and any(h is not None for h in handles):
            out.index = len(self.nodes)
            self.nodes.append(Node(kind, handles, values, out, saved, attrs))
        return out

    # convenience wrappers -------------------------------------------------

    def matmul(self, a, b):
        return self.record("matmul", a, b)

    def add(self, a, b):
        return self.record("add", a, b)

    def broadcast_add(self, a, b):
        return self.record("broadcast_add", a, b)

    def mul(self, a, b):
        return self.record("elementwise_mul", a, b)

    def relu(self, a):
        return self.record("relu", a)

    def sine(self, a, omega):
        return self.record("sine", a, omega=float(omega))

    def sin(self, a):
        return self.record("sin", a)

    def cos(self, a):
        return self.record("cos", a)

    def sigmoid(self, a):
        return self.record("sigmoid", a)

    def sqrt(self, a):
        return self.record("sqrt", a)

    def scale(self, a, factor):
        return self.record("scale", a, factor=float(factor))

    def sum(self, a, axis=None):
        return self.record("sum", a, axis=axis)

    def reshape(self, a, shape):
        return self.record("reshape", a, shape=tuple(shape))

    def concat(self, items, axis=-1):
        return self.record("concat", *items, axis=axis)

    def mse_loss(self, a, b):
        return self.record("mse_loss", a, b)

    def take(self, a, indices, axis=0):
        return self.record("take", a, indices=np.asarray(indices), axis=axis)

    def gather_interp_1d(self, table, idx, w):
        return self.record("gather_interp_1d", table, idx, w)

    def gather_interp_2d(self, table, idx, w):
        return self.record("gather_interp_2d", table, idx, w)

    # ----------------------------------------------------------------------

    def backward(self, loss: Var, seed: float = 1.0) -> None:
        """Accumulate d(loss)/d(param) into every reachable ``ParamTensor.grad``."""
        if not self.record_enabled:
            raise ContractError("backward called on a non-recording tape")
        if loss.value.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        leaf_grads: dict[int, np.ndarray] = {}

        def push(h: Var | None, g):
            if h is None or g is None:
                return
            if h.index is not None:
                if h.index in grads:
                    grads[h.index] = grads[h.index] + g
                else:
                    grads[h.index] = g
            elif h.param is not None:
                pid = h.param.id
                leaf_grads[pid] = leaf_grads[pid] + g if pid in leaf_grads else g

        if loss.index is None:
            return
        grads[loss.index] = np.full(loss.shape, seed, dtype=loss.value.dtype)
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.output.index, None)
            if g is None:
                continue
            needs = [h is not None for h in node.inputs]
            in_grads = PRIMITIVES[node.kind].vjp(g, node.saved, node.input_values, node.attrs, needs)
            for h, gi in zip(node.inputs, in_grads):
                push(h, gi)
        for pid, g in leaf_grads.items():
            param = self._leaves[pid].param
            param.grad += g.astype(param.grad.dtype, copy=False)

    def clear(self) -> None:
        self.nodes.clear()
        self._leaves.clear()
