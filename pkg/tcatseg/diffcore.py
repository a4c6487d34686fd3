"""
diffcore — dense float64 tensors with a reverse-mode differentiation tape.

Every primitive records one TapeEntry holding its inputs, its output and a
backward rule mapping the upstream gradient to one gradient per input.
backward() replays the reachable entries in exact reverse recording order.

    with Tape() as tape:
        y = (x * x).sum()
    backward(y)   # x.grad == 2 * x.data
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any

import numpy as np

from tcatseg.errors import ContractError, DimensionError

Array = np.ndarray
Rule = Callable[[Array], Sequence[Array | None]]

_SEQ = itertools.count()
_ACTIVE_TAPES: list[Tape] = []
_CORRUPTED_OPS: set[str] = set()


# ----------------------------- Tensor & tape ---------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_entry")

    def __init__(self, data: Any, requires_grad: bool = False, name: str = "") -> None:
        self.data: Array = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.name = name
        self._entry: TapeEntry | None = None

    @classmethod
    def _wrap(cls, data: Array, requires_grad: bool) -> Tensor:
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = requires_grad
        out.grad = None
        out.name = ""
        out._entry = None
        return out

    # shape helpers
    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operators
    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(as_tensor(other), self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(as_tensor(other), self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(as_tensor(other), self)

    def __truediv__(self, other: float) -> Tensor:
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)

    @property
    def T(self) -> Tensor:  # noqa: N802
        return transpose(self)


@dataclass
class TapeEntry:
    seq: int
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Rule


@dataclass
class Tape:
    """Ordered record of the operations of one forward pass."""

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def ops(self) -> list[str]:
        return [e.op for e in self.entries]

    def backward(self, root: Tensor) -> None:
        backward(root)


def as_tensor(x: Any) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64), requires_grad=False)


def parameter(data: Any, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _record(op: str, out_data: Array, inputs: tuple[Tensor, ...], rule: Rule) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=needs)
    if not needs:
        return out
    if op in _CORRUPTED_OPS:
        rule = _corrupt(rule)
    entry = TapeEntry(next(_SEQ), op, inputs, out, rule)
    out._entry = entry
    if _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].entries.append(entry)
    return out


def _corrupt(rule: Rule) -> Rule:
    def wrong(g: Array) -> Sequence[Array | None]:
        return [None if r is None else 1.5 * r + 1e-3 for r in rule(g)]

    return wrong


@contextmanager
def corrupt_backward(op: str) -> Iterator[None]:
    """Test hook: make the backward rule of ``op`` deliberately wrong."""
    _CORRUPTED_OPS.add(op)
    try:
        yield
    finally:
        _CORRUPTED_OPS.discard(op)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every reachable trainable leaf."""
    if root.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    if root._entry is None:
        root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1.0
        return

    reachable: dict[int, TapeEntry] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        e = t._entry
        if e is None or e.seq in reachable:
            continue
        reachable[e.seq] = e
        stack.extend(i for i in e.inputs if i.requires_grad)

    grads: dict[int, Array] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    for seq in sorted(reachable, reverse=True):
        e = reachable[seq]
        g = grads.pop(id(e.output), None)
        if g is None:
            continue
        for inp, gi in zip(e.inputs, e.rule(g), strict=True):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if inp._entry is None:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = np.array(grads[key], dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


# ----------------------------- elementwise -----------------------------------


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("scale", a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _record("add_scalar", a.data + float(s), (a,), lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    on = (a.data > 0.0).astype(np.float64)
    return _record("relu", a.data * on, (a,), lambda g: (g * on,))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    return _record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ----------------------------- linear algebra --------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return _record(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


# ----------------------------- reductions ------------------------------------


def _axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_to(g: Array, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool) -> Array:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(
    a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    axes = _axes(axis, a.ndim)
    return _record(
        "sum",
        a.data.sum(axis=axes, keepdims=keepdims),
        (a,),
        lambda g: (_expand_to(g, a.shape, axes, keepdims),),
    )


def reduce_mean(
    a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    axes = _axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(reduce_sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reduce_max(a: Tensor, axis: int | None = None) -> Tensor:
    """Max along one axis (or all); the gradient goes to the first maximal entry."""
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))

        def rule_all(g: Array) -> Sequence[Array]:
            gx = np.zeros(flat.shape)
            gx[idx] = float(np.asarray(g).reshape(-1)[0])
            return (gx.reshape(a.shape),)

        return _record("max", np.asarray(flat[idx]), (a,), rule_all)

    ax = axis % a.ndim
    arg = np.argmax(a.data, axis=ax)

    def rule(g: Array) -> Sequence[Array]:
        gx = np.zeros(a.shape)
        np.put_along_axis(gx, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _record("max", np.max(a.data, axis=ax), (a,), rule)


# ----------------------------- softmax ---------------------------------------


def softmax(a: Tensor, axis: int = -1, mask: Array | None = None) -> Tensor:
    """
    Softmax along ``axis`` with max-subtraction. ``mask`` (0/1, broadcastable)
    removes entries from the normalization; masked entries get weight 0.
    """
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {a.shape}")
    x = a.data
    if mask is None:
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        top = np.where(keep, x, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(keep, np.exp(np.where(keep, x - top, 0.0)), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g: Array) -> Sequence[Array]:
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def rule(g: Array) -> Sequence[Array]:
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", y, (a,), rule)


# ----------------------------- indexing & shape ------------------------------


def gather(a: Tensor, indices: Array | Sequence[int], axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    n = a.shape[ax]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"gather: index out of range for extent {n} on axis {ax}")

    def rule(g: Array) -> Sequence[Array]:
        gx = np.zeros(a.shape)
        gx_m = np.moveaxis(gx, ax, 0)
        g_m = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(gx_m, idx, g_m)
        return (gx,)

    return _record("gather", np.take(a.data, idx, axis=ax), (a,), rule)


def scatter_add(a: Tensor, indices: Array | Sequence[int], size: int, axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    ax = axis % a.ndim
    if idx.shape[0] != a.shape[ax]:
        raise DimensionError(
            f"scatter_add: {idx.shape[0]} indices for extent {a.shape[ax]} on axis {ax}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise IndexError(f"scatter_add: index out of range for size {size}")
    shape = list(a.shape)
    shape[ax] = size
    out = np.zeros(shape)
    np.add.at(np.moveaxis(out, ax, 0), idx, np.moveaxis(a.data, ax, 0))
    return _record("scatter_add", out, (a,), lambda g: (np.take(g, idx, axis=ax),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(tensors)
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        other = [s for i, s in enumerate(t.shape) if i != ax]
        first = [s for i, s in enumerate(ts[0].shape) if i != ax]
        if other != first:
            raise DimensionError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {ax}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _record(
        "concat",
        np.concatenate([t.data for t in ts], axis=ax),
        ts,
        lambda g: np.split(g, bounds, axis=ax),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    perm = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(perm))
    return _record("transpose", a.data.transpose(perm), (a,), lambda g: (g.transpose(inverse),))


# ----------------------------- MLPs -----------------------------------------


@dataclass
class Affine:
    weight: Tensor  # [d_in, d_out]
    bias: Tensor  # [d_out]


@dataclass
class MLPParams:
    layers: list[Affine]

    @property
    def d_in(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.layers[-1].weight.shape[1]


def init_affine(rng: np.random.Generator, d_in: int, d_out: int) -> Affine:
    bound = float(np.sqrt(1.0 / d_in))
    return Affine(
        weight=parameter(rng.uniform(-bound, bound, size=(d_in, d_out))),
        bias=parameter(np.zeros(d_out)),
    )


def init_mlp(rng: np.random.Generator, sizes: Sequence[int]) -> MLPParams:
    """sizes = (d_in, hidden..., d_out); one Affine per consecutive pair."""
    return MLPParams([init_affine(rng, a, b) for a, b in itertools.pairwise(sizes)])


def affine_apply(layer: Affine, x: Tensor) -> Tensor:
    return mlp_apply(MLPParams([layer]), x)


def mlp_apply(params: MLPParams, x: Tensor) -> Tensor:
    """Affine + ReLU for every layer but the last, which stays affine."""
    if x.shape[-1] != params.d_in:
        raise DimensionError(
            f"mlp_apply: trailing extent of {x.shape} does not match d_in={params.d_in}"
        )
    lead = x.shape[:-1]
    h = reshape(x, (-1, params.d_in)) if x.ndim != 2 else x
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        h = matmul(h, layer.weight) + layer.bias
        if i < last:
            h = relu(h)
    return reshape(h, (*lead, params.d_out)) if x.ndim != 2 else h


# ----------------------------- parameter trees -------------------------------


def named_parameters(tree: Any, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses, lists and tuples; yield trainable tensors with dotted names."""
    if isinstance(tree, Tensor):
        if tree.requires_grad:
            yield prefix, tree
        return
    if is_dataclass(tree) and not isinstance(tree, type):
        for f in fields(tree):
            yield from named_parameters(getattr(tree, f.name), _join(prefix, f.name))
        return
    if isinstance(tree, list | tuple):
        for i, item in enumerate(tree):
            yield from named_parameters(item, _join(prefix, str(i)))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def zero_grads(tree: Any) -> None:
    for _, p in named_parameters(tree):
        p.zero_grad()
