"""Dense tensors with define-by-run reverse-mode differentiation.

Every public op builds a fresh graph node when at least one operand tracks
gradients; ``backward`` walks the graph in reverse topological order and
accumulates into the ``grad`` field of the leaves.

Shapes are explicit: binary elementwise ops require identical shapes, and the
only broadcasting is a Python scalar times a tensor (``scale``) and the
dedicated ``add_bias`` op along the last axis.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """A precondition of an op or routine was violated."""


def set_default_dtype(dtype) -> None:
    """Select float32 (training) or float64 (gradient checks) for new tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Wrap an op result; ``backward(g)`` returns one gradient (or None) per parent."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar keeps model code readable; all go through the explicit ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every grad-tracking leaf reachable from ``loss``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any grad-tracking tensor")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise DimensionError(
                    f"internal: gradient shape {pg.shape} != operand shape {parent.data.shape}"
                )
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return Tensor.from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor.from_op(a.data * a.data.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def add_sum(tensors: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum of same-shape tensors."""
    if not tensors:
        raise ContractError("add_sum of an empty sequence")
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b of shape (C,) added along the last axis."""
    if b.data.ndim != 1 or x.shape[-1:] != b.shape:
        raise DimensionError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return Tensor.from_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes; leading axes must match exactly."""
    if (
        a.data.ndim < 2
        or a.data.ndim != b.data.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise DimensionError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def _bw(g):
        return (
            np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None,
            np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None,
        )

    return Tensor.from_op(np.matmul(a.data, b.data), (a, b), _bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.data.ndim < 2:
            raise DimensionError(f"transpose needs rank >= 2, got {a.shape}")
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(
        np.ascontiguousarray(np.transpose(a.data, axes)),
        (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; trailing shapes must agree."""
    if not tensors:
        raise ContractError("concat_rows of an empty sequence")
    tail = tensors[0].shape[1:]
    for t in tensors:
        if t.shape[1:] != tail:
            raise DimensionError(f"concat_rows: trailing shape {t.shape[1:]} vs {tail}")
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def _bw(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(tensors)))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), _bw)


def split_rows(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of ``concat_rows``: cut axis 0 into consecutive pieces."""
    sizes = [int(s) for s in sizes]
    if sum(sizes) != a.shape[0] or any(s < 0 for s in sizes):
        raise DimensionError(f"split_rows: sizes {sizes} do not partition {a.shape[0]} rows")
    pieces = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def _bw(g, lo=lo, hi=hi):
            full = np.zeros_like(a.data)
            full[lo:hi] = g
            return (full,)

        pieces.append(Tensor.from_op(a.data[lo:hi].copy(), (a,), _bw))
        start = hi
    return pieces


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements (scalar)."""
    return Tensor.from_op(
        np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.full_like(a.data, g),)
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
        return Tensor.from_op(
            np.asarray(a.data.mean(), dtype=a.dtype),
            (a,),
            lambda g: (np.full_like(a.data, g / n),),
        )
    n = a.shape[axis]
    return Tensor.from_op(
        a.data.mean(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),),
    )


def var(a: Tensor, axis: int | None = None) -> Tensor:
    """Population variance."""
    if axis is None:
        n = a.data.size
        centered = a.data - a.data.mean()
        return Tensor.from_op(
            np.asarray((centered**2).mean(), dtype=a.dtype),
            (a,),
            lambda g: (g * 2.0 / n * centered,),
        )
    n = a.shape[axis]
    centered = a.data - a.data.mean(axis=axis, keepdims=True)
    return Tensor.from_op(
        (centered**2).mean(axis=axis),
        (a,),
        lambda g: (np.expand_dims(g, axis) * 2.0 / n * centered,),
    )


def tabs(a: Tensor) -> Tensor:
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def _bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return Tensor.from_op((x * cdf).astype(x.dtype, copy=False), (a,), _bw)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def _bw(g):
        return (g * _sigmoid(x),)

    return Tensor.from_op(out, (a,), _bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1 - out),))


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis with row-max subtraction."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (a,), _bw)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor.from_op(out, (a,), _bw)


def take_last(a: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``a[..., index[...]]``: one entry of the last axis per position."""
    index = np.asarray(index)
    if index.shape != a.shape[:-1]:
        raise DimensionError(f"take_last: index shape {index.shape} vs {a.shape[:-1]}")
    idx = index[..., None].astype(np.intp)
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def _bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return Tensor.from_op(out, (a,), _bw)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale every vector along the last axis to unit Euclidean norm."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x / denom

    def _bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        gx = np.where(norm > eps, (g - out * dot) / denom, g / denom)
        return (gx,)

    return Tensor.from_op(out, (a,), _bw)


def constant(x, dtype=None) -> Tensor:
    return Tensor(x, requires_grad=False, dtype=dtype)


def leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t.is_leaf]
