"""Dense tensors with a recording tape for reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape nothing is recorded,
which is how evaluation runs without bookkeeping.

Gradients accumulate into ``Tensor.grad`` of leaf tensors across backward
calls; call :func:`zero_grads` between updates.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from heterrec.errors import ContractError, InvalidMaskError, ShapeError

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


@contextmanager
def shadow64():
    """Create new constants in float64; used only for gradient checking."""
    prev = default_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def flat(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, c: float):
        return scale(self, 1.0 / c)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward", "name")

    def __init__(self, out, parents, backward, name):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.name = name


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside are appended in
    creation order, which is a valid topological order for the backward sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple, backward: Callable, name: str) -> None:
        node = _Node(out, parents, backward, name)
        out._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None, on_visit=None) -> None:
        """Propagate ``d loss`` to every reachable leaf that requires a gradient."""
        if grad is None:
            if loss.data.size != 1:
                raise ContractError(f"backward needs a scalar loss or explicit grad, got {loss.shape}")
            grad = np.ones_like(loss.data)
        if not loss.requires_grad:
            return
        if loss.is_leaf:
            _accumulate_leaf(loss, grad)
            return
        pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            if on_visit is not None:
                on_visit(node)
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    _accumulate_leaf(parent, pg)
                else:
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _result(data: np.ndarray, parents: tuple, backward: Callable, name: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    tape = active_tape()
    out.requires_grad = tape is not None and any(p.requires_grad for p in parents)
    if out.requires_grad:
        tape.record(out, parents, backward, name)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple, opname: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a} and {b} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = _unbroadcast(g * b.data, sa) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, sb) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _result(np.where(on, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * on,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat_last_dim(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_last_dim: nothing to concatenate")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat_last_dim: leading shapes differ: {[q.shape for q in parts]}")
    widths = [p.shape[-1] for p in parts]
    cuts = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _result(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), backward, "concat")


def slice_(a: Tensor, key) -> Tensor:
    """Index with numpy semantics; backward scatter-adds so repeated indices work."""
    shape = a.shape
    out = np.ascontiguousarray(a.data[key])

    def backward(g):
        ga = np.zeros(shape, dtype=g.dtype)
        np.add.at(ga, key, g)
        return (ga,)

    return _result(out, (a,), backward, "slice")


# ---------------------------------------------------------------------------
# linear algebra and lookups
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]``; ``b`` may also be a shared 2-D matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ for {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Rows ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError(f"embedding ids must be integers, got dtype {ids.dtype}")
    n_rows, width = table.shape
    if ids.size:
        lo, hi = int(ids.min()), int(ids.max())
        if lo < 0 or hi >= n_rows:
            bad = lo if lo < 0 else hi
            raise IndexError(f"embedding id {bad} out of range for table with V={n_rows} rows")

    def backward(g):
        gt = np.zeros((n_rows, width), dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, width))
        return (gt,)

    return _result(table.data[ids], (table,), backward, "gather")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def _check_mask(mask: np.ndarray, shape: tuple) -> np.ndarray:
    mask = np.asarray(mask)
    try:
        full = np.broadcast_to(mask, shape)
    except ValueError:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {shape}") from None
    dead = np.all(np.isneginf(mask), axis=-1)
    if np.any(dead):
        raise InvalidMaskError("mask leaves a row with no unmasked entry")
    return full


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis of ``logits + mask`` with ``mask`` in {0, -inf}."""
    _check_mask(mask, logits.shape)
    z = logits.data + np.asarray(mask, dtype=logits.data.dtype)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (logits,), backward, "masked_softmax")


def masked_logsumexp(x: Tensor, mask) -> Tensor:
    """``log(sum(exp(x + mask)))`` over the last axis."""
    _check_mask(mask, x.shape)
    z = x.data + np.asarray(mask, dtype=x.data.dtype)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    tot = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(tot))[..., 0]
    p = e / tot

    def backward(g):
        return (g[..., None] * p,)

    return _result(out, (x,), backward, "masked_logsumexp")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}, {bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), backward, "layer_norm")
