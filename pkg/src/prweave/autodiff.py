"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient the output records its parents, a backward closure and the
version stamp each parent had at record time; :func:`backward` replays the
recorded graph in reverse topological order. Mutating a recorded tensor
(``Tensor.assign``) bumps its version, and a later backward through the
stale graph raises :class:`DanglingNodeError`.
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's arity rules."""


class NonFiniteError(FloatingPointError):
    """A forward or backward value became NaN or infinite."""


class DanglingNodeError(RuntimeError):
    """A tensor recorded in the graph was mutated after the forward pass."""


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, order="C", copy=True)
    return arr


class Tensor:
    __slots__ = (
        "data", "requires_grad", "grad", "name",
        "_parents", "_backward", "_op", "_version", "_parent_versions",
    )

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._version = 0
        self._parent_versions: tuple = ()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def assign(self, value) -> None:
        """Replace the contents in place of the graph (optimizer updates)."""
        value = _as_array(value)
        if value.shape != self.data.shape:
            raise ShapeError(f"assign: shape {value.shape} != {self.data.shape}")
        self.data = value
        self._version += 1

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite value in output")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._version = 0
    out._op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._parent_versions = tuple(p._version for p in parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._parent_versions = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a.data, b.data)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a.data, b.data)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    """Elementwise product; a Python scalar or array operand is a constant."""
    a = _lift(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=np.float64)
        _broadcast_shape("mul", a.data, c)

        def back_const(g):
            return (_unbroadcast(g * c, a.shape),)

        return _make("mul", a.data * c, (a,), back_const)
    _broadcast_shape("mul", a.data, b.data)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), back)


def softplus(a: Tensor) -> Tensor:
    z = a.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))

    def back(g):
        return (g / (1.0 + np.exp(-z)),)

    return _make("softplus", out, (a,), back)


def abs_(a: Tensor) -> Tensor:
    """Absolute value; the subgradient at zero is taken as 0."""

    def back(g):
        return (g * np.sign(a.data),)

    return _make("abs", np.abs(a.data), (a,), back)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(B, m, k) @ (B, k, n)``."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} differ")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make("matmul", out, (a, b), back)


# ----------------------------------------------------------------------------
# reductions and normalisation


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (a,), back)


def mse(a: Tensor, b) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def back(g):
        ga = g * 2.0 * diff / n
        return ga, -ga

    return _make("mse", np.asarray(np.mean(diff * diff)), (a, b), back)


# ----------------------------------------------------------------------------
# structural


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        grads = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, back)


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.data.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _make("slice", np.ascontiguousarray(a.data[idx]), (a,), back)


# ----------------------------------------------------------------------------
# fused attention (compiled kernel when available)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention of ``q`` over ``(k, v)``.

    Shapes are ``(B, Lq, d)``, ``(B, Lk, d)``, ``(B, Lk, d)``; the width is
    split into ``n_heads`` contiguous head slices.
    """
    if q.data.ndim != 3 or k.data.ndim != 3 or v.data.ndim != 3:
        raise ShapeError(f"attention: expected 3-d operands, got {q.shape}, {k.shape}, {v.shape}")
    if k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError(f"attention: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    if q.shape[2] % n_heads:
        raise ShapeError(f"attention: width {q.shape[2]} not divisible by {n_heads} heads")
    out, probs = kernels.attention_forward(q.data, k.data, v.data, n_heads)

    def back(g):
        return kernels.attention_backward(
            np.ascontiguousarray(g), q.data, k.data, v.data, probs, n_heads
        )

    return _make("attention", out, (q, k, v), back)


# ----------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, seed=None) -> Dict[int, np.ndarray]:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every leaf that requires it.

    ``seed`` defaults to ones (for a scalar output, 1.0). Returns a map from
    ``id(leaf)`` to the gradient contributed by this call.
    """
    if not output.requires_grad:
        return {}
    if seed is None:
        seed = np.ones(output.shape)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")
    order = _topological(output)
    grads: Dict[int, np.ndarray] = {id(output): seed}
    leaves: Dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, ver in zip(node._parents, node._parent_versions):
            if p._version != ver:
                raise DanglingNodeError(
                    f"{node._op}: input {p!r} was modified after the forward pass"
                )
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            _check_finite(f"backward of {node._op}", pg)
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


def finite_difference_gradient(
    f: Callable[[], float], params: Tensor, step: float = 1e-5
) -> np.ndarray:
    """Central-difference estimate of df/dparams, coordinate by coordinate.

    ``f`` is re-evaluated with ``params.data`` perturbed in place and must be
    deterministic. The original values are restored afterwards.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = params.data.copy()
    flat = base.reshape(-1)
    out = np.zeros(flat.size)
    try:
        for i in range(flat.size):
            pert = flat.copy()
            pert[i] = flat[i] + step
            params.data = pert.reshape(base.shape)
            f_plus = float(f())
            pert[i] = flat[i] - step
            params.data = pert.reshape(base.shape)
            f_minus = float(f())
            out[i] = (f_plus - f_minus) / (2.0 * step)
    finally:
        params.data = base
    return out.reshape(base.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Max-norm relative error ``max|a - n| / max(max|a|, max|n|)``.

    Normalising by the largest entry of the group keeps near-zero
    coordinates (where central differences only resolve ~1e-10) from
    dominating. Two all-zero gradients give 0.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))))
    diff = float(np.max(np.abs(a - n)))
    if scale < floor:
        return 0.0 if diff < floor else float("inf")
    return diff / scale


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
