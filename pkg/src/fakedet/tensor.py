"""N-dimensional tensors with reverse-mode automatic differentiation.

Tensors wrap a contiguous numpy array (float32 by default, float64 for
gradient checking) plus an optional gradient buffer. Every differentiable
op records its input tensors and a backward rule on the output tensor;
``backward()`` on a scalar loss replays those rules in reverse topological
order and accumulates gradients into every ``requires_grad`` ancestor.

Shape discipline is strict: elementwise ops require identical shapes, the
only implicit broadcast is tensor-vs-python-scalar. Anything else must go
through an explicit ``broadcast_to``.

Randomness: ``uniform``/``normal`` draw from numpy's PCG64 generator
(``np.random.default_rng``), so identical seeds reproduce identical
tensors bit for bit.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables op recording (inference / stats)."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _as_array(data, dtype=None) -> np.ndarray:
    # ndarray inputs keep their float precision; everything else (lists,
    # scalars) lands on the float32 default
    preserve = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not preserve:
        arr = arr.astype(DEFAULT_DTYPE)
    return np.ascontiguousarray(arr)


class Tensor:
    """A real-valued n-d array that can participate in autodiff.

    Attributes:
        data: contiguous numpy array holding the values.
        requires_grad: whether backward() should deposit a gradient here.
        grad: numpy array of the same shape as ``data``, or None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # ---- basic introspection -------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, cut loose from the graph."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # ---- graph construction --------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: Sequence["Tensor"],
            backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Wrap an op result, recording parents and the backward rule."""
        out = Tensor.__new__(Tensor)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self) -> None:
        """Populate .grad on every requires_grad ancestor of this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor with no recorded graph")
        tape = Tape.trace(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        data = self.data[idx]

        def bwd(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                full[idx] = g
                self._accumulate(full)

        return Tensor._op(data, (self,), bwd)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)


class Tape:
    """Topologically ordered record of the ops feeding one root tensor.

    ``nodes`` lists every tensor reachable from the root through recorded
    parents, inputs strictly before outputs; the backward pass walks it
    once, in reverse.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; deep model graphs overflow recursion
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


# ---- creation ------------------------------------------------------------


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    _check_shape(shape)
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    _check_shape(shape)
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def uniform(shape, low=0.0, high=1.0, *, seed, dtype=DEFAULT_DTYPE,
            requires_grad=False) -> Tensor:
    """Deterministic uniform fill; ``seed`` is an int or a numpy Generator."""
    _check_shape(shape)
    rng = _as_rng(seed)
    return Tensor(rng.uniform(low, high, size=shape).astype(dtype), requires_grad=requires_grad)


def normal(shape, mean=0.0, std=1.0, *, seed, dtype=DEFAULT_DTYPE,
           requires_grad=False) -> Tensor:
    _check_shape(shape)
    rng = _as_rng(seed)
    return Tensor((mean + std * rng.standard_normal(size=shape)).astype(dtype),
                  requires_grad=requires_grad)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _check_shape(shape) -> None:
    if isinstance(shape, (int, np.integer)):
        shape = (shape,)
    for extent in shape:
        if not isinstance(extent, (int, np.integer)):
            raise ValueError(f"non-integer extent in shape {shape}")
        if extent < 0:
            raise ValueError(f"negative extent in shape {shape}")


# ---- elementwise ---------------------------------------------------------


def _coerce_pair(a, b):
    """Enforce the strict-shape rule for a tensor/tensor or tensor/scalar pair."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}; "
                             "use broadcast_to for anything beyond scalars")
        return a, b, None
    return a, None, float(b)


def add(a, b) -> Tensor:
    a, bt, scalar = _coerce_pair(a, b)
    if bt is None:
        def bwd(g):
            if a.requires_grad:
                a._accumulate(g)
        return Tensor._op(a.data + scalar, (a,), bwd)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if bt.requires_grad:
            bt._accumulate(g)

    return Tensor._op(a.data + bt.data, (a, bt), bwd)


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return add(a, -float(b))
    if not isinstance(a, Tensor):
        return add(neg(b), float(a))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return Tensor._op(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, bt, scalar = _coerce_pair(a, b)
    if bt is None:
        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * scalar)
        return Tensor._op(a.data * scalar, (a,), bwd)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * bt.data)
        if bt.requires_grad:
            bt._accumulate(g * a.data)

    return Tensor._op(a.data * bt.data, (a, bt), bwd)


def div(a, b) -> Tensor:
    if isinstance(b, Tensor):
        if not isinstance(a, Tensor):
            return mul(reciprocal(b), float(a))
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g / b.data)
            if b.requires_grad:
                b._accumulate(-g * a.data / (b.data * b.data))

        return Tensor._op(a.data / b.data, (a, b), bwd)
    return mul(a, 1.0 / float(b))


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(-g)

    return Tensor._op(-a.data, (a,), bwd)


def reciprocal(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(-g * out_data * out_data)

    return Tensor._op(out_data, (a,), bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * exponent * np.power(a.data, exponent - 1.0))

    return Tensor._op(np.power(a.data, exponent), (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return Tensor._op(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive inputs")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return Tensor._op(np.log(a.data), (a,), bwd)


def maximum(a: Tensor, threshold: float) -> Tensor:
    """Elementwise max with a scalar; gradient flows where a > threshold."""
    threshold = float(threshold)
    mask = a.data > threshold

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return Tensor._op(np.maximum(a.data, threshold), (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the band."""
    mask = (a.data > lo) & (a.data < hi)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return Tensor._op(np.clip(a.data, lo, hi), (a,), bwd)


# ---- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Rank 2 is the classic a[m,k] @ b[k,n]; ranks above 2
    are stacked matrices and must share the exact same batch prefix."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs rank >= 2 on both sides")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"batch prefixes differ: {a.shape} @ {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor._op(np.matmul(a.data, b.data), (a, b), bwd)


# ---- reductions ----------------------------------------------------------


def _check_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
    return tuple(ax % ndim for ax in axes)


def _spread(g, in_shape, axes, keepdims):
    """Broadcast a reduced gradient back over the reduced axes."""
    if axes is not None and not keepdims:
        expanded = list(g.shape)
        for ax in sorted(axes):
            expanded.insert(ax, 1)
        g = g.reshape(expanded)
    return np.broadcast_to(g, in_shape)


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _check_axis(axis, a.ndim)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(_spread(g, a.shape, axes, keepdims)))

    return Tensor._op(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bwd)


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _check_axis(axis, a.ndim)
    if axes is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(_spread(g, a.shape, axes, keepdims)) / count)

    return Tensor._op(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    _check_axis(axis, a.ndim)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            inner = np.sum(g * out_data, axis=axis, keepdims=True)
            a._accumulate(out_data * (g - inner))

    return Tensor._op(out_data, (a,), bwd)


# ---- shape ops -----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise ValueError(f"cannot reshape {a.shape} ({a.size} values) to {shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return Tensor._op(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(np.transpose(g, inverse)))

    return Tensor._op(np.transpose(a.data, axes), (a,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat of no tensors")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(np.ascontiguousarray(piece))

    return Tensor._op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast (numpy trailing-alignment rules)."""
    shape = tuple(shape)
    out_data = np.broadcast_to(a.data, shape)
    lead = len(shape) - a.ndim
    summed_axes = tuple(range(lead)) + tuple(
        lead + i for i, extent in enumerate(a.shape) if extent == 1 and shape[lead + i] != 1
    )

    def bwd(g):
        if a.requires_grad:
            kept = g.sum(axis=summed_axes, keepdims=True) if summed_axes else g
            a._accumulate(np.ascontiguousarray(kept.reshape(a.shape)))

    return Tensor._op(np.ascontiguousarray(out_data), (a,), bwd)


# ---- verification --------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], at: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a pure scalar-valued function of its tensor argument and
    ``at`` must be float64; relative error is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if at.dtype != np.float64:
        raise ValueError("grad_check requires a float64 tensor")
    x = Tensor(at.data.copy(), requires_grad=True, dtype=np.float64)
    out = f(x)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(at.data)
    flat = at.data.copy().ravel()
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(flat.reshape(at.shape), dtype=np.float64)).item()
            flat[i] = orig - eps
            fm = f(Tensor(flat.reshape(at.shape), dtype=np.float64)).item()
            flat[i] = orig
            numeric.ravel()[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
