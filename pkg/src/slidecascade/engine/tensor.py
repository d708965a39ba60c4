"""Dense tensors with reverse-mode automatic differentiation.

The engine is a thin tape on top of numpy: every differentiable operation
returns a new Tensor whose ``_backward`` closure knows how to push an
incoming gradient to the operation's parents.  ``Tensor.backward`` walks
the tape in reverse topological order.  Tensors are treated as immutable
once created; nothing here mutates ``data`` in place, which is what makes
graph replay and gradient accumulation safe.

float32 is the working dtype for network math, float64 is accepted
everywhere for high-precision checks.  Operations preserve the dtype of
their inputs (mixed inputs promote to float64).
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp

__all__ = [
    "Tensor",
    "as_tensor",
    "concatenate",
    "matmul",
    "maximum_scalar",
    "no_grad",
    "softmax",
    "stack",
]

_ALLOWED_DTYPES = (np.float32, np.float64)

_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends tape construction.

    Ops executed inside run forward-only even when their inputs (model
    weights in particular) request gradients.  Used by inference paths,
    which would otherwise pin every intermediate array to a useless graph.
    """

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _tracking(*tensors) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == np.float32 or arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus an optional position on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _coerce(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = parents
        out._backward = backward
        out.requires_grad = True
        return out

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """The underlying array.  Callers must not write through it."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        dtype = np.dtype(dtype)
        if dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported tensor dtype {dtype}")
        if not _tracking(self):
            return Tensor(self.data.astype(dtype, copy=False))
        src_dtype = self.data.dtype
        out_data = self.data.astype(dtype)

        def backward(g):
            _accumulate(self, g.astype(src_dtype))

        return Tensor._from_op(out_data, (self,), backward)

    # -- gradient machinery ----------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate gradients of ``self`` into every tensor on its tape.

        ``grad`` defaults to ones, which is the usual choice when ``self``
        is a scalar loss.  The traversal is iterative; network graphs here
        run to tens of thousands of nodes, far past the recursion limit.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError(
                    f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}"
                )

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, np.add, _add_backward)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, _sub_backward)

    def __rsub__(self, other):
        return _binary(as_tensor(other, self.dtype), self, np.subtract, _sub_backward)

    def __mul__(self, other):
        return _binary(self, other, np.multiply, _mul_backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, np.divide, _div_backward)

    def __rtruediv__(self, other):
        return _binary(as_tensor(other, self.dtype), self, np.divide, _div_backward)

    def __neg__(self):
        if not _tracking(self):
            return Tensor(-self.data)

        def backward(g):
            _accumulate(self, -g)

        return Tensor._from_op(-self.data, (self,), backward)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("tensor ** tensor is not supported; use exp/log")
        out_data = self.data**exponent
        if not _tracking(self):
            return Tensor(out_data)

        def backward(g):
            _accumulate(self, g * exponent * self.data ** (exponent - 1))

        return Tensor._from_op(out_data, (self,), backward)

    # -- elementwise functions ----------------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        if not _tracking(self):
            return Tensor(out_data)

        def backward(g):
            _accumulate(self, g * out_data)

        return Tensor._from_op(out_data, (self,), backward)

    def log(self) -> "Tensor":
        out_data = np.log(self.data)
        if not _tracking(self):
            return Tensor(out_data)

        def backward(g):
            _accumulate(self, g / self.data)

        return Tensor._from_op(out_data, (self,), backward)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)
        if not _tracking(self):
            return Tensor(out_data)

        def backward(g):
            _accumulate(self, g * (0.5 / out_data))

        return Tensor._from_op(out_data, (self,), backward)

    def abs(self) -> "Tensor":
        out_data = np.abs(self.data)
        if not _tracking(self):
            return Tensor(out_data)

        def backward(g):
            # Subgradient 0 at the kink.
            _accumulate(self, g * np.sign(self.data))

        return Tensor._from_op(out_data, (self,), backward)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)
        if not _tracking(self):
            return Tensor(out_data)

        def backward(g):
            _accumulate(self, g * (1.0 - out_data * out_data))

        return Tensor._from_op(out_data, (self,), backward)

    def sigmoid(self) -> "Tensor":
        out_data = _sp.expit(self.data)
        if not _tracking(self):
            return Tensor(out_data)

        def backward(g):
            _accumulate(self, g * out_data * (1.0 - out_data))

        return Tensor._from_op(out_data, (self,), backward)

    def softplus(self) -> "Tensor":
        out_data = np.logaddexp(self.data.dtype.type(0), self.data)
        if not _tracking(self):
            return Tensor(out_data)

        def backward(g):
            _accumulate(self, g * _sp.expit(self.data))

        return Tensor._from_op(out_data, (self,), backward)

    def gelu(self) -> "Tensor":
        """Gaussian error linear unit, exact erf form."""
        x = self.data
        cdf = 0.5 * (1.0 + _sp.erf(x * np.float64(1.0 / np.sqrt(2.0)).astype(x.dtype)))
        out_data = (x * cdf).astype(x.dtype)
        if not _tracking(self):
            return Tensor(out_data)

        inv_sqrt2pi = x.dtype.type(0.3989422804014327)

        def backward(g):
            pdf = inv_sqrt2pi * np.exp(-0.5 * x * x)
            _accumulate(self, g * (cdf + x * pdf))

        return Tensor._from_op(out_data, (self,), backward)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        if not _tracking(self):
            return Tensor(out_data)
        in_shape = self.data.shape

        def backward(g):
            gx = g
            if not keepdims and axis is not None:
                gx = np.expand_dims(gx, axis)
            _accumulate(self, np.broadcast_to(gx, in_shape))

        return Tensor._from_op(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        if not _tracking(self):
            return Tensor(out_data)
        in_shape = self.data.shape
        count = self.data.size // max(out_data.size, 1)
        scale = self.data.dtype.type(1.0 / count)

        def backward(g):
            gx = g * scale
            if not keepdims and axis is not None:
                gx = np.expand_dims(gx, axis)
            _accumulate(self, np.broadcast_to(gx, in_shape))

        return Tensor._from_op(out_data, (self,), backward)

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        if not _tracking(self):
            return Tensor(out_data)
        in_shape = self.data.shape

        def backward(g):
            _accumulate(self, g.reshape(in_shape))

        return Tensor._from_op(out_data, (self,), backward)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        out_data = self.data.transpose(axes)
        if not _tracking(self):
            return Tensor(out_data)
        inverse = np.argsort(axes)

        def backward(g):
            _accumulate(self, g.transpose(inverse))

        return Tensor._from_op(out_data, (self,), backward)

    def __getitem__(self, index) -> "Tensor":
        out_data = self.data[index]
        if isinstance(out_data, np.ndarray) and out_data.base is not None:
            out_data = out_data.copy()
        if not _tracking(self):
            return Tensor(out_data)
        in_shape = self.data.shape
        in_dtype = self.data.dtype

        def backward(g):
            gx = np.zeros(in_shape, dtype=in_dtype)
            np.add.at(gx, index, g)
            _accumulate(self, gx)

        return Tensor._from_op(np.ascontiguousarray(out_data), (self,), backward)

    def pad2d(self, pad: int) -> "Tensor":
        """Zero-pad the two trailing axes by ``pad`` on every side."""
        if pad == 0:
            return self
        width = [(0, 0)] * (self.data.ndim - 2) + [(pad, pad), (pad, pad)]
        out_data = np.pad(self.data, width)
        if not _tracking(self):
            return Tensor(out_data)

        def backward(g):
            sl = (Ellipsis, slice(pad, -pad), slice(pad, -pad))
            _accumulate(self, g[sl])

        return Tensor._from_op(out_data, (self,), backward)

    def roll2d(self, shift_h: int, shift_w: int) -> "Tensor":
        """Cyclically shift the two trailing axes."""
        if shift_h == 0 and shift_w == 0:
            return self
        out_data = np.roll(self.data, (shift_h, shift_w), axis=(-2, -1))
        if not _tracking(self):
            return Tensor(out_data)

        def backward(g):
            _accumulate(self, np.roll(g, (-shift_h, -shift_w), axis=(-2, -1)))

        return Tensor._from_op(out_data, (self,), backward)

    def upsample_nearest2d(self, factor: int) -> "Tensor":
        """Nearest-neighbour upsampling of the two trailing axes."""
        if factor < 1:
            raise ValueError("upsampling factor must be a positive integer")
        out_data = self.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
        if not _tracking(self):
            return Tensor(out_data)
        h, w = self.data.shape[-2], self.data.shape[-1]

        def backward(g):
            lead = g.shape[:-2]
            gx = g.reshape(lead + (h, factor, w, factor)).sum(axis=(-3, -1))
            _accumulate(self, gx)

        return Tensor._from_op(out_data, (self,), backward)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype if dtype is not None else None)
    if arr.dtype not in _ALLOWED_DTYPES:
        arr = arr.astype(dtype if dtype is not None else np.float32)
    return Tensor(arr)


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    grad = _unbroadcast(grad, t.data.shape)
    if grad.dtype != t.data.dtype:
        grad = grad.astype(t.data.dtype)
    if t.grad is None:
        t.grad = grad.copy() if grad.base is not None or grad is t.data else grad
    else:
        t.grad = t.grad + grad


# -- binary op plumbing -------------------------------------------------------


def _binary(a, b, forward, make_backward) -> Tensor:
    a = a if isinstance(a, Tensor) else as_tensor(a)
    b = b if isinstance(b, Tensor) else as_tensor(b, a.dtype)
    out_data = forward(a.data, b.data)
    if not _tracking(a, b):
        return Tensor(out_data)
    return Tensor._from_op(out_data, (a, b), make_backward(a, b, out_data))


def _add_backward(a, b, out):
    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return backward


def _sub_backward(a, b, out):
    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return backward


def _mul_backward(a, b, out):
    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return backward


def _div_backward(a, b, out):
    def backward(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * out / b.data)

    return backward


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics over leading axes."""
    a = as_tensor(a)
    b = as_tensor(b)
    out_data = np.matmul(a.data, b.data)
    if not _tracking(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _tracking(*tensors):
        return Tensor(out_data)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return Tensor._from_op(out_data, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)
    if not _tracking(*tensors):
        return Tensor(out_data)

    def backward(g):
        parts = np.split(g, len(tensors), axis=axis)
        for t, part in zip(tensors, parts):
            _accumulate(t, np.squeeze(part, axis=axis))

    return Tensor._from_op(out_data, tuple(tensors), backward)


def maximum_scalar(t: Tensor, floor: float) -> Tensor:
    """Elementwise max(t, floor) against a constant."""
    t = as_tensor(t)
    out_data = np.maximum(t.data, t.data.dtype.type(floor))
    if not _tracking(t):
        return Tensor(out_data)
    mask = (t.data >= floor).astype(t.data.dtype)

    def backward(g):
        _accumulate(t, g * mask)

    return Tensor._from_op(out_data, (t,), backward)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the max shift is treated as a constant."""
    t = as_tensor(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    if not _tracking(t):
        return Tensor(out_data)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(t, out_data * (g - dot))

    return Tensor._from_op(out_data, (t,), backward)
