"""Reverse-mode autodiff over dense float64 arrays.

Deliberately small: only the operations the encoder, losses and the recurrent
exit classifier need. Graphs are built eagerly; ``Tensor.backward()`` walks the
tape once in reverse topological order. Not a general-purpose autodiff.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, GradientError, NonFiniteError

Axis = None | int | tuple[int, ...]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    `grad` is accumulated (summed) by backward passes; call `zero_grad`
    between steps. Data is always float64: training and gradient-check paths
    need the headroom.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- elementwise arithmetic ------------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other) -> "Tensor":
        other = Tensor._coerce(other)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._result(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def backward(g):
            self._accumulate(-g)

        return Tensor._result(-self.data, (self,), backward)

    def __sub__(self, other) -> "Tensor":
        other = Tensor._coerce(other)
        out_data = self.data - other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.data.shape))

        return Tensor._result(out_data, (self, other), backward)

    def __rsub__(self, other) -> "Tensor":
        return Tensor._coerce(other) - self

    def __mul__(self, other) -> "Tensor":
        other = Tensor._coerce(other)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._result(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._coerce(other)
        out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape)
                )

        return Tensor._result(out_data, (self, other), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._coerce(other) / self

    # -- linear algebra / shape ------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = Tensor._coerce(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise DimensionError("matmul expects 2-D operands")
        if self.data.shape[1] != other.data.shape[0]:
            raise DimensionError(
                f"matmul inner extents differ: {self.data.shape} @ {other.data.shape}"
            )
        out_data = self.data @ other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor._result(out_data, (self, other), backward)

    __matmul__ = matmul

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        out_data = np.transpose(self.data, axes)
        inv = None if axes is None else np.argsort(axes)

        def backward(g):
            self._accumulate(np.transpose(g, inv))

        return Tensor._result(out_data, (self,), backward)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            self._accumulate(g.reshape(old))

        return Tensor._result(out_data, (self,), backward)

    # -- nonlinearities ----------------------------------------------------------

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0.0)

        def backward(g):
            self._accumulate(g * (self.data > 0.0))

        return Tensor._result(out_data, (self,), backward)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def backward(g):
            self._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._result(out_data, (self,), backward)

    def sigmoid(self) -> "Tensor":
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            self._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._result(out_data, (self,), backward)

    def softsign(self) -> "Tensor":
        """x / (1 + |x|); smooth sign surrogate with derivative 1/(1+|x|)^2."""
        denom = 1.0 + np.abs(self.data)
        out_data = self.data / denom

        def backward(g):
            self._accumulate(g / (denom * denom))

        return Tensor._result(out_data, (self,), backward)

    def sign(self) -> "Tensor":
        """+1 where x > 0 else -1. Inference-only: backward raises."""
        out_data = np.where(self.data > 0.0, 1.0, -1.0)

        def backward(g):
            raise GradientError(
                "sign has no gradient; training paths must use softsign"
            )

        return Tensor._result(out_data, (self,), backward)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def backward(g):
            self._accumulate(g * out_data)

        return Tensor._result(out_data, (self,), backward)

    def log(self) -> "Tensor":
        out_data = np.log(self.data)

        def backward(g):
            self._accumulate(g / self.data)

        return Tensor._result(out_data, (self,), backward)

    def sqrt(self) -> "Tensor":
        """Elementwise sqrt; the subgradient at 0 is taken as 0.

        The zero convention keeps pairwise-distance gradients finite when two
        rows coincide exactly (the only place 0 enters a training path).
        """
        out_data = np.sqrt(self.data)

        def backward(g):
            with np.errstate(divide="ignore"):
                scale = np.where(out_data > 0.0, 0.5 / np.where(out_data > 0.0, out_data, 1.0), 0.0)
            self._accumulate(g * scale)

        return Tensor._result(out_data, (self,), backward)

    def square(self) -> "Tensor":
        out_data = self.data * self.data

        def backward(g):
            self._accumulate(g * 2.0 * self.data)

        return Tensor._result(out_data, (self,), backward)

    # -- reductions & selection ---------------------------------------------------

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape).copy())

        return Tensor._result(out_data, (self,), backward)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def take_pairs(self, rows: np.ndarray, cols: np.ndarray) -> "Tensor":
        """Gather entries (rows[i], cols[i]) of a 2-D tensor into a 1-D tensor.

        The index arrays are fixed (non-differentiable selection); the backward
        pass scatter-adds into the source.
        """
        if self.data.ndim != 2:
            raise DimensionError("take_pairs expects a 2-D tensor")
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        out_data = self.data[rows, cols]

        def backward(g):
            buf = np.zeros_like(self.data)
            np.add.at(buf, (rows, cols), g)
            self._accumulate(buf)

        return Tensor._result(out_data, (self,), backward)

    # -- graph traversal -----------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this (scalar) tensor w.r.t. every leaf."""
        if not self.requires_grad:
            raise GradientError("backward on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GradientError("backward without explicit grad needs a scalar output")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


# -- free-function aliases used throughout the package ------------------------


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def require_finite(x: Tensor | np.ndarray, where: str) -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values entering {where}")


def patchify(x: Tensor, patch_h: int, patch_w: int) -> Tensor:
    """Rearrange N x H x W x C into N x H/ph x W/pw x (ph*pw*C) patches.

    Pure data movement; the backward pass applies the inverse rearrangement.
    H must divide by patch_h and W by patch_w.
    """
    n, h, w, c = x.data.shape
    if h % patch_h or w % patch_w:
        raise DimensionError(
            f"spatial extents {h}x{w} not divisible by patch {patch_h}x{patch_w}"
        )
    hh, ww = h // patch_h, w // patch_w
    out_data = (
        x.data.reshape(n, hh, patch_h, ww, patch_w, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, hh, ww, patch_h * patch_w * c)
    )

    def backward(g):
        back = (
            g.reshape(n, hh, ww, patch_h, patch_w, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, h, w, c)
        )
        x._accumulate(back)

    return Tensor._result(out_data, (x,), backward)


def stack_rows(tensors: Iterable[Tensor]) -> Tensor:
    """Stack same-shape 1-D tensors into a 2-D tensor (differentiable)."""
    ts = list(tensors)
    out_data = np.stack([t.data for t in ts], axis=0)

    def backward(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accumulate(g[i])

    return Tensor._result(out_data, tuple(ts), backward)
