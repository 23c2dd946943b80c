"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A ``Tensor`` wraps a numpy array together with the operation record needed
to run a reverse sweep. The primitive set is deliberately small: exactly
what the force/acceleration models and their constrained solve need.
Values are always 64-bit floats; no broadcasting rules beyond numpy's own.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff engine."""


class ShapeMismatchError(AutodiffError):
    """Operands have incompatible shapes for the requested primitive."""


class LinearSolveError(AutodiffError):
    """The matrix passed to solve() is not symmetric positive definite."""


class NonScalarLossError(AutodiffError):
    """backward() was called on a tensor that is not scalar-valued."""


class Tensor:
    """A node of the computation graph.

    ``parents`` and ``vjps`` are aligned: vjps[i](grad_out) is the
    contribution of this node's output gradient to parents[i]. Gradient
    accumulation across fan-out is additive.
    """

    __slots__ = ("value", "grad", "parents", "vjps", "requires_grad")

    def __init__(self, value, parents=(), vjps=(), requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self.parents
        )

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backprop(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def parameter(x) -> Tensor:
    return Tensor(x, requires_grad=True)


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo numpy broadcasting: reduce gradient g down to `shape`."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary_values(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError as exc:
        raise ShapeMismatchError(
            f"cannot broadcast shapes {a.value.shape} and {b.value.shape}"
        ) from exc
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_values(a, b)
    return Tensor(
        a.value + b.value,
        parents=(a, b),
        vjps=(
            lambda g: _sum_to_shape(g, a.value.shape),
            lambda g: _sum_to_shape(g, b.value.shape),
        ),
    )


def sub(a, b) -> Tensor:
    a, b = _binary_values(a, b)
    return Tensor(
        a.value - b.value,
        parents=(a, b),
        vjps=(
            lambda g: _sum_to_shape(g, a.value.shape),
            lambda g: _sum_to_shape(-g, b.value.shape),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = _binary_values(a, b)
    return Tensor(
        a.value * b.value,
        parents=(a, b),
        vjps=(
            lambda g: _sum_to_shape(g * b.value, a.value.shape),
            lambda g: _sum_to_shape(g * a.value, b.value.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.value, parents=(a,), vjps=(lambda g: -g,))


def matmul(a, b) -> Tensor:
    """Matrix-matrix, matrix-vector or vector-matrix product (ndim <= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim > 2 or bv.ndim > 2 or av.ndim == 0 or bv.ndim == 0:
        raise ShapeMismatchError(
            f"matmul supports 1-D/2-D operands, got {av.shape} @ {bv.shape}"
        )
    if av.shape[-1] != bv.shape[0]:
        raise ShapeMismatchError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    value = av @ bv

    if av.ndim == 2 and bv.ndim == 2:
        vjp_a = lambda g: g @ bv.T
        vjp_b = lambda g: av.T @ g
    elif av.ndim == 2 and bv.ndim == 1:
        vjp_a = lambda g: np.outer(g, bv)
        vjp_b = lambda g: av.T @ g
    elif av.ndim == 1 and bv.ndim == 2:
        vjp_a = lambda g: bv @ g
        vjp_b = lambda g: np.outer(av, g)
    else:  # 1-D dot product
        vjp_a = lambda g: g * bv
        vjp_b = lambda g: g * av
    return Tensor(value, parents=(a, b), vjps=(vjp_a, vjp_b))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor(a.value.T, parents=(a,), vjps=(lambda g: g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.value.shape
    try:
        value = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatchError(f"cannot reshape {old} to {shape}") from exc
    return Tensor(value, parents=(a,), vjps=(lambda g: g.reshape(old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatchError("concat of an empty sequence")
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(str(exc)) from exc
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        lo, hi = offsets[k], offsets[k + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return Tensor(
        value, parents=tuple(tensors), vjps=tuple(make_vjp(k) for k in range(len(tensors)))
    )


def sum_(a) -> Tensor:
    """Sum of all entries (scalar output)."""
    a = as_tensor(a)
    return Tensor(
        a.value.sum(),
        parents=(a,),
        vjps=(lambda g: np.full(a.value.shape, float(g)),),
    )


def norm(a) -> Tensor:
    """L2 norm of all entries. Subgradient 0 at the origin."""
    a = as_tensor(a)
    value = np.linalg.norm(a.value)

    def vjp(g):
        if value == 0.0:
            return np.zeros(a.value.shape)
        return (float(g) / value) * a.value

    return Tensor(value, parents=(a,), vjps=(vjp,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    value = np.sqrt(a.value)
    return Tensor(value, parents=(a,), vjps=(lambda g: g * (0.5 / value),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.value)
    return Tensor(value, parents=(a,), vjps=(lambda g: g * value,))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    value = 1.0 / a.value
    return Tensor(value, parents=(a,), vjps=(lambda g: -g * value * value,))


def squareplus(a, b: float = 4.0) -> Tensor:
    """Smooth positive activation (x + sqrt(x^2 + b)) / 2, b > 0."""
    if b <= 0.0:
        raise AutodiffError(f"squareplus shape parameter must be positive, got {b}")
    a = as_tensor(a)
    root = np.sqrt(a.value * a.value + b)
    value = 0.5 * (a.value + root)
    return Tensor(value, parents=(a,), vjps=(lambda g: g * 0.5 * (1.0 + a.value / root),))


def take_rows(a, idx) -> Tensor:
    """Gather rows (or entries of a vector) by integer index, with repeats."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    value = a.value[idx]

    def vjp(g):
        out = np.zeros(a.value.shape)
        np.add.at(out, idx, g)
        return out

    return Tensor(value, parents=(a,), vjps=(vjp,))


def scatter_rows(a, idx, n_rows: int) -> Tensor:
    """Sum rows of `a` into an (n_rows, ...) array at positions `idx`."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape[0] != a.value.shape[0]:
        raise ShapeMismatchError(
            f"scatter index length {idx.shape[0]} != row count {a.value.shape[0]}"
        )
    out_shape = (n_rows,) + a.value.shape[1:]
    value = np.zeros(out_shape)
    np.add.at(value, idx, a.value)
    return Tensor(value, parents=(a,), vjps=(lambda g: g[idx],))


def solve(a, b) -> Tensor:
    """Solve S x = y for symmetric positive-definite S.

    The backward rule is the adjoint solve: no explicit inverse is formed.
    """
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise ShapeMismatchError(f"solve expects a square matrix, got {av.shape}")
    if bv.shape[0] != av.shape[0]:
        raise ShapeMismatchError(f"solve rhs length {bv.shape} mismatches {av.shape}")
    if not np.allclose(av, av.T, rtol=1e-8, atol=1e-10):
        raise LinearSolveError("solve: matrix is not symmetric")
    try:
        factor = scipy.linalg.cho_factor(av, lower=True, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise LinearSolveError(f"solve: matrix is not positive definite ({exc})") from exc
    value = scipy.linalg.cho_solve(factor, bv, check_finite=False)

    def vjp_b(g):
        return scipy.linalg.cho_solve(factor, g, check_finite=False)

    def vjp_a(g):
        gb = scipy.linalg.cho_solve(factor, g, check_finite=False)
        if value.ndim == 1:
            return -np.outer(gb, value)
        return -gb @ value.T

    return Tensor(value, parents=(a, b), vjps=(vjp_a, vjp_b))


def _toposort(root: Tensor) -> list:
    """Iterative DFS post-order over the graph reachable from root."""
    order = []
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
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backprop(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; fills .grad on reachable tensors."""
    if loss.value.ndim != 0:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.value.shape}")
    if not loss.requires_grad:
        loss.grad = np.ones(())
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + contrib
            else:
                grads[id(parent)] = np.asarray(contrib, dtype=np.float64)


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for a named parameter set.

    Parameters not reachable from the loss get zero gradients.
    """
    for p in params.values():
        p.grad = None
    backprop(loss)
    out = {}
    for name, p in params.items():
        if p.grad is None:
            out[name] = np.zeros(p.value.shape)
        else:
            out[name] = np.asarray(p.grad, dtype=np.float64).reshape(p.value.shape)
    return out


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient oracle for a scalar function of a vector."""
    if h <= 0:
        raise AutodiffError(f"finite difference step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
