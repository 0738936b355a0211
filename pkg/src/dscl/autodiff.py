"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray together with the graph bookkeeping needed for
backpropagation: the parent nodes that produced it and a closure that routes
the output gradient to those parents. Graphs are built eagerly by the ops
below, stay alive for one training step, and are freed when the root goes out
of scope.

Training arithmetic defaults to float64 so the finite-difference checker can
run at tight tolerances; float32 is supported for benchmarking. uint16 is a
storage-only dtype (masks, group assignments) and rejects arithmetic.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

DTYPE_FLOAT32 = np.float32
DTYPE_FLOAT64 = np.float64
DTYPE_UINT16 = np.uint16

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested op."""


class DegenerateVectorError(ValueError):
    """A vector with zero norm/variance where a direction is required."""


class ContractError(ValueError):
    """An op was invoked outside its contract (e.g. non-scalar backward root)."""


class NonFiniteError(FloatingPointError):
    """A public op produced NaN/Inf from finite inputs."""


_finite_checks_enabled = True


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle post-op NaN/Inf detection (on by default, off for benchmarks)."""
    global _finite_checks_enabled
    prev = _finite_checks_enabled
    _finite_checks_enabled = enabled
    try:
        yield
    finally:
        _finite_checks_enabled = prev


def _check_finite(arr, tag):
    if _finite_checks_enabled and arr.dtype in _FLOAT_DTYPES:
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values produced by op '{tag}'")


def _unbroadcast(grad, shape):
    # Sum gradient over axes that were broadcast in the forward pass.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Value plus autodiff node: data, parents, and a local gradient closure.

    Data is treated as immutable once constructed; nothing in this module
    writes to it after creation, so tensors are safe to share read-only.
    """

    __slots__ = ("data", "grad", "requires_grad", "tag", "_prev", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, _prev=(), tag="leaf"):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES and arr.dtype != np.dtype(np.uint16):
            arr = arr.astype(np.float64)
        if requires_grad and arr.dtype not in _FLOAT_DTYPES:
            raise ContractError(f"requires_grad needs a float dtype, got {arr.dtype}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.tag = tag
        self._prev = _prev
        self._backward = None
        _check_finite(arr, tag)

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float64, requires_grad=False):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float64, requires_grad=False):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, tag={self.tag!r})"

    def _require_float(self, op):
        if self.data.dtype not in _FLOAT_DTYPES:
            raise ContractError(f"op '{op}' needs a float tensor, got {self.data.dtype}")

    # -- graph plumbing --------------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def topo_order(self):
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self):
        """Backpropagate from this node, accumulating grads by sum over paths."""
        order = self.topo_order()
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- elementwise arithmetic ------------------------------------------------

    def _binary(self, other, fwd, tag, back):
        other = other if isinstance(other, Tensor) else Tensor(other, dtype=self.data.dtype)
        self._require_float(tag)
        other._require_float(tag)
        out = Tensor(
            fwd(self.data, other.data),
            requires_grad=self.requires_grad or other.requires_grad,
            _prev=(self, other),
            tag=tag,
        )

        def _backward():
            ga, gb = back(out.grad, self.data, other.data)
            if self.requires_grad:
                self._accumulate(_unbroadcast(ga, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(gb, other.data.shape))

        out._backward = _backward
        return out

    def __add__(self, other):
        return self._binary(other, np.add, "add", lambda g, a, b: (g, g))

    def __radd__(self, other):
        return Tensor(other, dtype=self.data.dtype) + self

    def __sub__(self, other):
        return self._binary(other, np.subtract, "sub", lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return Tensor(other, dtype=self.data.dtype) - self

    def __mul__(self, other):
        return self._binary(other, np.multiply, "mul", lambda g, a, b: (g * b, g * a))

    def __rmul__(self, other):
        return self * other

    def __truediv__(self, other):
        return self._binary(
            other, np.divide, "div", lambda g, a, b: (g / b, -g * a / (b * b))
        )

    def __rtruediv__(self, other):
        return Tensor(other, dtype=self.data.dtype) / self

    def __neg__(self):
        return self * -1.0

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ContractError("only scalar exponents are supported")
        self._require_float("pow")
        out = Tensor(self.data**p, requires_grad=self.requires_grad, _prev=(self,), tag="pow")

        def _backward():
            self._accumulate(out.grad * p * self.data ** (p - 1))

        out._backward = _backward
        return out

    # -- unary ops ---------------------------------------------------------------

    def _unary(self, fwd, tag, back):
        self._require_float(tag)
        out = Tensor(fwd(self.data), requires_grad=self.requires_grad, _prev=(self,), tag=tag)

        def _backward():
            self._accumulate(back(out.grad, self.data, out.data))

        out._backward = _backward
        return out

    def exp(self):
        return self._unary(np.exp, "exp", lambda g, x, y: g * y)

    def log(self):
        return self._unary(np.log, "log", lambda g, x, y: g / x)

    def sqrt(self):
        return self._unary(np.sqrt, "sqrt", lambda g, x, y: g / (2.0 * y))

    def relu(self):
        return self._unary(
            lambda x: np.maximum(x, 0.0), "relu", lambda g, x, y: g * (x > 0)
        )

    def softplus(self):
        # log(1 + e^x), evaluated as max(x, 0) + log1p(e^-|x|) for stability.
        def fwd(x):
            return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

        def back(g, x, y):
            return g / (1.0 + np.exp(-x))

        return self._unary(fwd, "softplus", back)

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        self._require_float("sum")
        out = Tensor(
            self.data.sum(axis=axis, keepdims=keepdims),
            requires_grad=self.requires_grad,
            _prev=(self,),
            tag="sum",
        )

        def _backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))

        out._backward = _backward
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- structural ops -------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        self._require_float("reshape")
        out = Tensor(
            self.data.reshape(shape), requires_grad=self.requires_grad, _prev=(self,), tag="reshape"
        )

        def _backward():
            self._accumulate(out.grad.reshape(self.data.shape))

        out._backward = _backward
        return out

    @property
    def T(self):
        if self.data.ndim != 2:
            raise ShapeError(f"transpose needs a matrix, got shape {self.data.shape}")
        self._require_float("transpose")
        out = Tensor(self.data.T, requires_grad=self.requires_grad, _prev=(self,), tag="transpose")

        def _backward():
            self._accumulate(out.grad.T)

        out._backward = _backward
        return out

    def __getitem__(self, idx):
        self._require_float("getitem")
        out = Tensor(self.data[idx], requires_grad=self.requires_grad, _prev=(self,), tag="getitem")

        def _backward():
            g = np.zeros_like(self.data)
            np.add.at(g, idx, out.grad)
            self._accumulate(g)

        out._backward = _backward
        return out

    def take_flat(self, flat_indices):
        """Gather by flat index into the row-major view (im2col plumbing)."""
        self._require_float("take_flat")
        flat_indices = np.asarray(flat_indices)
        out = Tensor(
            self.data.reshape(-1)[flat_indices],
            requires_grad=self.requires_grad,
            _prev=(self,),
            tag="take_flat",
        )

        def _backward():
            g = np.zeros(self.data.size, dtype=self.data.dtype)
            np.add.at(g, flat_indices.reshape(-1), out.grad.reshape(-1))
            self._accumulate(g.reshape(self.data.shape))

        out._backward = _backward
        return out


def concat(tensors, axis=0):
    """Concatenate tensors along an axis, differentiable per segment."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    for t in tensors:
        t._require_float("concat")
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        requires_grad=any(t.requires_grad for t in tensors),
        _prev=tuple(tensors),
        tag="concat",
    )
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def _backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if not t.requires_grad:
                continue
            index = [slice(None)] * out.data.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(out.grad[tuple(index)])

    out._backward = _backward
    return out


def pad2d(t: Tensor, pad_rows, pad_cols) -> Tensor:
    """Zero-pad the two leading axes of a rank-3 (rows, cols, channels) tensor."""
    if t.data.ndim != 3:
        raise ShapeError(f"pad2d needs a rank-3 tensor, got shape {t.data.shape}")
    t._require_float("pad2d")
    out = Tensor(
        np.pad(t.data, (pad_rows, pad_cols, (0, 0))),
        requires_grad=t.requires_grad,
        _prev=(t,),
        tag="pad2d",
    )
    r0, c0 = pad_rows[0], pad_cols[0]
    rows, cols = t.data.shape[0], t.data.shape[1]

    def _backward():
        t._accumulate(out.grad[r0 : r0 + rows, c0 : c0 + cols, :])

    out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product c[i,j] = sum_t a[i,t] b[t,j], differentiable in both."""
    a._require_float("matmul")
    b._require_float("matmul")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: left {a.data.shape} vs right {b.data.shape}"
        )
    out = Tensor(
        a.data @ b.data,
        requires_grad=a.requires_grad or b.requires_grad,
        _prev=(a, b),
        tag="matmul",
    )

    def _backward():
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    out._backward = _backward
    return out


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if m.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {m.data.shape}")
    # The shift is a constant per row; the softmax Jacobian annihilates it.
    shifted = m - Tensor(m.data.max(axis=1, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=1, keepdims=True)


def _as_vector(t: Tensor, op: str) -> Tensor:
    if t.data.ndim != 1:
        raise ShapeError(f"{op} needs 1-D vectors, got shape {t.data.shape}")
    return t


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """cos(u, v) = u.v / (|u| |v|); raises on zero-norm inputs."""
    u = _as_vector(u, "cosine_similarity")
    v = _as_vector(v, "cosine_similarity")
    if u.data.shape != v.data.shape:
        raise ShapeError(f"cosine_similarity shape mismatch: {u.data.shape} vs {v.data.shape}")
    if not np.linalg.norm(u.data) > 0 or not np.linalg.norm(v.data) > 0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    nu = (u * u).sum().sqrt()
    nv = (v * v).sum().sqrt()
    return (u * v).sum() / (nu * nv)


def pearson_corr(u: Tensor, v: Tensor) -> Tensor:
    """Pearson correlation; cosine of the mean-centered vectors."""
    u = _as_vector(u, "pearson_corr")
    v = _as_vector(v, "pearson_corr")
    if u.data.shape != v.data.shape:
        raise ShapeError(f"pearson_corr shape mismatch: {u.data.shape} vs {v.data.shape}")
    if u.data.size < 2:
        raise ContractError("pearson_corr needs vectors of length >= 2")
    if np.ptp(u.data) == 0 or np.ptp(v.data) == 0:
        raise DegenerateVectorError("pearson correlation of a zero-variance vector")
    uc = u - u.mean()
    vc = v - v.mean()
    return (uc * vc).sum() / ((uc * uc).sum().sqrt() * (vc * vc).sum().sqrt())


def backward(root: Tensor) -> dict:
    """Run backprop from a scalar root; return {leaf tensor: gradient array}.

    Only leaves constructed with requires_grad=True appear in the map.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")
    root.backward()
    grads = {}
    for node in root.topo_order():
        if node.requires_grad and not node._prev:
            grads[node] = node.grad if node.grad is not None else np.zeros_like(node.data)
    return grads


@dataclass
class GradReport:
    """Outcome of a finite-difference check, worst relative error per parameter."""

    max_rel_error: dict = field(default_factory=dict)
    tolerance: float = 1e-4
    passed: bool = False

    def worst(self):
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0

    def lines(self):
        status = "PASS" if self.passed else "FAIL"
        out = [
            f"{name}: max_rel_error={err:.3e} tol={self.tolerance:.1e}"
            for name, err in self.max_rel_error.items()
        ]
        out.append(f"{status}: worst={self.worst():.3e}")
        return out


def finite_diff_check(loss_fn, params, eps=1e-5, tol=1e-4) -> GradReport:
    """Compare analytic gradients of loss_fn() against central differences.

    params maps name -> leaf Tensor (a sequence is auto-named). loss_fn must
    rebuild its graph from the current parameter data on every call; the
    checker perturbs parameter entries in place and restores them.
    """
    if eps <= 0:
        raise ContractError("finite_diff_check needs eps > 0")
    if not isinstance(params, dict):
        params = {f"p{i}": t for i, t in enumerate(params)}
    loss = loss_fn()
    grads = backward(loss)
    report = GradReport(tolerance=tol)
    worst_by_param = {}
    for name, t in params.items():
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        flat = t.data.flat
        aflat = analytic.reshape(-1)
        worst = 0.0
        for i in range(t.data.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            rel = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
        worst_by_param[name] = worst
    report.max_rel_error = worst_by_param
    report.passed = all(err <= tol for err in worst_by_param.values())
    return report
