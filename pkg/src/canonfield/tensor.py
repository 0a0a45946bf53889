"""Reverse-mode automatic differentiation over dense numpy arrays.

Eager evaluation: every op computes its result immediately and records a
backward closure.  The graph is implicit in the ``_parents`` links; calling
:meth:`Tensor.backward` on a scalar topologically sorts the reachable nodes
and runs the closures in reverse order.  Leaves accumulate (never overwrite)
their gradients, so two backward calls sum contributions until
:func:`zero_grad` is used.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "set_debug_nonfinite",
    "set_default_dtype",
    "default_dtype",
    "tensor",
    "zeros",
    "concat",
    "maximum",
    "softmax",
    "cosine_similarity",
    "cross3",
    "norm",
    "dot",
    "conv2d",
    "interp_bilinear",
    "no_grad",
    "zero_grad",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """Debug mode detected a NaN/Inf in an op output."""


_DEBUG_NONFINITE = False
_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_debug_nonfinite(enabled: bool) -> None:
    global _DEBUG_NONFINITE
    _DEBUG_NONFINITE = bool(enabled)


def set_default_dtype(dtype) -> None:
    """Switch between f64 training mode and f32 inference mode."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class no_grad:
    """Context manager: ops inside build no graph (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if _DEBUG_NONFINITE and not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(arr)))
        raise NonFiniteError(f"non-finite output of {opname} at index {bad[0]}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=_DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # ------------------------------------------------------------------
    # bookkeeping

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.grad is not None}{tag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _record(self, out: "Tensor", parents, backward, opname: str) -> "Tensor":
        _check_finite(out.data, opname)
        if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
            out.requires_grad = False
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def _needs(self) -> bool:
        return self.requires_grad or bool(self._parents)

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other):
        other = _wrap(other)
        try:
            out = Tensor(self.data + other.data)
        except ValueError:
            raise ShapeError(f"add: {self.shape} vs {other.shape}")

        def back(g):
            if self._needs():
                self._accum(_unbroadcast(g, self.shape))
            if other._needs():
                other._accum(_unbroadcast(g, other.shape))

        return self._record(out, (self, other), back, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        try:
            out = Tensor(self.data - other.data)
        except ValueError:
            raise ShapeError(f"sub: {self.shape} vs {other.shape}")

        def back(g):
            if self._needs():
                self._accum(_unbroadcast(g, self.shape))
            if other._needs():
                other._accum(_unbroadcast(-g, other.shape))

        return self._record(out, (self, other), back, "sub")

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        other = _wrap(other)
        try:
            out = Tensor(self.data * other.data)
        except ValueError:
            raise ShapeError(f"mul: {self.shape} vs {other.shape}")

        def back(g):
            if self._needs():
                self._accum(_unbroadcast(g * other.data, self.shape))
            if other._needs():
                other._accum(_unbroadcast(g * self.data, other.shape))

        return self._record(out, (self, other), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        try:
            out = Tensor(self.data / other.data)
        except ValueError:
            raise ShapeError(f"div: {self.shape} vs {other.shape}")

        def back(g):
            if self._needs():
                self._accum(_unbroadcast(g / other.data, self.shape))
            if other._needs():
                other._accum(_unbroadcast(-g * self.data / other.data**2, other.shape))

        return self._record(out, (self, other), back, "div")

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __neg__(self):
        out = Tensor(-self.data)

        def back(g):
            if self._needs():
                self._accum(-g)

        return self._record(out, (self,), back, "neg")

    def __matmul__(self, other):
        other = _wrap(other)
        a, b = self.data, other.data
        if a.ndim > 2 or b.ndim > 2:
            raise ShapeError(f"matmul supports <=2D operands: {a.shape} vs {b.shape}")
        try:
            out = Tensor(a @ b)
        except ValueError:
            raise ShapeError(f"matmul: {a.shape} vs {b.shape}")

        def back(g):
            ga = gb = None
            if a.ndim == 1 and b.ndim == 1:  # dot -> scalar
                ga, gb = g * b, g * a
            elif a.ndim == 2 and b.ndim == 2:
                ga, gb = g @ b.T, a.T @ g
            elif a.ndim == 1:  # (k,) @ (k,n) -> (n,)
                ga, gb = b @ g, np.outer(a, g)
            else:  # (m,k) @ (k,) -> (m,)
                ga, gb = np.outer(g, b), a.T @ g
            if self._needs():
                self._accum(ga)
            if other._needs():
                other._accum(gb)

        return self._record(out, (self, other), back, "matmul")

    # ------------------------------------------------------------------
    # reductions

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims))

        def back(g):
            if not self._needs():
                return
            if axis is None:
                self._accum(np.broadcast_to(g, self.shape).copy())
            else:
                ax = axis if isinstance(axis, tuple) else (axis,)
                if not keepdims:
                    g = np.expand_dims(g, ax)
                self._accum(np.broadcast_to(g, self.shape).copy())

        return self._record(out, (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def cumsum(self, axis: int):
        out = Tensor(np.cumsum(self.data, axis=axis))

        def back(g):
            if self._needs():
                self._accum(np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

        return self._record(out, (self,), back, "cumsum")

    def cumprod(self, axis: int):
        y = np.cumprod(self.data, axis=axis)
        out = Tensor(y)

        def back(g):
            if not self._needs():
                return
            # O(n^2) along the axis, exact in the presence of zero factors:
            # dy_k/dx_i = prod_{j<=k, j!=i} x_j for k >= i.
            x = np.moveaxis(self.data, axis, -1)
            go = np.moveaxis(g, axis, -1)
            n = x.shape[-1]
            gx = np.zeros_like(x)
            for i in range(n):
                xi = x.copy()
                xi[..., i] = 1.0
                partial = np.cumprod(xi, axis=-1)[..., i:]
                gx[..., i] = (go[..., i:] * partial).sum(axis=-1)
            self._accum(np.moveaxis(gx, -1, axis))

        return self._record(out, (self,), back, "cumprod")

    # ------------------------------------------------------------------
    # elementwise

    def _unary(self, y: np.ndarray, dydx, opname: str):
        out = Tensor(y)

        def back(g):
            if self._needs():
                self._accum(g * dydx())

        return self._record(out, (self,), back, opname)

    def exp(self):
        y = np.exp(self.data)
        return self._unary(y, lambda: y, "exp")

    def log(self):
        return self._unary(np.log(self.data), lambda: 1.0 / self.data, "log")

    def abs(self):
        return self._unary(np.abs(self.data), lambda: np.sign(self.data), "abs")

    def square(self):
        return self._unary(np.square(self.data), lambda: 2.0 * self.data, "square")

    def sqrt(self):
        y = np.sqrt(self.data)
        return self._unary(y, lambda: 0.5 / y, "sqrt")

    def sin(self):
        return self._unary(np.sin(self.data), lambda: np.cos(self.data), "sin")

    def cos(self):
        return self._unary(np.cos(self.data), lambda: -np.sin(self.data), "cos")

    def sigmoid(self):
        y = 1.0 / (1.0 + np.exp(-self.data))
        return self._unary(y, lambda: y * (1.0 - y), "sigmoid")

    def softplus(self):
        # log(1+exp(x)) computed stably; derivative is sigmoid(x)
        y = np.logaddexp(0.0, self.data)
        return self._unary(y, lambda: 1.0 / (1.0 + np.exp(-self.data)), "softplus")

    def elu(self):
        x = self.data
        neg = np.expm1(np.minimum(x, 0.0))
        y = np.where(x > 0.0, x, neg)
        return self._unary(y, lambda: np.where(x > 0.0, 1.0, neg + 1.0), "elu")

    def leaky_relu(self, slope: float = 0.01):
        x = self.data
        y = np.where(x > 0.0, x, slope * x)
        return self._unary(y, lambda: np.where(x > 0.0, 1.0, slope), "leaky_relu")

    def maximum(self, scalar: float):
        # hinge with strict tie-break: gradient flows to x iff x > scalar
        x = self.data
        y = np.maximum(x, scalar)
        return self._unary(y, lambda: (x > scalar).astype(x.dtype), "maximum")

    # ------------------------------------------------------------------
    # shape manipulation

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = Tensor(self.data.reshape(shape))

        def back(g):
            if self._needs():
                self._accum(g.reshape(old))

        return self._record(out, (self,), back, "reshape")

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        out = Tensor(self.data.transpose(axes))

        def back(g):
            if self._needs():
                self._accum(g.transpose(inv))

        return self._record(out, (self,), back, "transpose")

    @property
    def T(self):
        return self.transpose()

    def broadcast_to(self, shape):
        out = Tensor(np.broadcast_to(self.data, shape).copy())

        def back(g):
            if self._needs():
                self._accum(_unbroadcast(g, self.shape))

        return self._record(out, (self,), back, "broadcast")

    def __getitem__(self, idx):
        out = Tensor(self.data[idx])

        def back(g):
            if self._needs():
                full = np.zeros_like(self.data)
                np.add.at(full, idx, g)
                self._accum(full)

        return self._record(out, (self,), back, "slice")

    # ------------------------------------------------------------------
    # backward

    def backward(self) -> None:
        if self.data.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # reverse topological order: visit each node exactly once
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:  # intermediate grads are releasable
                node.grad = None
                node._backward = None
                node._parents = ()


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


# ----------------------------------------------------------------------
# functional aliases


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t._needs():
                t._accum(piece)

    return tensors[0]._record(out, tuple(tensors), back, "concat")


def maximum(x: Tensor, scalar: float) -> Tensor:
    return _wrap(x).maximum(scalar)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shift = x - Tensor(x.data.max(axis=axis, keepdims=True))  # constant shift
    e = shift.exp()
    return e / e.sum(axis=axis, keepdims=True)


def norm(x: Tensor) -> Tensor:
    return _wrap(x).square().sum().sqrt()


def dot(a: Tensor, b: Tensor) -> Tensor:
    return (_wrap(a) * _wrap(b)).sum()


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: {a.shape} vs {b.shape}")
    return dot(a, b) / (norm(a) * norm(b))


def cross3(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return concat(
        [
            (a[1] * b[2] - a[2] * b[1]).reshape(1),
            (a[2] * b[0] - a[0] * b[2]).reshape(1),
            (a[0] * b[1] - a[1] * b[0]).reshape(1),
        ]
    )


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """2D convolution, NCHW layout, square 3x3-style kernels.

    ``w`` has shape (C_out, C_in, k, k); implemented as im2col + matmul.
    """
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    n, cin, h, wd = x.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, cin, oh, ow, k, k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, cin * k * k)
    wmat = w.data.reshape(cout, cin * k * k)
    y = (cols @ wmat.T + b.data).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    out = Tensor(y)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, cout)
        if w._needs():
            w._accum((gmat.T @ cols).reshape(w.shape))
        if b._needs():
            b._accum(gmat.sum(axis=0))
        if x._needs():
            gcols = (gmat @ wmat).reshape(n, oh, ow, cin, k, k)
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di : di + oh * stride : stride, dj : dj + ow * stride : stride] += (
                        gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
                    )
            x._accum(gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp)

    return x._record(out, (x, w, b), back, "conv2d")


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear interpolation matrix (align-corners=False)."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    return m


def interp_bilinear(x: Tensor, out_hw: tuple) -> Tensor:
    """Bilinear resize of (N, C, H, W) feature maps to ``out_hw``."""
    x = _wrap(x)
    n, c, h, w = x.shape
    oh, ow = out_hw
    ah = _interp_matrix(h, oh).astype(x.data.dtype)
    aw = _interp_matrix(w, ow).astype(x.data.dtype)
    y = np.einsum("ij,ncjk,lk->ncil", ah, x.data, aw, optimize=True)
    out = Tensor(y)

    def back(g):
        if x._needs():
            x._accum(np.einsum("ij,ncjk,lk->ncil", ah.T, g, aw.T, optimize=True))

    return x._record(out, (x,), back, "interp_bilinear")


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


def finite_difference_check(f, x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between backward() and central differences.

    ``f`` must be a scalar-valued function of ``x`` alone.  Returns
    max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    x.grad = None
    x.requires_grad = True
    out = f(x)
    if not np.isfinite(out.data):
        raise NonFiniteError("objective is non-finite at the base point")
    out.backward()
    analytic = x.grad.copy()
    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(x.data)).item()
        flat[i] = orig - eps
        lo = f(Tensor(x.data)).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"objective non-finite when perturbing coordinate {i}")
        numeric[i] = (hi - lo) / (2.0 * eps)
    analytic = analytic.reshape(-1)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())
