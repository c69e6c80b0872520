"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable value in the package is a :class:`Tensor` wrapping a
``numpy`` array.  Operations record their inputs and a vector-Jacobian
closure on the instance; :meth:`Tensor.backward` walks the recorded graph
in reverse topological order and accumulates gradients into ``.grad``.
The graph is consumed by the walk, so a second backward through the same
nodes raises instead of silently double-counting.

Only the primitives needed by the sizing and association models are
implemented.  All arithmetic is float64; there is no device or dtype
dispatch.
"""

from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "AutodiffError",
    "NonFiniteError",
    "no_grad",
    "add",
    "mul",
    "matmul",
    "conv2d",
    "relu",
    "softmax",
    "log",
    "exp",
    "logsumexp",
    "concat",
    "reshape",
    "transpose",
    "tensor_sum",
    "tensor_mean",
    "gather_pairs",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's contract."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class AutodiffError(RuntimeError):
    """Backward called on a value that cannot support it."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Context manager that disables graph recording (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus optional gradient bookkeeping.

    Args:
        data: array-like, coerced to a float64 ndarray.
        requires_grad: when True, :meth:`backward` will deposit
            ``dloss/dself`` into ``self.grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @classmethod
    def _from_op(cls, data, parents, vjp):
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data with no graph attached."""
        return Tensor(self.data)

    def check_finite(self, where: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{where}: non-finite values present")
        return self

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate dloss/dx into ``x.grad`` for every tensor in the graph.

        The receiver must be a scalar produced by a recorded computation.
        The recorded graph is released as it is walked, so calling backward
        twice on the same graph raises :class:`AutodiffError`.
        """
        if self.data.size != 1:
            raise AutodiffError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise AutodiffError("backward on a tensor outside any recorded graph")
        if self._vjp is None and not self._parents:
            raise AutodiffError(
                "no recorded graph: tensor is a leaf or its graph was consumed"
            )

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None:
                continue
            gouts = node._vjp(node.grad)
            for parent, g in zip(node._parents, gouts):
                if not parent.requires_grad or g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad = parent.grad + g
            node._parents = ()
            node._vjp = None

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return _slice(self, key)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.data.shape} with {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._from_op(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("mul", a, b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor._from_op(out, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands must be at least 2-D.

    Leading batch dimensions broadcast as in ``numpy.matmul``.
    """
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul", f"operands must be >= 2-D, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            "matmul", f"inner dims differ: {a.data.shape} vs {b.data.shape}"
        )
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor._from_op(out, (a, b), vjp)


def _conv_view(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding-window view (N, C, out_h, out_w, kh, kw) of a padded input."""
    n, c, h, w = xp.shape
    out_h = (h - kh) // stride + 1
    out_w = (w - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, out_h, out_w, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a batch of images with a filter bank.

    Args:
        x: input of shape (N, C, H, W).
        w: filters of shape (F, C, kh, kw).
        stride: positive step between window positions, same in both axes.
        padding: zero-padding applied to each spatial border.

    Returns:
        Tensor of shape (N, F, out_h, out_w) with
        ``out = (H + 2*padding - kh) // stride + 1`` per axis.
    """
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", f"need 4-D input and filters, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError("conv2d", f"channel mismatch: {x.data.shape} vs {w.data.shape}")
    if stride < 1:
        raise ShapeError("conv2d", f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError("conv2d", f"padding must be >= 0, got {padding}")
    n, c, h, wd = x.data.shape
    f, _, kh, kw = w.data.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} exceeds padded input {hp}x{wp}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    view = _conv_view(xp, kh, kw, stride)
    out = np.einsum("nchwij,fcij->nfhw", view, w.data, optimize=True)
    out_h, out_w = out.shape[2], out.shape[3]

    def vjp(g):
        gw = np.einsum("nfhw,nchwij->fcij", g, view, optimize=True)
        gxp = np.zeros_like(xp)
        # scatter each kernel tap back onto its strided input window
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += np.einsum(
                    "nfhw,fc->nchw", g, w.data[:, :, i, j], optimize=True
                )
        if padding:
            gx = gxp[:, :, padding:-padding, padding:-padding]
        else:
            gx = gxp
        return gx, gw

    return Tensor._from_op(out, (x, w), vjp)


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    # np.maximum rather than a mask so NaN propagates instead of
    # silently reading as "not positive" and flushing to zero
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return Tensor._from_op(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, stabilised by max subtraction."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._from_op(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return Tensor._from_op(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return Tensor._from_op(out, (a,), vjp)


def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) along ``axis`` without overflow for |a| up to ~1e3."""
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * soft,)

    return Tensor._from_op(out, (a,), vjp)


def concat(parts, axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis."""
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat", "need at least one tensor")
    nd = parts[0].data.ndim
    for p in parts:
        if p.data.ndim != nd:
            raise ShapeError("concat", "rank mismatch between parts")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tuple(parts), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.data.shape} to {shape}")

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return Tensor._from_op(out, (a,), vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(int(ax) for ax in axes)
    out = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(out, (a,), vjp)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor._from_op(out, (a,), vjp)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        g = np.asarray(g) / count
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor._from_op(out, (a,), vjp)


def _slice(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing with gradient scatter on backward."""
    a = _wrap(a)
    out = a.data[key]

    def vjp(g):
        gx = np.zeros_like(a.data)
        gx[key] += g
        return (gx,)

    return Tensor._from_op(out, (a,), vjp)


def gather_pairs(a: Tensor, rows, cols) -> Tensor:
    """Gather ``a[rows[k], cols[k]]`` into a 1-D tensor.

    Repeated index pairs accumulate their gradients additively.
    """
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError("gather_pairs", f"need a 2-D tensor, got {a.data.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError("gather_pairs", "rows and cols must be equal-length 1-D")
    m, n = a.data.shape
    if rows.size and (rows.min() < 0 or rows.max() >= m or cols.min() < 0 or cols.max() >= n):
        raise IndexError(
            f"gather_pairs: index out of range for shape {a.data.shape}"
        )
    out = a.data[rows, cols]

    def vjp(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return Tensor._from_op(out, (a,), vjp)
