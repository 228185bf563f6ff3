"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy buffers (float32 by default; float64 is accepted and
is what the finite-difference gradient checks run in). Differentiable
operations record their parents and a backward closure on the output
node; ``backward`` walks that implicit tape once in reverse topological
order and then consumes it, so a graph can only be differentiated once.

Non-finite results are treated as errors, not data: every op verifies its
output with ``numpy.isfinite`` while ``finite_checks`` is enabled (the
default). Disable via ``set_finite_checks(False)`` only for throughput
experiments.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_finite_checks = True


class ShapeError(ValueError):
    """Operand dimensions violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """The gradient tape was misused (non-scalar loss, double backward)."""


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = bool(enabled)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in _FLOAT_DTYPES:
        return arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _consumed(_):
    raise TapeError("gradient tape already consumed; rebuild the graph to differentiate again")


def _node(data: np.ndarray, parents, backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tracked = any(p.requires_grad or (p._backward is not None and p._backward is not _consumed) for p in parents)
    out.requires_grad = tracked
    if tracked:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad and t._backward is None:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor that requires it.

    The loss must hold exactly one element. The tape is single-use:
    backward() consumes every visited node, and a second call raises.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss._backward is _consumed:
        raise TapeError("gradient tape already consumed; rebuild the graph to differentiate again")
    if loss._backward is None and not loss._parents and not loss.requires_grad:
        raise TapeError("loss is not connected to any tensor that requires grad")

    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node._backward is not _consumed:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node._backward(node.grad)
            # consume the tape so a second backward cannot silently reuse it
            node._parents = ()
            node._backward = _consumed


# ---------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), back, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    data = a.data * a.data.dtype.type(s)

    def back(g):
        _accumulate(a, g * s)

    return _node(data, (a,), back, "scale")


# ---------------------------------------------------------------------
# matrix product
# ---------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; backward gives dA = dC @ B^T and dB = A^T @ dC.

    Public contract is 2-D x 2-D. Stacked 3-D x 3-D with equal leading
    dimension is also accepted (used internally for multi-head attention).
    """
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"batched matmul dims disagree: {a.shape} @ {b.shape}")
    else:
        raise ShapeError(f"matmul supports 2-D or equal-batch 3-D operands, got {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def back(g):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _node(data, (a, b), back, "matmul")


# ---------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)

    def back(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(data, (a,), back, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))

    def back(g):
        _accumulate(a, g.transpose(inverse))

    return _node(data, (a,), back, "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _node(data, tuple(tensors), back, "concat")


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0; duplicate indices are allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a 1-D index array")
    data = a.data[idx]

    def back(g):
        dx = np.zeros_like(a.data)
        np.add.at(dx, idx, g)
        _accumulate(a, dx)

    return _node(data, (a,), back, "gather_rows")


def scatter_rows(a: Tensor, idx, length: int) -> Tensor:
    """Place rows of ``a`` at ``idx`` in a zero tensor of ``length`` rows.

    Indices must be unique (later writes would win otherwise).
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"scatter_rows needs one index per row: {idx.shape} vs {a.shape}")
    data = np.zeros((int(length),) + a.shape[1:], dtype=a.data.dtype)
    data[idx] = a.data

    def back(g):
        _accumulate(a, g[idx])

    return _node(data, (a,), back, "scatter_rows")


# ---------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def back(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(data, (a,), back, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def back(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _node(data, (a,), back, "mean_all")


# ---------------------------------------------------------------------
# neural-network primitives
# ---------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError(f"layer_norm affine shape {gamma.shape}/{beta.shape} does not match feature dim {h}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(beta, g.sum(axis=lead))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, (dxhat - m1 - xhat * m2) * inv)

    return _node(data, (x, gamma, beta), back, "layer_norm")


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last dimension."""
    if x.shape[-1] == 0:
        raise ShapeError("softmax over an empty dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accumulate(x, data * (g - dot))

    return _node(data, (x,), back, "softmax")


_GELU_K0 = 0.7978845608028654  # sqrt(2 / pi)
_GELU_K1 = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation."""
    u = _GELU_K0 * (x.data + _GELU_K1 * x.data**3)
    t = np.tanh(u)
    data = (0.5 * x.data * (1.0 + t)).astype(x.data.dtype)

    def back(g):
        du = _GELU_K0 * (1.0 + 3.0 * _GELU_K1 * x.data**2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du
        _accumulate(x, (g * d).astype(x.data.dtype))

    return _node(data, (x,), back, "gelu")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pooling on [C, H, W].

    Odd spatial dims are zero-padded on the right/bottom first, so any
    grid is accepted and the output is [C, ceil(H/2), ceil(W/2)].
    """
    if x.ndim != 3:
        raise ShapeError(f"max_pool2d expects [C, H, W], got {x.shape}")
    c, h, w = x.shape
    if h == 0 or w == 0:
        raise ShapeError("max_pool2d on empty spatial dims")
    hp, wp = h + (h % 2), w + (w % 2)
    buf = x.data
    if (hp, wp) != (h, w):
        buf = np.zeros((c, hp, wp), dtype=x.data.dtype)
        buf[:, :h, :w] = x.data
    win = buf.reshape(c, hp // 2, 2, wp // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, hp // 2, wp // 2, 4)
    arg = win.argmax(axis=-1)
    data = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dbuf = dwin.reshape(c, hp // 2, wp // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, hp, wp)
        _accumulate(x, dbuf[:, :h, :w])

    return _node(data, (x,), back, "max_pool2d")


def conv_transpose2x2(x: Tensor, w: Tensor) -> Tensor:
    """Transposed convolution, kernel 2 and stride 2: [C_in,H,W] -> [C_out,2H,2W]."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ShapeError(f"conv_transpose2x2 expects x[C,H,W], w[C,C_out,2,2]; got {x.shape}, {w.shape}")
    if x.shape[0] != w.shape[0]:
        raise ShapeError(f"conv_transpose2x2 channel mismatch: input {x.shape[0]} vs kernel {w.shape[0]}")
    ci, h, width = x.shape
    co = w.shape[1]
    # out[o, 2i+a, 2j+b] = sum_c x[c,i,j] * w[c,o,a,b]; stride == kernel, so
    # output cells are disjoint and the product is a plain einsum.
    t = np.einsum("cij,coab->oiajb", x.data, w.data)
    data = np.ascontiguousarray(t.reshape(co, 2 * h, 2 * width))

    def back(g):
        g5 = g.reshape(co, h, 2, width, 2)
        _accumulate(x, np.einsum("oiajb,coab->cij", g5, w.data))
        _accumulate(w, np.einsum("oiajb,cij->coab", g5, x.data))

    return _node(data, (x, w), back, "conv_transpose2x2")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of [C, H, W] by an integer factor."""
    if x.ndim != 3:
        raise ShapeError(f"upsample_nearest expects [C, H, W], got {x.shape}")
    k = int(factor)
    c, h, w = x.shape
    data = np.ascontiguousarray(np.repeat(np.repeat(x.data, k, axis=1), k, axis=2))

    def back(g):
        _accumulate(x, g.reshape(c, h, k, w, k).sum(axis=(2, 4)))

    return _node(data, (x,), back, "upsample_nearest")


def softmax_cross_entropy(logits: Tensor, labels, ignore_id: int | None = None) -> Tensor:
    """Mean cross-entropy of [N, C] logits against integer labels [N].

    Rows whose label equals ``ignore_id`` contribute nothing. If every
    row is ignored the loss is exactly zero.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N, C] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match logits rows {logits.shape[0]}")
    valid = np.ones_like(labels, dtype=bool) if ignore_id is None else labels != ignore_id
    nv = int(valid.sum())
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    if nv == 0:
        data = np.asarray(0.0, dtype=logits.data.dtype)
    else:
        picked = logp[np.arange(labels.shape[0]), np.clip(labels, 0, logits.shape[1] - 1)]
        data = np.asarray(-(picked * valid).sum() / nv, dtype=logits.data.dtype)

    def back(g):
        if nv == 0:
            return
        p = np.exp(logp)
        p[np.arange(labels.shape[0]), np.clip(labels, 0, logits.shape[1] - 1)] -= 1.0
        p[~valid] = 0.0
        _accumulate(logits, (g * p / nv).astype(logits.data.dtype))

    return _node(data, (logits,), back, "softmax_cross_entropy")
