"""Dense array autodiff.

A small reverse-mode engine over numpy arrays. Every op returns a new
:class:`Tensor`; when any input requires a gradient the op records a
closure that maps the output gradient to input gradients. ``backward``
walks the recorded graph once in reverse topological order.

Only the primitives the rest of the package needs are provided, but each
one has an analytic backward that is checked against central differences
in the test-suite.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


class NonFiniteError(FloatingPointError):
    """A forward result contained NaN or Inf."""


_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype used by :func:`tensor` for float data (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Wrap array-like data. Float data is cast to the default dtype."""
    if isinstance(data, Tensor):
        return data
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype.kind in "fiub" and arr.dtype != _DEFAULT_DTYPE:
        arr = arr.astype(_DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op} (shape {data.shape})")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> None:
    try:
        np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = _lift(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def where(cond, a, b) -> Tensor:
    """Elementwise select; ``cond`` is a constant boolean array."""
    a, b = _lift(a), _lift(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def bw(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _make(out, (a, b), bw, "where")


def silu(x: Tensor) -> Tensor:
    x = _lift(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s

    def bw(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return _make(out, (x,), bw, "silu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation."""
    x = _lift(x)
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _make(out, (x,), bw, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    x = _lift(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = _lift(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def log(x: Tensor) -> Tensor:
    x = _lift(x)
    if np.any(x.data <= 0):
        raise NonFiniteError("log: non-positive input")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _lift(x)
    out = log_softmax_np(np.moveaxis(x.data, axis, -1))
    out = np.moveaxis(out, -1, axis)
    p = np.exp(out)

    def bw(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def straight_through(x: Tensor, fn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Forward ``fn(x)``; backward passes the gradient through unchanged."""
    x = _lift(x)
    out = np.asarray(fn(x.data), dtype=x.data.dtype)
    if out.shape != x.shape:
        raise ShapeError(f"straight_through: fn changed shape {x.shape} -> {out.shape}")
    return _make(out, (x,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    x = _lift(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _lift(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    x = _lift(x)
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last")


def getitem(x: Tensor, index) -> Tensor:
    x = _lift(x)
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (x,), bw, "getitem")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no inputs")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[q.shape for q in parts]} differ off axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([p.data for p in parts], axis=ax), parts, bw, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    x = _lift(x)
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to {x.shape[ax]}")
    out, start = [], 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + n)
        out.append(getitem(x, tuple(idx)))
        start += n
    return out


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- nn primitives


def tril_mask(n: int, m: int | None = None) -> np.ndarray:
    """Boolean lower-triangular mask: entry (q, k) is True iff k <= q."""
    m = n if m is None else m
    return np.tril(np.ones((n, m), dtype=bool))


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax. Entries that are -inf or masked out get probability exactly 0."""
    x = _lift(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    if not np.all(np.isfinite(zmax)):
        raise NonFiniteError("softmax: a row has no unmasked entry")
    e = np.exp(z - zmax)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale rows of ``x`` to unit root-mean-square, then multiply by ``gain``."""
    x, gain = _lift(x), _lift(gain)
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: gain {gain.shape} vs input {x.shape}")
    d = x.shape[-1]
    r = np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data / r

    def bw(g):
        gx = gg = None
        if x.requires_grad:
            gh = g * gain.data
            gx = gh / r - xhat * np.sum(gh * xhat, axis=-1, keepdims=True) / (d * r)
        if gain.requires_grad:
            gg = np.sum((g * xhat).reshape(-1, d), axis=0)
        return gx, gg

    return _make(xhat * gain.data, (x, gain), bw, "rms_norm")


def embedding(table: Tensor, ids) -> Tensor:
    table = _lift(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), bw, "embedding")


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum over positions of ``-log softmax(logits)[target]``.

    ``targets`` has the shape of ``logits`` without its last axis; positions
    with weight 0 contribute exactly nothing to value or gradient. Divide by
    a count outside to get a mean.
    """
    logits = _lift(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    c = logits.shape[-1]
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=logits.data.dtype)
    active = w != 0
    safe_t = np.where(active, targets, 0)
    if np.any((safe_t < 0) | (safe_t >= c)):
        raise IndexError(f"cross_entropy: target out of range [0, {c})")
    logp = log_softmax_np(logits.data)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    out = -np.sum(np.where(active, w * picked, 0.0))

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return (g * np.where(active, w, 0.0)[..., None] * (p - onehot),)

    return _make(np.asarray(out, dtype=logits.data.dtype), (logits,), bw, "cross_entropy")


def rotary_tables(n_pos: int, dim: int, base: float = 10000.0, dtype=np.float64):
    """cos/sin tables of shape (n_pos, dim) for half-split rotary embeddings."""
    if dim % 2:
        raise ShapeError(f"rotary: head width {dim} must be even")
    inv = base ** (-np.arange(0, dim, 2) / dim)
    ang = np.outer(np.arange(n_pos), inv)
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rotate_half(a: np.ndarray) -> np.ndarray:
    h = a.shape[-1] // 2
    return np.concatenate([-a[..., h:], a[..., :h]], axis=-1)


def _rotate_half_t(a: np.ndarray) -> np.ndarray:
    h = a.shape[-1] // 2
    return np.concatenate([a[..., h:], -a[..., :h]], axis=-1)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate pairs (i, i + d/2) of the last axis by position-dependent angles.

    ``cos``/``sin`` broadcast against ``x`` (typically shape (L, d)).
    """
    x = _lift(x)
    out = x.data * cos + _rotate_half(x.data) * sin

    def bw(g):
        return (g * cos + _rotate_half_t(g * sin),)

    return _make(out, (x,), bw, "rotary")


def mse(a: Tensor, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))


# ---------------------------------------------------------------- graph


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def leaves(arrays: dict[str, np.ndarray], trainable: Iterable[str] = ()) -> dict[str, Tensor]:
    """Wrap a name -> array mapping; names in ``trainable`` require grad."""
    trainable = set(trainable)
    return {k: Tensor(v, requires_grad=k in trainable) for k, v in arrays.items()}


# ---------------------------------------------------------------- oracle


def numeric_grad(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f(*tensors)`` for each array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + eps
            fp = _scalar(f, arrays)
            a[idx] = old - eps
            fm = _scalar(f, arrays)
            a[idx] = old
            g[idx] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def _scalar(f, arrays) -> float:
    val = f(*[Tensor(a) for a in arrays])
    v = float(np.asarray(val.data if isinstance(val, Tensor) else val))
    if not np.isfinite(v):
        raise NonFiniteError("finite_diff_check: f returned a non-finite value")
    return v


def analytic_grad(f: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = f(*ts)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("finite_diff_check: f returned a non-finite value")
    backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in ts]


def finite_diff_check(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-6) -> float:
    """Max over all scalars of |analytic - central difference| / max(1, |analytic|)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    ana = analytic_grad(f, arrays)
    num = numeric_grad(f, arrays, eps)
    err = 0.0
    for a, n in zip(ana, num):
        if a.size:
            err = max(err, float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a)))))
    return err
