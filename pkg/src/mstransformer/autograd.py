"""Dense tensors with reverse-mode differentiation.

Every operation records its inputs and a closure that maps the output
adjoint to input adjoints. ``Tensor.backward`` walks the recorded graph in
reverse topological order. Ops accept arbitrary leading batch axes; the
"row" axis is always ``-2`` and the feature axis ``-1``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            _raise_not_scalar(self)
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- graph -------------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``grad`` defaults to ones for a single-element tensor. Leaf gradients
        are summed into any existing ``grad`` so repeated passes accumulate.
        """
        if grad is None:
            if self.data.size != 1:
                _raise_not_scalar(self)
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        adj: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg

    # -- operator sugar ----------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"expected a single-element tensor, got shape {t.shape}")


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    parents = tuple(parents)
    if any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        s = b
        return _result(a.data * s, (a,), lambda g: (g * s,))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape))
    )


def relu(x: Tensor) -> Tensor:
    """Rectifier; the subgradient at 0 is taken to be 0."""
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,))


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


# -- reductions ----------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return _result(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def max_over_positions(x: Tensor) -> Tensor:
    """Max-pool over the row axis (-2); ties route gradient to the lowest index."""
    x = as_tensor(x)
    if x.shape[-2] < 1:
        raise ShapeError("max_over_positions: need at least one row")
    idx = np.argmax(x.data, axis=-2)  # argmax returns the first maximum
    out = np.take_along_axis(x.data, idx[..., None, :], axis=-2)[..., 0, :]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return _result(out, (x,), backward)


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # one GEMM over all leading rows of a
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))

        def backward2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _result(out, (a, b), backward2)

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), backward)


def transpose_last(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# -- structural ----------------------------------------------------------------

def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    nd = parts[0].ndim
    ax = axis % nd
    ref = parts[0].shape[:ax] + parts[0].shape[ax + 1 :]
    for p in parts[1:]:
        if p.ndim != nd or p.shape[:ax] + p.shape[ax + 1 :] != ref:
            raise ShapeError(
                f"concat along axis {axis}: shapes differ: " + ", ".join(str(q.shape) for q in parts)
            )
    sizes = np.cumsum([p.shape[ax] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return _result(out, parts, lambda g: tuple(np.split(g, sizes, axis=ax)))


def concat_last(*parts: Tensor) -> Tensor:
    return concat(parts, axis=-1)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ: {sorted(shapes)}")
    out = np.stack([p.data for p in parts], axis=axis)
    return _result(
        out, parts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(parts)))
    )


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    """Rows ``lo:hi`` along axis -2."""
    x = as_tensor(x)
    n = x.shape[-2]
    if not 0 <= lo <= hi <= n:
        raise IndexError(f"slice_rows: [{lo}, {hi}) out of range for {n} rows")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., lo:hi, :] = g
        return (gx,)

    return _result(x.data[..., lo:hi, :], (x,), backward)


def take(x: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    """Contiguous slice ``lo:hi`` along any axis."""
    x = as_tensor(x)
    ax = axis % x.ndim
    if not 0 <= lo <= hi <= x.shape[ax]:
        raise IndexError(f"take: [{lo}, {hi}) out of range for extent {x.shape[ax]}")
    sl = (slice(None),) * ax + (slice(lo, hi),)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[sl] = g
        return (gx,)

    return _result(x.data[sl], (x,), backward)


def select_row(x: Tensor, i: int) -> Tensor:
    """Row ``i`` along axis -2, dropping that axis."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., i, :] = g
        return (gx,)

    return _result(x.data[..., i, :], (x,), backward)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[index]`` for a 2-D table."""
    table = as_tensor(table)
    index = np.asarray(index)
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, index.reshape(-1), g.reshape(-1, shape[-1]))
        return (gt,)

    return _result(table.data[index], (table,), backward)


def window_gather(x: Tensor, width: int) -> tuple[Tensor, np.ndarray]:
    """Collect, for every row j, rows ``j-r .. j+r`` with ``r = (width-1)//2``.

    Returns a ``(..., N, width, D)`` tensor and an ``(N, width)`` boolean mask
    marking slots that fall inside the sequence. Slots outside hold zeros and
    must be excluded by the caller (see ``softmax_rows(mask=...)``).
    """
    x = as_tensor(x)
    if width < 1 or width % 2 == 0:
        raise ValueError(f"window width must be odd and >= 1, got {width}")
    n, r = x.shape[-2], (width - 1) // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (0, 0)]
    xp = np.pad(x.data, pad)
    # sliding_window_view puts the window axis last: (..., N, D, w)
    win = np.lib.stride_tricks.sliding_window_view(xp, width, axis=-2)
    out = np.ascontiguousarray(np.swapaxes(win, -1, -2))
    pos = np.arange(n)[:, None] + np.arange(-r, r + 1)[None, :]
    mask = (pos >= 0) & (pos < n)
    shape = x.shape

    def backward(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for c in range(width):
            gp[..., c : c + n, :] += g[..., :, c, :]
        return (gp[..., r : r + n, :].reshape(shape),)

    return _result(out, (x,), backward), mask


# -- normalisation / probabilities ---------------------------------------------

def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis, max-subtracted, evaluated in float64.

    Entries where ``mask`` is False receive weight exactly 0. NaN inputs
    propagate to NaN outputs.
    """
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax_rows: last extent must be >= 1")
    z = np.array(x.data, dtype=np.float64)  # private float64 copy, modified in place
    if mask is not None:
        np.copyto(z, -np.inf, where=~np.broadcast_to(mask, z.shape))
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    s = z
    s_out = s.astype(x.dtype, copy=False)

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        gx = g64 - (g64 * s).sum(axis=-1, keepdims=True)
        gx *= s
        return (gx.astype(x.dtype, copy=False),)

    return _result(s_out, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit (population) variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p); identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# -- losses --------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared elementwise errors."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _result(np.asarray((diff * diff).mean()), (pred,), lambda g: (g * 2.0 * diff / n,))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the leading axes."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    n = max(labels.size, 1)

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, labels[..., None], np.take_along_axis(p, labels[..., None], -1) - 1.0, -1)
        return (g * p / n,)

    return _result(np.asarray(-picked.mean()), (logits,), backward)


def parameter(data, name: str = "", dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def scaled(x: Tensor, factor: float) -> Tensor:
    return mul(x, float(factor))


__all__ = [
    "Tensor",
    "ShapeError",
    "absolute",
    "add",
    "as_tensor",
    "concat",
    "concat_last",
    "cross_entropy",
    "dropout",
    "gather_rows",
    "layer_norm",
    "log_softmax_rows",
    "matmul",
    "max_over_positions",
    "mean_all",
    "mse_loss",
    "mul",
    "parameter",
    "relu",
    "reshape",
    "scaled",
    "select_row",
    "slice_rows",
    "softmax_rows",
    "square",
    "stack",
    "sub",
    "sum_all",
    "swapaxes",
    "take",
    "tanh",
    "transpose_last",
    "unbroadcast",
    "window_gather",
]

