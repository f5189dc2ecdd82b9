"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a C-contiguous ``numpy.ndarray``. Every differentiable
operation records its parents and a closure mapping the output gradient to
parent gradients; :meth:`Tensor.backward` walks that graph once in reverse
topological order and accumulates into the ``grad`` buffers of leaves.

Row kernels (softmax, layer norm, gelu) dispatch to the compiled extension when
it is available, see :mod:`ddvqa._ext`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ._ext import kernels as _k

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basics -------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff -----------------------------------------------------------
    def backward(self, retain_graph: bool = False) -> None:
        """Populate ``grad`` on every leaf that requires it.

        Gradients accumulate across calls until :meth:`zero_grad`.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not retain_graph:
            for node in order:
                if node._backward is not None:
                    node._parents = ()
                    node._backward = None
                    node.requires_grad = False

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _scalar(g) -> float:
    return float(np.asarray(g).reshape(-1)[0])


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


# -- elementwise ----------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x2 = _rows(a.data) if a.ndim else a.data.reshape(1, 1)
    out = _k.gelu_forward(x2).reshape(a.shape)

    def backward(g):
        return (_k.gelu_backward(x2, _rows(g) if g.ndim else g.reshape(1, 1)).reshape(a.shape),)

    return _result(out, (a,), backward)


# -- linear algebra ---------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (..., in) and ``w`` of shape (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, wd.shape[1])

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, backward)


# -- shape ------------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(np.transpose(a.data, axes)), (a,),
                   lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; the result is a materialized copy."""
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx], copy=True), (a,), backward)


def take_rows(a: Tensor, index) -> Tensor:
    """Gather along axis 0; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.int64)
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    n = len(tensors)

    def backward(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=axis)) for i in range(n))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# -- reductions -------------------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# -- normalization / attention pieces ---------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``."""
    axis = axis % x.ndim
    if axis != x.ndim - 1:
        return swapaxes(softmax(swapaxes(x, axis, -1), -1), axis, -1)
    x2 = _rows(x.data)
    y2 = _k.softmax_forward(x2)

    def backward(g):
        return (_k.softmax_backward(y2, _rows(g)).reshape(x.shape),)

    return _result(y2.reshape(x.shape), (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax along the last axis."""
    x2 = _rows(x.data)
    y2 = _k.log_softmax_forward(x2)

    def backward(g):
        return (_k.log_softmax_backward(y2, _rows(g)).reshape(x.shape),)

    return _result(y2.reshape(x.shape), (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm affine shapes {gain.shape}/{bias.shape} "
                         f"do not match last dimension of {x.shape}")
    x2 = _rows(x.data)
    y2, xhat, rstd = _k.layer_norm_forward(x2, gain.data, bias.data, float(eps))

    def backward(g):
        gx, gg, gb = _k.layer_norm_backward(_rows(g), xhat, rstd, gain.data)
        return gx.reshape(x.shape), gg, gb

    return _result(np.asarray(y2).reshape(x.shape), (x, gain, bias), backward)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ValueError("cannot normalize a zero-norm vector")
    out = xd / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _result(out, (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Look up rows of ``table`` (V, d) for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table of size {table.shape[0]}")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), backward)


# -- losses -----------------------------------------------------------------------
def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ignored."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape[0], logits.shape[-1]
    if logits.ndim != 2 or targets.shape[0] != n:
        raise ValueError(f"cross_entropy expects logits [n, V] and n targets, "
                         f"got {logits.shape} and {targets.shape}")
    keep = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    if not keep.any():
        raise ValueError("cross_entropy: every position is ignored; mean undefined")
    tk = targets[keep]
    if tk.min() < 0 or tk.max() >= v:
        raise IndexError(f"target out of range [0, {v})")
    lp = _k.log_softmax_forward(np.ascontiguousarray(logits.data))
    rows = np.nonzero(keep)[0]
    count = rows.size
    loss = -lp[rows, tk].sum() / count

    def backward(g):
        grad = np.zeros_like(lp)
        grad[rows] = np.exp(lp[rows])
        grad[rows, tk] -= 1.0
        return (grad * (_scalar(g) / count),)

    return _result(np.asarray(loss), (logits,), backward)


def sequence_nll(logits: Tensor, targets, ignore_index: int, row_weights) -> Tensor:
    """Weighted sum over sequences of their mean token negative log-likelihood.

    ``logits`` is (B, L, V), ``targets`` (B, L); each row's non-ignored tokens
    are averaged, then rows are combined with ``row_weights`` (B,).
    """
    targets = np.asarray(targets, dtype=np.int64)
    w = np.asarray(row_weights, dtype=np.float64)
    b, l, v = logits.shape
    keep = targets != ignore_index
    counts = keep.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("sequence_nll: a row has no scored tokens")
    lp = _k.log_softmax_forward(_rows(logits.data)).reshape(b, l, v)
    bi, li = np.nonzero(keep)
    ti = targets[bi, li]
    scale = w / counts
    loss = -(lp[bi, li, ti] * scale[bi]).sum()

    def backward(g):
        grad = np.zeros_like(lp)
        coeff = (_scalar(g) * scale[bi])[:, None]
        grad[bi, li] = np.exp(lp[bi, li]) * coeff
        grad[bi, li, ti] -= coeff[:, 0]
        return (grad,)

    return _result(np.asarray(loss), (logits,), backward)


def binary_cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    y = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        p = 1.0 / (1.0 + np.exp(-z))
        return ((p - y) * (_scalar(g) / n),)

    return _result(np.asarray(loss.mean()), (logits,), backward)


# -- module plumbing --------------------------------------------------------------
class Module:
    """Container that discovers parameters through attribute traversal."""

    def named_parameters(self, prefix: str = "") -> Iterable[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = np.ascontiguousarray(arr)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return param(rng.normal(0.0, std, size=shape))


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


__all__ = [
    "Tensor", "Module", "no_grad", "tensor", "param", "normal_init",
    "add", "neg", "mul", "div", "exp", "log", "sqrt", "tanh", "sigmoid", "relu", "gelu",
    "matmul", "linear", "reshape", "transpose", "swapaxes", "getitem", "take_rows",
    "concat", "stack", "tsum", "mean", "softmax", "log_softmax", "layer_norm",
    "l2_normalize", "embedding", "cross_entropy", "sequence_nll",
    "binary_cross_entropy_with_logits", "sinusoidal_positions",
]
