"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When at least one input
requires a gradient, the output records its parents together with a closure
that maps the output gradient to one gradient per parent. :func:`backward`
walks that record in reverse topological order.

The op set is deliberately small: what a pre-norm decoder block, the LoRA and
DoRA reparameterizations and the echo path need, plus the two losses.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import DataError, DimensionError, NumericError, UsageError

IGNORE_INDEX = -100
KL_EPS = 1e-12

_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array that can take part in a gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ----------------------------------------------------
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
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


class MaskedLoss(NamedTuple):
    """A mean loss over supervised rows together with how many rows there were."""

    value: Tensor
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


# -- graph construction ----------------------------------------------------

@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording any graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn,
              name: str = "custom") -> Tensor:
    """Wrap ``data`` as the output of an op with the given local backward rule.

    ``backward_fn`` receives the gradient w.r.t. the output and returns one
    array (or ``None``) per parent, in order.
    """
    out = Tensor(data)
    out.op = name
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, what: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} do not match") from None


# -- elementwise family ----------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh identity: no overflow for large |x| and faster than exp-based forms
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                     "mul")


def scale(x, factor: float) -> Tensor:
    """Multiply by a python scalar constant."""
    x = as_tensor(x)
    factor = float(factor)
    return custom_op(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return custom_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return custom_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    xd = x.data
    return custom_op(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),), "silu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return custom_op(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return custom_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return custom_op(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    return custom_op(ad / bd, (a, b),
                     lambda g: (_unbroadcast(g / bd, ad.shape),
                                _unbroadcast(-g * ad / (bd * bd), bd.shape)),
                     "div")


def clamp_min(x, floor: float) -> Tensor:
    """max(x, floor); the gradient is zero wherever the floor is active."""
    x = as_tensor(x)
    keep = x.data >= floor
    return custom_op(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,), "clamp_min")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "tanh": tanh,
                "sigmoid": sigmoid, "silu": silu, "exp": exp, "log": log, "sqrt": sqrt,
                "scale": scale}


def elementwise(op_kind: str, *args) -> Tensor:
    """Dispatch by name: ``elementwise("sigmoid", x)``, ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*args)


# -- shape ops -------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def take(x, index) -> Tensor:
    """Numpy-style indexing; the backward pass scatters into zeros."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return custom_op(x.data[index], (x,), backward, "take")


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix or has
    exactly the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bd.ndim == 2 and ad.ndim > 2:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return custom_op(ad @ bd, (a, b), backward, "matmul")


def linear(u, W) -> Tensor:
    """``u @ W.T`` for ``W`` of shape (d_out, d_in); one graph node, no transpose."""
    u, W = as_tensor(u), as_tensor(W)
    if W.ndim != 2 or u.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: input {u.shape} does not fit weight {W.shape}")
    ud, Wd = u.data, W.data
    lead = ud.shape[:-1]
    u2 = ud.reshape(-1, ud.shape[-1])  # 2-D products are much faster than batched ones

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gu = (g2 @ Wd).reshape(ud.shape) if u.requires_grad else None
        gW = g2.T @ u2 if W.requires_grad else None
        return gu, gW

    return custom_op((u2 @ Wd.T).reshape(*lead, Wd.shape[0]), (u, W), backward, "linear")


def causal_attention(q, k, v, n_heads: int) -> Tensor:
    """Multi-head causal softmax attention over (B, T, d) inputs.

    Heads are contiguous slices of width d / n_heads; scores are scaled by
    1/sqrt(head width). Position t attends to positions <= t.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"attention: q{q.shape} k{k.shape} v{v.shape} disagree")
    B, T, d = q.shape
    if d % n_heads:
        raise DimensionError(f"width {d} is not divisible by {n_heads} heads")
    hd = d // n_heads

    def split(x):
        return x.reshape(B, T, n_heads, hd).transpose(0, 2, 1, 3)

    def merge(x):
        return x.transpose(0, 2, 1, 3).reshape(B, T, d)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    c = 1.0 / math.sqrt(hd)
    s = (qh @ kh.transpose(0, 1, 3, 2)) * c
    causal = np.tril(np.ones((T, T), dtype=bool))
    s = np.where(causal, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    out = merge(p @ vh)

    def backward(g):
        gh = split(g)
        gv = p.transpose(0, 1, 3, 2) @ gh
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = (gp - np.sum(gp * p, axis=-1, keepdims=True)) * p * c
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh
        return merge(gq), merge(gk), merge(gv)

    return custom_op(out, (q, k, v), backward, "causal_attention")


def gated_mlp(h, w_gate, w_up, w_down) -> Tensor:
    """``(silu(h Wg^T) * (h Wu^T)) Wd^T`` as one node."""
    h, wg, wu, wd = (as_tensor(t) for t in (h, w_gate, w_up, w_down))
    if wg.shape != wu.shape or wd.shape != wg.shape[::-1] or h.shape[-1] != wg.shape[1]:
        raise DimensionError(f"gated_mlp: h{h.shape} gate{wg.shape} up{wu.shape} down{wd.shape}")
    shape = h.shape
    hd = h.data.reshape(-1, shape[-1])
    a = hd @ wg.data.T
    sg = _sigmoid(a)
    act = a * sg
    up = hd @ wu.data.T
    mid = act * up
    out = (mid @ wd.data.T).reshape(*shape[:-1], wd.shape[0])

    def backward(g):
        g = g.reshape(-1, g.shape[-1])
        gmid = g @ wd.data
        gact = gmid * up
        gup = gmid * act
        ga = gact * (sg + a * sg * (1.0 - sg))
        gh = (ga @ wg.data + gup @ wu.data).reshape(shape) if h.requires_grad else None
        gwg = ga.T @ hd if wg.requires_grad else None
        gwu = gup.T @ hd if wu.requires_grad else None
        gwd = g.T @ mid if wd.requires_grad else None
        return gh, gwg, gwu, gwd

    return custom_op(out, (h, wg, wu, wd), backward, "gated_mlp")


# -- normalisation, softmax, embeddings --------------------------------------

def rms_norm(x, weight=None, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x**2) + eps) over the last axis, optionally times ``weight``."""
    x = as_tensor(x)
    xd = x.data
    r = np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    y = xd / r
    if weight is None:
        def backward(g):
            return ((g - y * np.mean(g * y, axis=-1, keepdims=True)) / r,)
        return custom_op(y, (x,), backward, "rms_norm")

    w = as_tensor(weight)
    wd = w.data

    def backward_w(g):
        gy = g * wd
        gx = (gy - y * np.mean(gy * y, axis=-1, keepdims=True)) / r
        return gx, _unbroadcast(g * y, wd.shape)

    return custom_op(y * wd, (x, w), backward_w, "rms_norm")


def softmax_rows(x, temperature: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis of ``x / temperature``.

    ``mask`` (broadcastable boolean, True = keep) removes entries before
    normalisation; removed entries come out as exactly zero.
    """
    if not temperature > 0:
        raise UsageError(f"temperature must be positive, got {temperature}")
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows: non-finite input")
    s = x.data / temperature
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    y = e / e.sum(axis=-1, keepdims=True)
    inv_t = 1.0 / temperature

    def backward(g):
        return ((g - np.sum(g * y, axis=-1, keepdims=True)) * y * inv_t,)

    return custom_op(y, (x,), backward, "softmax")


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax_rows: non-finite input")
    s = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    out = s - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return custom_op(out, (x,), backward, "log_softmax")


def embedding(weight, ids) -> Tensor:
    """Row gather ``weight[ids]`` for an integer array of ids."""
    w = as_tensor(weight)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= w.shape[0]):
        raise DataError(f"token id out of range [0, {w.shape[0]})")
    return take(w, ids)


# -- losses ----------------------------------------------------------------

def masked_cross_entropy(logits, labels) -> MaskedLoss:
    """Mean negative log-likelihood over rows whose label is not ``IGNORE_INDEX``.

    ``logits`` has shape (..., V) and ``labels`` the matching leading shape.
    With no supervised row the loss is a constant 0 and ``count`` is 0.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    vocab = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    flat_labels = labels.reshape(-1)
    keep = flat_labels != IGNORE_INDEX
    chosen = flat_labels[keep]
    if chosen.size and (chosen.min() < 0 or chosen.max() >= vocab):
        raise DataError(f"label out of range [0, {vocab})")
    n = int(keep.sum())
    if n == 0:
        return MaskedLoss(Tensor(0.0), 0)
    rows = np.flatnonzero(keep)
    flat = reshape(logits, (-1, vocab))
    logp = log_softmax_rows(take(flat, rows))
    picked = take(logp, (np.arange(n), chosen))
    return MaskedLoss(scale(sum_(picked), -1.0 / n), n)


def kl_rows(p, q, eps: float = KL_EPS) -> Tensor:
    """KL(p || q) for each row, with both sides clamped at ``eps`` before the log."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_rows: shapes {p.shape} and {q.shape} do not match")
    diff = sub(log(clamp_min(p, eps)), log(clamp_min(q, eps)))
    return sum_(mul(p, diff), axis=-1)


# -- graph control -----------------------------------------------------------

def detach(x) -> Tensor:
    """Same values, no history: nothing upstream receives gradient through it."""
    x = as_tensor(x)
    out = Tensor(x.data)
    out.op = "detach"
    return out


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into the ``grad`` of every reachable leaf."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("backward: loss is not finite")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
