"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations a small transformer needs are provided. Every op that
touches a tensor with ``requires_grad`` appends a node to the active
:class:`Tape`; :func:`backward` walks that list in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

MASK_NEG = -1e9


class DimensionError(ValueError):
    pass


class DegenerateMaskError(ValueError):
    """Raised when an attention query has every key masked out."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


class Tape:
    """Ordered record of differentiable ops; creation order is topological."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[Tape] = []


@contextlib.contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    tape = tape if tape is not None else Tape()
    _TAPES.append(tape)
    try:
        yield tape
    finally:
        _TAPES.pop()


def _record(out_data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor(out_data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = fn
        _TAPES[-1].nodes.append(out)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Intermediate gradients are rebuilt on each call, leaf gradients add up
    across calls until :meth:`Tensor.zero_grad`.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _record(out, (a, b), fn)


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _record(a.data * pos, (a,), lambda g: (g * pos,))


def gelu(a: Tensor) -> Tensor:
    """tanh approximation."""
    x = a.data
    c = float(np.sqrt(2.0 / np.pi))
    x2 = x * x
    t = np.tanh(c * (x + 0.044715 * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, (a,), fn)


def clamp_max(a: Tensor, hi: float) -> Tensor:
    """min(a, hi); gradient is zero where the clamp is active."""
    keep = a.data < hi
    return _record(np.where(keep, a.data, np.asarray(hi, dtype=a.dtype)), (a,), lambda g: (g * keep,))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _record(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), fn)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul; ``b`` may be a 2-D weight shared across the batch."""
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _record(ad @ bd, (a, b), fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    vocab = table.shape[0]

    def fn(g):
        gt = np.zeros((vocab, g.shape[-1]), dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _record(table.data[ids], (table,), fn)


def gather_last(a: Tensor, index: np.ndarray) -> Tensor:
    """out[..., j] = a[..., index[..., j]] with leading dims aligned."""
    index = np.asarray(index)
    out = np.take_along_axis(a.data, index, axis=-1)
    shape = a.shape

    def fn(g):
        ga = np.zeros(shape, dtype=g.dtype)
        lead = np.indices(index.shape)[:-1]
        np.add.at(ga, (*lead, index), g)
        return (ga,)

    return _record(out, (a,), fn)


def select_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Pick rows of a 2-D view ``a.reshape(-1, last)``."""
    rows = np.asarray(rows)
    flat_shape = (-1, a.shape[-1])
    shape = a.shape

    def fn(g):
        ga = np.zeros((int(np.prod(shape[:-1])), shape[-1]), dtype=g.dtype)
        np.add.at(ga, rows, g)
        return (ga.reshape(shape),)

    return _record(a.data.reshape(flat_shape)[rows], (a,), fn)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), fn)


def log_softmax(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("log_softmax over an empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = xd.shape[-1]

    def fn(g):
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        gx_hat = g * gamma.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record(out, (x, gamma, beta), fn)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def attention_bias(key_mask: np.ndarray | None, dtype) -> np.ndarray | None:
    """Translate a boolean keep-mask (True = attendable) into an additive bias."""
    if key_mask is None:
        return None
    key_mask = np.asarray(key_mask, dtype=bool)
    if not key_mask.any(axis=-1).all():
        raise DegenerateMaskError("every key is masked for at least one query")
    return np.where(key_mask, 0.0, MASK_NEG).astype(dtype)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, key_mask=None,
                         return_weights: bool = False):
    """softmax(q kᵀ / sqrt(d_k)) v.

    ``q`` is (..., Lq, d), ``k`` and ``v`` are (..., Lk, d).  ``key_mask`` is
    a boolean keep-mask broadcastable to (..., Lq, Lk); a 1-D mask of length
    Lk applies to every query.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key head dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value counts differ: {k.shape} vs {v.shape}")
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        if km.shape[-1] != k.shape[-2]:
            raise DimensionError(f"key_mask length {km.shape[-1]} != key count {k.shape[-2]}")
        key_mask = km[..., None, :] if km.ndim == 1 else km
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = matmul(q, transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)))
    scores = scores * scale
    bias = attention_bias(key_mask, q.dtype)
    if bias is not None:
        scores = scores + Tensor(bias)
    weights = softmax_rows(scores)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# checking
# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
                      coords: Sequence[int] | None = None) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and
    central differences, over ``coords`` (flat indices; default all)."""
    x = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    with recording() as tape:
        y = f(x)
    backward(y, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(Tensor(x.data.copy())).data)
        flat[i] = orig - step
        lo = float(f(Tensor(x.data.copy())).data)
        flat[i] = orig
        num = (hi - lo) / (2 * step)
        a = analytic.reshape(-1)[i]
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


def param_finite_diff(loss_fn: Callable[[], Tensor], params: dict, step: float = 1e-5,
                      per_param: int | None = None, seed: int = 0) -> list[tuple[str, int, float, float]]:
    """(name, flat index, analytic, numeric) for parameter coordinates.

    ``loss_fn`` recomputes the loss from the current parameter values; with
    ``per_param`` set, that many coordinates are sampled from each tensor.
    """
    for t in params.values():
        t.grad = None
    with recording() as tape:
        loss = loss_fn()
    backward(loss, tape)
    rng = np.random.default_rng(seed)
    out = []
    for name, t in params.items():
        flat = t.data.reshape(-1)
        grad = np.zeros(flat.size) if t.grad is None else t.grad.reshape(-1)
        idx = range(flat.size) if per_param is None or per_param >= flat.size else \
            rng.choice(flat.size, size=per_param, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            hi = float(loss_fn().data)
            flat[i] = orig - step
            lo = float(loss_fn().data)
            flat[i] = orig
            out.append((name, int(i), float(grad[i]), (hi - lo) / (2 * step)))
    return out


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
