"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. ``backward`` walks that tape in
reverse. There is no implicit broadcasting: operands of elementwise ops must
have identical shapes and repetition is always spelled out (``repeat``,
``add_bias``).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

DEFAULT_DTYPE = np.float64

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the list is already in
    topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def record(out_data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` and put it on the active tape if any parent needs grad.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(parents), backward))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {id(loss): loss}
    nodes = tape.nodes if tape is not None else []
    for node in reversed(nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        leaves.pop(id(node.out), None)
        _accumulate(node.out, g)
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                leaves[key] = parent
    for key, g in grads.items():
        t = leaves[key]
        if t.requires_grad:
            _accumulate(t, g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data, dtype=x.dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# elementwise -----------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return record(s, (a,), lambda g: (g * s * (1 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every row along the last axis of ``x``."""
    if b.data.ndim != 1 or x.shape[-1:] != b.shape:
        raise DimensionError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


# shape ------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from e
    return record(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise DimensionError("concat: no tensors")
    nd = xs[0].data.ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.data.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise DimensionError(f"concat: {t.shape} incompatible with {xs[0].shape} on axis {axis}")
    sizes = [t.shape[ax] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return record(np.concatenate([t.data for t in xs], axis=ax), tuple(xs),
                  lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in xs], axis=axis)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    ax = axis % x.data.ndim
    if idx.size and (idx.min() < -x.shape[ax] or idx.max() >= x.shape[ax]):
        raise DimensionError(f"take: index out of range for axis {axis} of {x.shape}")
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (slice(None),) * ax + (idx,), g)
        return (out,)

    return record(np.take(x.data, idx, axis=ax), (x,), bw)


def repeat(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` holding ``n`` copies of ``x``."""
    if n < 1:
        raise DimensionError("repeat: n must be positive")
    ax = axis % (x.data.ndim + 1)
    out = np.repeat(np.expand_dims(x.data, ax), n, axis=ax)
    return record(out, (x,), lambda g: (g.sum(axis=ax),))


def sum(x: Tensor, axes=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    axes_t = tuple(range(x.data.ndim)) if axes is None else _norm_axes(axes, x.data.ndim)
    out = x.data.sum(axis=axes_t)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes_t), shape).copy(),)

    return record(np.asarray(out, dtype=x.dtype), (x,), bw)


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} invalid for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


# linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` applied over the last axis; leading axes are flattened."""
    lead = x.shape[:-1]
    flat = x if x.data.ndim == 2 else reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, w)
    if b is not None:
        out = add_bias(out, b)
    return out if x.data.ndim == 2 else reshape(out, lead + (w.shape[1],))


# normalization and reductions ----------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(s, (x,), bw)


def pool(x: Tensor, kind: str, axes) -> Tensor:
    """Reduce over ``axes`` by max or mean.

    Max routes its gradient to the first maximal element in flat order.
    """
    ax = _norm_axes(axes, x.data.ndim)
    if any(x.shape[a] == 0 for a in ax) or not ax:
        raise DimensionError(f"pool: empty reduction over {axes} of {x.shape}")
    if kind == "mean":
        count = int(np.prod([x.shape[a] for a in ax]))
        shape = x.shape
        out = x.data.mean(axis=ax)
        return record(np.asarray(out, dtype=x.dtype), (x,),
                      lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape) / count,))
    if kind != "max":
        raise ValueError(f"unknown pool kind {kind!r}")
    keep = [a for a in range(x.data.ndim) if a not in ax]
    perm = keep + list(ax)
    moved = x.data.transpose(perm)
    kept_shape = moved.shape[: len(keep)]
    flat = moved.reshape(kept_shape + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    inv = np.argsort(perm)

    def bw(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        return (gflat.reshape(moved.shape).transpose(inv),)

    return record(out, (x,), bw)


def mean(x: Tensor, axes=None) -> Tensor:
    return pool(x, "mean", tuple(range(x.data.ndim)) if axes is None else axes)


# convolution ------------------------------------------------------------------

def conv(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Zero-padded cross-correlation, channel-first.

    ``w`` has shape (C_out, C_in, *kernel). ``x`` is (C_in, *spatial) or
    (B, C_in, *spatial) with as many spatial axes as the kernel has.
    """
    k = w.shape[2:]
    nsp = len(k)
    unbatched = x.data.ndim == nsp + 1
    if x.data.ndim not in (nsp + 1, nsp + 2):
        raise DimensionError(f"conv: input {x.shape} does not fit kernel {w.shape}")
    xd = x.data[None] if unbatched else x.data
    if xd.shape[1] != w.shape[1]:
        raise DimensionError(f"conv: input channels {xd.shape[1]} != kernel channels {w.shape[1]}")
    st = _tuple(stride, nsp)
    pd = _tuple(padding, nsp)
    spatial = xd.shape[2:]
    out_sp = []
    for n_in, kk, s, p in zip(spatial, k, st, pd):
        if kk > n_in + 2 * p:
            raise DimensionError(f"conv: kernel {w.shape[2:]} larger than padded input {spatial} (pad {pd})")
        out_sp.append((n_in + 2 * p - kk) // s + 1)
    out_sp = tuple(out_sp)
    B, cin = xd.shape[:2]
    cout = w.shape[0]
    xp = np.pad(xd, [(0, 0), (0, 0)] + [(p, p) for p in pd]) if any(pd) else xd
    xl = np.moveaxis(xp, 1, -1)  # B, *S, C_in
    offsets = list(itertools.product(*[range(kk) for kk in k]))

    def window(o):
        return (slice(None),) + tuple(slice(oi, oi + s * (n - 1) + 1, s) for oi, s, n in zip(o, st, out_sp))

    sp_axes = tuple(range(1, nsp + 1))
    win = np.lib.stride_tricks.sliding_window_view(xl, k, axis=sp_axes)  # B, *n, C_in, *k
    win = win[(slice(None),) + tuple(slice(None, None, s) for s in st)]
    win = win.transpose((0,) + sp_axes + tuple(range(nsp + 2, 2 * nsp + 2)) + (nsp + 1,))
    cols = win.reshape(-1, len(offsets) * cin)  # rows B*out, columns (K, C_in)
    wmat = np.moveaxis(w.data.reshape(cout, cin, -1), 1, 2).reshape(cout, -1)  # C_out, K*C_in
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.moveaxis(out.reshape((B,) + out_sp + (cout,)), -1, 1)
    if unbatched:
        out = out[0]
    out = np.ascontiguousarray(out)
    parents = (x, w) if b is None else (x, w, b)
    wshape = w.shape

    def bw(g):
        gb = g[None] if unbatched else g
        gmat = np.moveaxis(gb, 1, -1).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(cout, len(offsets), cin)
        gw = np.moveaxis(gw, 1, 2).reshape(wshape)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape((B,) + out_sp + (len(offsets), cin))
            gxl = np.zeros(xl.shape, dtype=g.dtype)
            for i, o in enumerate(offsets):
                gxl[window(o)] += gcols[..., i, :]
            gxp = np.moveaxis(gxl, -1, 1)
            if any(pd):
                gxp = gxp[(slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(pd, spatial))]
            gx = gxp[0] if unbatched else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(gmat.sum(axis=0))
        return grads

    return record(out.astype(x.dtype, copy=False), parents, bw)


def _tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(v)
    if len(v) != n:
        raise DimensionError(f"expected {n} values, got {v}")
    return v


# losses -----------------------------------------------------------------------

def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be n x K, got {logits.shape}")
    n, k = logits.shape
    t = np.asarray(target, dtype=np.int64).reshape(-1)
    if t.size != n:
        raise DimensionError(f"cross_entropy: {t.size} targets for {n} rows")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise DomainError(f"cross_entropy: target class out of range [0, {k})")
    if n == 0:
        return record(np.zeros((), dtype=logits.dtype), (logits,), lambda g: (np.zeros(logits.shape, logits.dtype),))
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    val = (lse - z[rows, t]).mean()
    p = np.exp(z - lse[:, None])

    def bw(g):
        d = p.copy()
        d[rows, t] -= 1
        return (d * (g / n),)

    return record(np.asarray(val, dtype=logits.dtype), (logits,), bw)


def binary_cross_entropy(logits: Tensor, target) -> Tensor:
    """Sum over labels, mean over rows, of the logit-space BCE."""
    if logits.data.ndim != 2:
        raise DimensionError(f"binary_cross_entropy: logits must be n x K, got {logits.shape}")
    t = np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"binary_cross_entropy: target {t.shape} vs logits {logits.shape}")
    if t.size and not np.all((t == 0) | (t == 1)):
        raise DomainError("binary_cross_entropy: targets must be 0 or 1")
    n = logits.shape[0]
    if n == 0:
        return record(np.zeros((), dtype=logits.dtype), (logits,), lambda g: (np.zeros(logits.shape, logits.dtype),))
    z = logits.data
    softplus = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    val = (softplus - t * z).sum() / n
    s = _sigmoid(z)
    return record(np.asarray(val, dtype=logits.dtype), (logits,), lambda g: ((s - t) * (g / n),))


def smooth_l1(pred: Tensor, target, beta: float = 1.0, normalizer: float | None = None) -> Tensor:
    """Huber-style loss summed over all entries, divided by ``normalizer`` (rows by default)."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError(f"smooth_l1: target {t.shape} vs pred {pred.shape}")
    norm = float(normalizer if normalizer is not None else max(pred.shape[0] if pred.data.ndim else 1, 1))
    d = pred.data - t
    a = np.abs(d)
    val = np.where(a < beta, 0.5 * d * d / beta, a - 0.5 * beta).sum() / norm
    return record(np.asarray(val, dtype=pred.dtype), (pred,),
                  lambda g: (np.where(a < beta, d / beta, np.sign(d)) * (g / norm),))


def loss(pred: Tensor, target, kind: str) -> Tensor:
    if kind == "cross_entropy":
        return cross_entropy(pred, target)
    if kind == "binary_cross_entropy":
        return binary_cross_entropy(pred, target)
    raise ValueError(f"unknown loss kind {kind!r}")
