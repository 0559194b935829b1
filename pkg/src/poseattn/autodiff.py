"""Dense arrays with tape-based reverse-mode differentiation.

Only the operations the two-stream model needs are provided. Every op takes an
optional leading batch axis. Recording happens only while a :class:`Tape` is
active, so plain forward passes (inference, feature caching) cost nothing extra.
"""

from __future__ import annotations

import threading
from typing import Callable, NamedTuple, Sequence

import numpy as np

_local = threading.local()


def current_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Array:
    """A numpy buffer plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_index")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None, dtype=None):
        data = np.asarray(values, dtype=dtype)
        if data.dtype.kind in "iub":
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Array(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


def _lift(x, like: Array | None = None) -> Array:
    if isinstance(x, Array):
        return x
    dtype = like.data.dtype if like is not None else None
    return Array(np.asarray(x, dtype=dtype))


class _Node(NamedTuple):
    out: Array
    inputs: tuple[Array, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; ops executed inside the block on arrays that
    require gradients are appended in execution order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.backward_order: list[int] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = current_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev

    def record(self, out: Array, inputs: tuple[Array, ...], backward) -> None:
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Array, wrt: Sequence[Array] | None = None) -> list[np.ndarray]:
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Array] = {}
        self.backward_order = []
        for index in range(loss._index, -1, -1):
            node = self.nodes[index]
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            self.backward_order.append(index)
            for a, ga in zip(node.inputs, node.backward(g)):
                if ga is None or not a.requires_grad:
                    continue
                if a._tape is not self:
                    leaves[id(a)] = a
                key = id(a)
                if key in grads:
                    grads[key] = grads[key] + ga
                else:
                    grads[key] = ga
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
        if wrt is None:
            return [leaf.grad for leaf in leaves.values()]
        out = []
        for w in wrt:
            g = grads.get(id(w)) if id(w) in leaves else None
            if g is None:
                g = np.zeros_like(w.data)
                w.grad = g
            out.append(g)
        return out


def backward(loss: Array, wrt: Sequence[Array] | None = None) -> list[np.ndarray]:
    """Gradients of ``loss`` for ``wrt``; unreachable arrays get zeros."""
    if loss._tape is None:
        raise ValueError("loss is not on a tape; run the forward pass inside `with Tape():`")
    return loss._tape.backward(loss, wrt)


def _make(data: np.ndarray, inputs: tuple[Array, ...], backward) -> Array:
    tape = current_tape()
    needs = tape is not None and any(a.requires_grad for a in inputs)
    out = Array(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Array:
    a, b = _lift(a), _lift(b, a if isinstance(a, Array) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Array:
    a = _lift(a)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a: Array) -> Array:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(x: Array) -> Array:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Array) -> Array:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Array) -> Array:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def dropout(x: Array, rate: float, train: bool, rng: np.random.Generator | int | None = None) -> Array:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity when not training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- structural


def getitem(x: Array, index) -> Array:
    shape, dtype = x.shape, x.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if _needs_add_at(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(x.data[index], (x,), bw)


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(x: Array, shape) -> Array:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Array, axes: Sequence[int]) -> Array:
    inverse = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(arrays: Sequence[Array], axis: int = -1) -> Array:
    arrays = tuple(arrays)
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([a.data for a in arrays], axis=axis),
        arrays,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(arrays: Sequence[Array], axis: int = 0) -> Array:
    arrays = tuple(arrays)
    n = len(arrays)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([a.data for a in arrays], axis=axis), arrays, bw)


def sum(x: Array, axis=None) -> Array:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x: Array, axis=None) -> Array:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------- linear maps


def affine(x: Array, weight: Array, bias: Array | None = None) -> Array:
    """``weight @ x + bias`` for a vector ``x``, row-wise for a batch (B×in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"affine: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ wd
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(y, inputs, bw)


def matvec(m: Array, v: Array) -> Array:
    """Batched ``m @ v``: (B×D×N, B×N) -> B×D, or unbatched (D×N, N) -> D.

    Used for attention-weighted combinations of columns.
    """
    if m.ndim != v.ndim + 1 or m.shape[:-2] != v.shape[:-1] or m.shape[-1] != v.shape[-1]:
        raise ValueError(f"matvec: shapes {m.shape} and {v.shape} are incompatible")
    md, vd = m.data, v.data
    y = np.einsum("...dn,...n->...d", md, vd)

    def bw(g):
        return g[..., :, None] * vd[..., None, :], np.einsum("...dn,...d->...n", md, g)

    return _make(y, (m, v), bw)


def softmax(x: Array, axis: int = -1) -> Array:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Array, labels) -> Array:
    """Mean softmax cross-entropy. ``logits`` is C or B×C; ``labels`` int or B ints."""
    batched = logits.ndim == 2
    zd = logits.data if batched else logits.data[None]
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lab.shape[0] != zd.shape[0]:
        raise ValueError(f"cross_entropy: {zd.shape[0]} rows but {lab.shape[0]} labels")
    if lab.min() < 0 or lab.max() >= zd.shape[1]:
        raise ValueError(f"cross_entropy: label outside [0, {zd.shape[1]})")
    logp = log_softmax_np(zd)
    rows = np.arange(len(lab))
    loss = -logp[rows, lab].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, lab] -= 1.0
        p *= g / len(lab)
        return (p if batched else p[0],)

    return _make(np.asarray(loss, dtype=zd.dtype), (logits,), bw)


# ---------------------------------------------------------------- convolution


def _same_pads(k: int) -> tuple[int, int]:
    total = k - 1
    return total // 2, total - total // 2


def conv2d(x: Array, kernel: Array, bias: Array | None = None, padding: str = "SAME") -> Array:
    """2-D cross-correlation, stride 1, channels last.

    ``x`` is H×W×C or B×H×W×C; ``kernel`` is kh×kw×C×F. SAME keeps H×W (extra
    padding goes on the high side), VALID yields (H-kh+1)×(W-kw+1).
    """
    if padding not in ("SAME", "VALID"):
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or kernel.ndim != 4 or xd.shape[3] != kernel.shape[2]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    kh, kw, c, f = kernel.shape
    if padding == "SAME":
        (t, b), (l, r) = _same_pads(kh), _same_pads(kw)
        xp = np.pad(xd, ((0, 0), (t, b), (l, r), (0, 0)))
    else:
        if xd.shape[1] < kh or xd.shape[2] < kw:
            raise ValueError(f"conv2d: input {x.shape} smaller than kernel {kernel.shape} (VALID)")
        t = l = 0
        xp = xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B,Ho,Wo,C,kh,kw
    kd = kernel.data
    y = np.tensordot(win, kd.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    if bias is not None:
        y = y + bias.data
    ho, wo = y.shape[1], y.shape[2]
    in_shape = xd.shape

    def bw(g):
        g4 = g if batched else g[None]
        gk = np.tensordot(win, g4, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        dwin = np.tensordot(g4, kd, axes=([3], [3]))  # B,Ho,Wo,kh,kw,C
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + ho, j : j + wo, :] += dwin[:, :, :, i, j, :]
        gx = gxp[:, t : t + in_shape[1], l : l + in_shape[2], :]
        if not batched:
            gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 1, 2)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(y if batched else y[0], inputs, bw)


def maxpool2d(x: Array) -> Array:
    """2×2 max pooling with stride 2, channels last.

    Odd extents are padded with -inf on the high side. Backward routes each
    gradient to the first (row-major) maximum of its window.
    """
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or 0 in xd.shape:
        raise ValueError(f"maxpool2d: need a non-empty H×W×C input, got {x.shape}")
    bsz, h, w, c = xd.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, ph), (0, pw), (0, 0)), constant_values=-np.inf)
    ho, wo = xd.shape[1] // 2, xd.shape[2] // 2
    win = xd.reshape(bsz, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(bsz, ho, wo, c, 4)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        g4 = g if batched else g[None]
        routed = np.zeros(win.shape, dtype=g4.dtype)
        np.put_along_axis(routed, arg[..., None], g4[..., None], axis=-1)
        gx = routed.reshape(bsz, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(bsz, 2 * ho, 2 * wo, c)
        gx = gx[:, :h, :w, :]
        return (gx if batched else gx[0],)

    return _make(y if batched else y[0], (x,), bw)


# ---------------------------------------------------------------- recurrence


def lstm_step(x: Array, h: Array, c: Array, params: dict[str, Array]) -> tuple[Array, Array]:
    """One fully gated LSTM update; gate blocks are ordered input, forget, cell, output.

    ``params`` holds ``wx`` (4H×I), ``wh`` (4H×H) and ``b`` (4H).
    """
    wx, wh, b = params["wx"], params["wh"], params["b"]
    hidden = wh.shape[1]
    if wx.shape[0] != 4 * hidden or h.shape[-1] != hidden or c.shape[-1] != hidden:
        raise ValueError(f"lstm_step: h {h.shape}, c {c.shape} inconsistent with wx {wx.shape}, wh {wh.shape}")
    z = add(affine(x, wx, b), affine(h, wh))
    i = sigmoid(z[..., 0:hidden])
    f = sigmoid(z[..., hidden : 2 * hidden])
    g = tanh(z[..., 2 * hidden : 3 * hidden])
    o = sigmoid(z[..., 3 * hidden :])
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next
