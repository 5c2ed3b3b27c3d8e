"""Small dense-tensor autodiff for the 1D U-net.

Only the operations the denoiser needs are provided. Every op takes and
returns :class:`Tensor`; when a :class:`Tape` is active and at least one input
requires a gradient, the op records a backward closure on the tape.

Signals are ``(channels, length)``. Batched signals put the batch axis in
the middle, ``(channels, batch, length)``, so a convolution over the whole
batch is a single matrix product with no transposes.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised by strict mode when a forward value is NaN or Inf."""


_TAPES: list["Tape"] = []
_CHECK_FINITE = False


def set_check_finite(flag: bool) -> None:
    """Toggle NaN/Inf checking on every op output."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

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
        return mul(self, -1.0)


class Tape:
    """Ordered record of executed ops; use as a context manager."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self.nodes.append((out, inputs, backward_fn))


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and np.ndim(x) == 0:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands; bare scalars take the dtype of the tensor operand."""
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced in forward pass")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _TAPES:
        _TAPES[-1].record(out, inputs, backward_fn)
    return out


def backward(tape: Tape, output: Tensor, seed=None, params: Iterable[Tensor] = ()) -> None:
    """Reverse sweep over ``tape`` starting from ``output``.

    Gradients accumulate into ``.grad`` of every tensor reached. Tensors in
    ``params`` that the sweep never reaches get a zero gradient.
    """
    if seed is None:
        seed = np.ones_like(output.data)
    seed = np.asarray(seed, dtype=output.data.dtype)
    if seed.shape != output.shape:
        raise DimensionError(f"seed shape {seed.shape} != output shape {output.shape}")
    output.grad = seed.copy()
    for out, inputs, fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for inp, g in zip(inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(g, dtype=inp.data.dtype, copy=True)
            else:
                inp.grad += g
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = np.exp(-xd)
    sig += 1.0
    np.reciprocal(sig, out=sig)

    def bw(g):
        t = 1.0 - sig
        t *= xd
        t += 1.0
        t *= sig
        t *= g
        return (t,)

    return _emit(xd * sig, (x,), bw)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _emit(np.sum(x.data, axis=axis), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis), 1.0 / float(n))


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    """Swap the two axes of a matrix."""
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _emit(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[start:stop]`` along the channel axis."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _emit(x.data[start:stop], (x,), bw)


def concat_channels(*parts: Tensor) -> Tensor:
    """Concatenate along the channel axis; earlier arguments come first."""
    parts = tuple(_as_tensor(p) for p in parts)
    rest = {p.shape[1:] for p in parts}
    if len(rest) != 1:
        raise DimensionError(f"length axes differ in concat: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=0), parts, bw)


def upsample2(x: Tensor, length: int) -> Tensor:
    """Nearest-neighbour x2 upsampling along length, cropped to ``length``."""
    L = x.shape[-1]
    if not L < length <= 2 * L:
        raise DimensionError(f"cannot upsample length {L} to {length}")
    out = np.repeat(x.data, 2, axis=-1)[..., :length]
    lead = x.shape[:-1]

    def bw(g):
        full = np.zeros(lead + (2 * L,), dtype=g.dtype)
        full[..., :length] = g
        return (full.reshape(lead + (L, 2)).sum(axis=-1),)

    return _emit(out, (x,), bw)


# ---------------------------------------------------------------- layers

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``x`` of shape (N, in) and ``w`` of shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input features {x.shape[-1]} != weight in-dim {w.shape[1]}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b is not None else None
        return gx, gw, gb

    inputs = (x, w, b) if b is not None else (x, w)
    return _emit(out, inputs, bw)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 2:
        return reshape(x, (x.shape[0], 1, x.shape[1])), True
    if x.data.ndim != 3:
        raise DimensionError(f"expected (C, L) or (C, N, L), got {x.shape}")
    return x, False


def _unbatched(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, (y.shape[0], y.shape[2])) if squeeze else y


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0,
           stride: int = 1) -> Tensor:
    """1D cross-correlation. ``w`` has shape (C_out, C_in, K)."""
    x, squeeze = _batched(x)
    cin, n, L = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise DimensionError(f"conv1d: input channels {cin} (axis 0) != weight in-channels {wcin} (axis 1)")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv1d: bias shape {b.shape} != ({cout},)")
    lout = (L + 2 * padding - k) // stride + 1
    if lout < 1:
        raise DimensionError(f"conv1d: kernel {k} longer than padded length {L + 2 * padding}")
    xd = x.data
    # Per tap j: output range [lo, hi) whose input index o * stride + j - padding is in bounds.
    taps = []
    for j in range(k):
        lo = min(lout, max(0, -(-(padding - j) // stride)))
        hi = max(lo, min(lout, (L - 1 + padding - j) // stride + 1))
        taps.append((lo, hi, lo * stride + j - padding))
    # "Same" stride-1 convs shift flattened (C, N*L) rows; edge columns that
    # would cross into the neighbouring sample are zeroed afterwards.
    same = stride == 1 and lout == L
    nl = n * L
    if k == 1 and stride == 1 and not padding:
        cols = xd.reshape(cin, n * lout)
    elif same:
        xf = xd.reshape(cin, nl)
        cols = np.empty((k, cin, n, L), dtype=xd.dtype)
        for j, (lo, hi, _) in enumerate(taps):
            d = j - padding
            cf = cols[j].reshape(cin, nl)
            cf[:, max(0, -d):nl - max(0, d)] = xf[:, max(0, d):nl - max(0, -d)]
            cols[j, :, :, :lo] = 0
            cols[j, :, :, hi:] = 0
        cols = cols.reshape(k * cin, nl)
    else:
        cols = np.empty((k, cin, n, lout), dtype=xd.dtype)
        for j, (lo, hi, start) in enumerate(taps):
            cols[j, :, :, :lo] = 0
            cols[j, :, :, hi:] = 0
            if hi > lo:
                cols[j, :, :, lo:hi] = xd[:, :, start:start + stride * (hi - lo - 1) + 1:stride]
        cols = cols.reshape(k * cin, n * lout)
    wmat = np.ascontiguousarray(w.data.transpose(0, 2, 1)).reshape(cout, k * cin)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(cout, n, lout)

    def bw(g):
        g2 = g.reshape(cout, n * lout)
        gw = (g2 @ cols.T).reshape(cout, k, cin).transpose(0, 2, 1)
        gb = g2.sum(axis=1) if b is not None else None
        gcols = (wmat.T @ g2).reshape(k, cin, n, lout)
        if k == 1 and stride == 1 and not padding:
            return gcols[0], gw, gb
        if same:
            for j, (lo, hi, _) in enumerate(taps):
                gcols[j, :, :, :lo] = 0
                gcols[j, :, :, hi:] = 0
            gx = gcols[padding].reshape(cin, nl)
            for j in range(k):
                d = j - padding
                if d:
                    gx[:, max(0, d):nl - max(0, -d)] += gcols[j].reshape(cin, nl)[:, max(0, -d):nl - max(0, d)]
            return gx.reshape(cin, n, L), gw, gb
        gx = np.zeros((cin, n, L), dtype=g.dtype)
        for j, (lo, hi, start) in enumerate(taps):
            if hi > lo:
                gx[:, :, start:start + stride * (hi - lo - 1) + 1:stride] += gcols[j, :, :, lo:hi]
        return gx, gw, gb

    inputs = (x, w, b) if b is not None else (x, w)
    return _unbatched(_emit(out, inputs, bw), squeeze)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, squeeze = _batched(x)
    c, n, L = x.shape
    if groups < 1 or c % groups:
        raise DimensionError(f"group_norm: {groups} groups do not divide {c} channels")
    if eps <= 0:
        raise ValueError("eps must be positive")
    cg = c // groups
    m = 1.0 / (cg * L)
    xg = x.data.reshape(groups, cg, n, L)
    mu = np.einsum("gcnl->gn", xg) * m
    xc = xg - mu[:, None, :, None]
    inv = 1.0 / np.sqrt(np.einsum("gcnl,gcnl->gn", xc, xc) * m + eps)
    xc *= inv[:, None, :, None]
    xhat = xc.reshape(c, n, L)
    gd = gamma.data[:, None, None]
    out = xhat * gd
    out += beta.data[:, None, None]

    def bw(g):
        ggamma = np.einsum("cnl,cnl->c", g, xhat)
        gbeta = g.sum(axis=(1, 2))
        dxh = (g * gd).reshape(groups, cg, n, L)
        xh = xhat.reshape(groups, cg, n, L)
        a = np.einsum("gcnl->gn", dxh) * m
        b = np.einsum("gcnl,gcnl->gn", dxh, xh) * m
        dxh -= a[:, None, :, None]
        dxh -= xh * b[:, None, :, None]
        dxh *= inv[:, None, :, None]
        return dxh.reshape(c, n, L), ggamma, gbeta

    return _unbatched(_emit(out, (x, gamma, beta), bw), squeeze)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def self_attention_1d(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                      heads: int = 1) -> Tensor:
    """Scaled dot-product self-attention over the length axis.

    Projections are (C, C) matrices applied channel-wise; softmax runs over key
    positions so each query row sums to one.
    """
    x, squeeze = _batched(x)
    c, n, L = x.shape
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if w.shape != (c, c):
            raise DimensionError(f"self_attention_1d: {name} has shape {w.shape}, expected ({c}, {c})")
    if heads < 1 or c % heads:
        raise DimensionError(f"self_attention_1d: {heads} heads do not divide {c} channels")
    d = c // heads
    scale = 1.0 / math.sqrt(d)
    xf = x.data.reshape(c, n * L)

    def split(a):  # (C, N*L) -> (N, h, d, L)
        return a.reshape(heads, d, n, L).transpose(2, 0, 1, 3)

    def merge(a):  # (N, h, d, L) -> (C, N*L)
        return a.transpose(1, 2, 0, 3).reshape(c, n * L)

    qh, kh, vh = split(wq.data @ xf), split(wk.data @ xf), split(wv.data @ xf)
    attn = _softmax(scale * np.matmul(qh.transpose(0, 1, 3, 2), kh))  # (N, h, Lq, Lk)
    o = merge(np.matmul(vh, attn.transpose(0, 1, 3, 2)))
    out = (wo.data @ o).reshape(c, n, L)

    def bw(g):
        g2 = g.reshape(c, n * L)
        gwo = g2 @ o.T
        go = split(wo.data.T @ g2)
        gv = np.matmul(go, attn)
        ga = np.matmul(go.transpose(0, 1, 3, 2), vh)
        glog = attn * (ga - (ga * attn).sum(axis=-1, keepdims=True))
        gq = merge(scale * np.matmul(kh, glog.transpose(0, 1, 3, 2)))
        gk = merge(scale * np.matmul(qh, glog))
        gv = merge(gv)
        gx = wq.data.T @ gq + wk.data.T @ gk + wv.data.T @ gv
        return gx.reshape(c, n, L), gq @ xf.T, gk @ xf.T, gv @ xf.T, gwo

    return _unbatched(_emit(out, (x, wq, wk, wv, wo), bw), squeeze)


def attention_weights(x: np.ndarray, wq: np.ndarray, wk: np.ndarray, heads: int = 1) -> np.ndarray:
    """Softmax attention matrix (N, heads, L, L) for inspection; no tape."""
    x = x[:, None] if x.ndim == 2 else x
    c, n, L = x.shape
    d = c // heads
    xf = x.reshape(c, n * L)
    q = (wq @ xf).reshape(heads, d, n, L).transpose(2, 0, 1, 3)
    k = (wk @ xf).reshape(heads, d, n, L).transpose(2, 0, 1, 3)
    return _softmax(np.matmul(q.transpose(0, 1, 3, 2), k) / math.sqrt(d))
