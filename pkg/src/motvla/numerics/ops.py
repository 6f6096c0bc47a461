"""Differentiable operations on :class:`Tensor`.

Every op computes its forward value with numpy and registers a local
backward rule through :func:`record`.  Elementwise broadcasting is limited
to three forms: a scalar operand, a trailing-suffix operand (the last-axis
affine case, e.g. ``x[B, N, d] + b[d]``) and equal-rank keepdims operands
with size-1 axes.  Anything else raises :class:`DimensionError`.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, record


class DegenerateRowError(ValueError):
    pass


def _check_broadcast(sa: tuple, sb: tuple) -> None:
    na, nb = len(sa), len(sb)
    if na == 0 or nb == 0 or (na <= nb and math.prod(sa) == 1) or (nb <= na and math.prod(sb) == 1):
        return
    if na != nb:
        lo, hi = (sa, sb) if na < nb else (sb, sa)
        if hi[len(hi) - len(lo):] != lo:
            raise DimensionError(f"cannot broadcast shapes {sa} and {sb}")
        return
    for x, y in zip(sa, sb):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"cannot broadcast shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb:
        _check_broadcast(sa, sb)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb:
        _check_broadcast(sa, sb)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        _check_broadcast(ad.shape, bd.shape)
    return record(ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                             _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        _check_broadcast(ad.shape, bd.shape)
    out = ad / bd
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                             _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None))


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    return record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return record(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return record(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    half = 0.5 * (1.0 + th)
    out = x * half

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (half + 0.5 * x * (1.0 - th * th) * dinner),)

    return record(out, (a,), bw)


# --- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D (shared weight) or carry the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis with a shared 2-D weight (fused)."""
    if b is None:
        return matmul(x, w)
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim < 2 or wd.ndim != 2 or xd.shape[-1] != wd.shape[0] or bd.shape != (wd.shape[1],):
        raise DimensionError(f"linear shape mismatch: {xd.shape} @ {wd.shape} + {bd.shape}")
    out = xd @ wd + bd

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return record(out, (x, w, b), bw)


# --- shape manipulation -----------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    return record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as err:
        raise DimensionError(f"concat mismatch: {[t.shape for t in tensors]}") from err
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return record(out, tensors, bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return record(out, tensors, bw)


def _has_array_index(idx) -> bool:
    if not isinstance(idx, tuple):
        idx = (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in idx)


def index(a: Tensor, idx) -> Tensor:
    """Numpy-style indexing; advanced indices scatter-add on the way back."""
    out = a.data[idx]
    if not isinstance(out, np.ndarray) or out.base is not None:
        out = np.array(out, dtype=np.float64)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        if _has_array_index(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return record(out, (a,), bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    _check_broadcast(src, shape)
    return record(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),))


# --- reductions -------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --- normalisation and attention primitives --------------------------------

def softmax(x: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``allowed`` is a boolean flag lane broadcastable to ``x``; blocked entries
    get weight exactly 0.0 and never enter an exponential.
    """
    xd = x.data
    if allowed is None:
        m = xd.max(axis=-1, keepdims=True)
        e = np.exp(xd - m)
    else:
        m = np.where(allowed, xd, -np.inf).max(axis=-1, keepdims=True)
        if np.isneginf(m).any():
            raise DegenerateRowError("softmax row with every entry blocked")
        # blocked lanes enter the exponential as 0 and are then zeroed by the flag
        e = np.exp(np.where(allowed, xd - m, 0.0)) * allowed
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record(out, (x,), bw)


def softmax_rows(x: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x, allowed)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=-1, keepdims=True))
    out = xd - lse
    p = np.exp(out)
    return record(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def nll_from_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row negative log-likelihood of integer ``targets`` (fused)."""
    xd = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != xd.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} vs logits {xd.shape}")
    m = xd.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=-1, keepdims=True))
    K = xd.shape[-1]
    rows = np.arange(targets.size)
    picked = xd.reshape(-1, K)[rows, targets.reshape(-1)].reshape(targets.shape)

    def bw(g):
        grad = np.exp(xd - lse).reshape(-1, K)
        grad[rows, targets.reshape(-1)] -= 1.0
        return (grad.reshape(xd.shape) * g[..., None],)

    return record(lse[..., 0] - picked, (logits,), bw)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy, numerically stable."""
    x = logits.data
    y = np.asarray(targets, dtype=np.float64)
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return record(out, (logits,), lambda g: (g * (sig - y),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} vs width {d}")
    mu = np.add.reduce(xd, axis=-1, keepdims=True) * (1.0 / d)
    xc = xd - mu
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) * (1.0 / d)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        gg = (flat * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gb = flat.sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb

    return record(out, (x, gain, bias), bw)


def bilinear_sample(fmap: Tensor, u: Tensor, v: Tensor) -> Tensor:
    """Bilinear lookup with zero padding.

    ``fmap`` is ``[..., H, W, C]``; ``u`` (column) and ``v`` (row) are
    ``[..., M]`` pixel coordinates with the same leading axes, where integer
    values hit pixel centres.  Corners outside the grid contribute zero.
    Returns ``[..., M, C]``.
    """
    F = fmap.data
    H, W, C = F.shape[-3:]
    lead = F.shape[:-3]
    ud, vd = u.data, v.data
    if ud.shape != vd.shape or ud.shape[:-1] != lead or F.ndim < 4:
        raise DimensionError(f"sample coords {ud.shape}/{vd.shape} vs map {F.shape}")
    B = math.prod(lead)
    out_shape = ud.shape + (C,)
    ud = ud.reshape(B, -1)
    vd = vd.reshape(B, -1)
    x0 = np.floor(ud)
    y0 = np.floor(vd)
    fx = ud - x0
    fy = vd - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = F.reshape(B * H * W, C)
    base = (np.arange(B) * (H * W))[:, None]
    # the four corners stacked on a leading axis: (0,0), (0,1), (1,0), (1,1)
    dx = np.array([0, 1, 0, 1])[:, None, None]
    dy = np.array([0, 0, 1, 1])[:, None, None]
    xi, yi = x0 + dx, y0 + dy
    valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
    rows = base + np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)
    wx = np.where(dx == 1, fx, 1.0 - fx)
    wy = np.where(dy == 1, fy, 1.0 - fy)
    val = flat[rows]
    wgt = wx * wy * valid
    out = np.einsum("kbm,kbmc->bmc", wgt, val).reshape(out_shape)

    def bw(g):
        g = g.reshape(B, -1, C)
        gF = None
        if fmap.requires_grad:
            contrib = wgt[..., None] * g[None]
            gF = np.zeros_like(flat)
            np.add.at(gF, rows.reshape(-1), contrib.reshape(-1, C))
            gF = gF.reshape(F.shape)
        gu = gv = None
        if u.requires_grad or v.requires_grad:
            s = np.einsum("kbmc,bmc->kbm", val, g) * valid
            gu = (s * wy * np.where(dx == 1, 1.0, -1.0)).sum(axis=0).reshape(u.shape)
            gv = (s * wx * np.where(dy == 1, 1.0, -1.0)).sum(axis=0).reshape(v.shape)
        return gF, gu, gv

    return record(out, (fmap, u, v), bw)


def _install_replay() -> None:
    from .memo import replayable
    g = globals()
    for name, fn in list(g.items()):
        if callable(fn) and not name.startswith("_") and getattr(fn, "__module__", None) == __name__ \
                and not isinstance(fn, type):
            g[name] = replayable(fn)


_install_replay()
