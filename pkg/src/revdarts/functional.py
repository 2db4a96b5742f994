"""Primitive registry: each entry computes a forward value and a backward rule.

Every differentiable computation in the package is a composition of these.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import RngStream, ShapeError, Tensor, make_result

_PRIMITIVES: dict[str, Callable] = {}


def primitive(name: str):
    def deco(fn):
        _PRIMITIVES[name] = fn
        return fn
    return deco


def primitive_kinds() -> list[str]:
    return sorted(_PRIMITIVES) + ["split"]


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None):
    attrs = attrs or {}
    if kind == "split":
        return split(inputs[0], attrs["sections"], attrs.get("axis", -1))
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise KeyError(f"unknown primitive kind {kind!r}")
    if inputs:
        dt = inputs[0].dtype
        for i, t in enumerate(inputs[1:], 1):
            if t.dtype != dt:
                raise TypeError(f"{kind}: input {i} has dtype {t.dtype}, expected {dt}")
    data, backward = fn([t.data for t in inputs], attrs)
    return make_result(kind, data, inputs, backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from None


# -- elementwise -------------------------------------------------------------

@primitive("add")
def _add(xs, attrs):
    a, b = xs
    _broadcast_shape("add", a, b)
    out = a + b
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@primitive("sub")
def _sub(xs, attrs):
    a, b = xs
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape))


@primitive("mul")
def _mul(xs, attrs):
    a, b = xs
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@primitive("scale")
def _scale(xs, attrs):
    (a,) = xs
    c = a.dtype.type(attrs["factor"])
    return a * c, lambda g: (g * c,)


@primitive("relu")
def _relu(xs, attrs):
    (a,) = xs
    mask = a > 0
    return a * mask, lambda g: (g * mask,)


@primitive("sigmoid")
def _sigmoid(xs, attrs):
    (a,) = xs
    y = 0.5 * (np.tanh(0.5 * a) + 1.0)
    return y, lambda g: (g * y * (1.0 - y),)


@primitive("dropout")
def _dropout(xs, attrs):
    (a,) = xs
    p = float(attrs["p"])
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    rng: RngStream = attrs["rng"]
    keep = rng.uniform(a.shape) >= p
    mask = keep.astype(a.dtype) * a.dtype.type(1.0 / (1.0 - p))
    return a * mask, lambda g: (g * mask,)


# -- linear algebra ------------------------------------------------------------

def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


@primitive("matmul")
def _matmul(xs, attrs):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape[-1]} (lhs {a.shape}) vs {b.shape[-2]} (rhs {b.shape})")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape[:-2]} vs {b.shape[:-2]}")
    out = a @ b

    def backward(g):
        da = g @ _swap(b)
        if b.ndim == 2:
            db = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            db = _swap(a) @ g
        return da, db

    return out, backward


@primitive("softmax")
def _softmax(xs, attrs):
    (a,) = xs
    axis = attrs.get("axis", -1)
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


@primitive("layer_norm")
def _layer_norm(xs, attrs):
    x, gain, bias = xs
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},)")
    eps = attrs.get("eps", 1e-5)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain + bias

    def backward(g):
        dxhat = g * gain
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return out, backward


# -- convolutions ---------------------------------------------------------------

def _pads(k: int, causal: bool) -> tuple[int, int]:
    if k % 2 == 0:
        raise ValueError(f"kernel width must be odd, got {k}")
    return (k - 1, 0) if causal else ((k - 1) // 2, (k - 1) // 2)


@primitive("depthwise_conv1d")
def _dw_conv(xs, attrs):
    """x [..., l, C] with weights [K, C]; each channel convolved on its own."""
    x, w = xs
    if w.ndim != 2 or w.shape[1] != x.shape[-1]:
        raise ShapeError(f"depthwise_conv1d: weight {w.shape} does not match channels {x.shape[-1]}")
    k = w.shape[0]
    lp, rp = _pads(k, attrs.get("causal", False))
    l = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(lp, rp), (0, 0)]
    xp = np.pad(x, pad)
    out = np.zeros_like(x)
    for j in range(k):
        out += w[j] * xp[..., j:j + l, :]

    def backward(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(w)
        for j in range(k):
            dxp[..., j:j + l, :] += g * w[j]
            dw[j] = (g * xp[..., j:j + l, :]).reshape(-1, x.shape[-1]).sum(axis=0)
        return dxp[..., lp:lp + l, :], dw

    return out, backward


@primitive("dynamic_conv1d")
def _dyn_conv(xs, attrs):
    """x [B, l, C] convolved with per-position kernels [B, l, H, K] shared by channel groups."""
    x, kern = xs
    b, l, c = x.shape
    if kern.ndim != 4 or kern.shape[:2] != (b, l) or c % kern.shape[2]:
        raise ShapeError(f"dynamic_conv1d: kernels {kern.shape} incompatible with input {x.shape}")
    heads, k = kern.shape[2], kern.shape[3]
    per = c // heads
    lp, rp = _pads(k, attrs.get("causal", False))
    xp = np.pad(x, [(0, 0), (lp, rp), (0, 0)])
    # windows[b, t, h, p, j] = xp[b, t + j, h * per + p]
    windows = sliding_window_view(xp, k, axis=1).reshape(b, l, heads, per, k)
    out = np.einsum("blhpk,blhk->blhp", windows, kern).reshape(b, l, c)

    def backward(g):
        g4 = g.reshape(b, l, heads, per)
        dkern = np.einsum("blhpk,blhp->blhk", windows, g4)
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[:, j:j + l, :] += (g4 * kern[..., j:j + 1]).reshape(b, l, c)
        return dxp[:, lp:lp + l, :], dkern

    return out, backward


# -- indexing and layout ----------------------------------------------------------

@primitive("embedding")
def _embedding(xs, attrs):
    (table,) = xs
    ids = np.asarray(attrs["ids"])
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")
    out = table[ids]

    def backward(g):
        dt = np.zeros_like(table)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dt,)

    return out, backward


@primitive("concat")
def _concat(xs, attrs):
    axis = attrs.get("axis", -1)
    ref = xs[0].shape
    ax = axis % len(ref)
    for i, t in enumerate(xs):
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError(f"concat: part {i} has shape {t.shape}, incompatible with {ref} along axis {axis}")
    out = np.concatenate(xs, axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=ax))


@primitive("slice")
def _slice(xs, attrs):
    (a,) = xs
    ax = attrs.get("axis", -1) % a.ndim
    start, stop = attrs["start"], attrs["stop"]
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(a[idx])

    def backward(g):
        da = np.zeros_like(a)
        da[idx] = g
        return (da,)

    return out, backward


@primitive("stack")
def _stack(xs, attrs):
    ref = xs[0].shape
    for i, t in enumerate(xs):
        if t.shape != ref:
            raise ShapeError(f"stack: part {i} has shape {t.shape}, expected {ref}")
    out = np.stack(xs, axis=0)
    return out, lambda g: tuple(g[i] for i in range(len(xs)))


@primitive("reshape")
def _reshape(xs, attrs):
    (a,) = xs
    out = a.reshape(attrs["shape"])
    return out, lambda g: (g.reshape(a.shape),)


@primitive("transpose")
def _transpose(xs, attrs):
    (a,) = xs
    axes = tuple(attrs["axes"])
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.transpose(axes))
    return out, lambda g: (np.ascontiguousarray(g.transpose(inv)),)


# -- reductions ------------------------------------------------------------------

@primitive("sum")
def _sum(xs, attrs):
    (a,) = xs
    axis = attrs.get("axis")
    out = np.asarray(a.sum(axis=axis, keepdims=attrs.get("keepdims", False)), dtype=a.dtype)

    def backward(g):
        if axis is not None and not attrs.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, backward


@primitive("mean")
def _mean(xs, attrs):
    (a,) = xs
    axis = attrs.get("axis", 0)
    n = a.shape[axis]
    out = a.mean(axis=axis)
    return out, lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)


@primitive("max")
def _max(xs, attrs):
    (a,) = xs
    axis = attrs.get("axis", 0)
    idx = np.expand_dims(a.argmax(axis=axis), axis)
    out = np.take_along_axis(a, idx, axis=axis).squeeze(axis)

    def backward(g):
        da = np.zeros_like(a)
        np.put_along_axis(da, idx, np.expand_dims(g, axis), axis=axis)
        return (da,)

    return out, backward


@primitive("weighted_sum")
def _weighted_sum(xs, attrs):
    """Convex-combination kernel: sum_i w[i] * x_i, weights as a length-K vector."""
    w, *parts = xs
    if w.shape != (len(parts),):
        raise ShapeError(f"weighted_sum: {w.shape} weights for {len(parts)} parts")
    ref = parts[0].shape
    for i, p in enumerate(parts):
        if p.shape != ref:
            raise ShapeError(f"weighted_sum: part {i} has shape {p.shape}, expected {ref}")
    out = np.zeros(ref, dtype=w.dtype)
    for wi, p in zip(w, parts):
        out += wi * p

    def backward(g):
        dw = np.array([np.vdot(g, p) for p in parts], dtype=w.dtype)
        return (dw, *(g * wi for wi in w))

    return out, backward


# -- loss ----------------------------------------------------------------------------

@primitive("cross_entropy_ls")
def _cross_entropy_ls(xs, attrs):
    """Mean label-smoothed cross-entropy over positions where ``mask`` is set."""
    (logits,) = xs
    targets = np.asarray(attrs["targets"])
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy_ls: targets {targets.shape} vs logits {logits.shape}")
    mask = attrs.get("mask")
    mask = np.ones(targets.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    eps = float(attrs.get("smoothing", 0.0))
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    q = np.full(logits.shape, eps / v, dtype=logits.dtype)
    np.put_along_axis(q, targets[..., None], 1.0 - eps + eps / v, axis=-1)
    count = max(float(mask.sum()), 1.0)
    per_pos = -(q * logp).sum(axis=-1)
    out = np.asarray((per_pos * mask).sum() / count, dtype=logits.dtype)

    def backward(g):
        return (g * (np.exp(logp) - q) * (mask / count)[..., None],)

    return out, backward


# -- public wrappers -------------------------------------------------------------------

def add(a, b): return apply_primitive("add", [a, b])
def sub(a, b): return apply_primitive("sub", [a, b])
def mul(a, b): return apply_primitive("mul", [a, b])
def scale(a, factor: float): return apply_primitive("scale", [a], {"factor": factor})
def relu(a): return apply_primitive("relu", [a])
def sigmoid(a): return apply_primitive("sigmoid", [a])
def matmul(a, b): return apply_primitive("matmul", [a, b])
def softmax(a, axis: int = -1): return apply_primitive("softmax", [a], {"axis": axis})
def reshape(a, shape): return apply_primitive("reshape", [a], {"shape": tuple(shape)})
def transpose(a, axes): return apply_primitive("transpose", [a], {"axes": tuple(axes)})
def stack(parts): return apply_primitive("stack", list(parts))
def concat(parts, axis: int = -1): return apply_primitive("concat", list(parts), {"axis": axis})
def weighted_sum(w, parts): return apply_primitive("weighted_sum", [w, *parts])


def dropout(a, p: float, rng: RngStream | None):
    if p == 0.0 or rng is None:
        return a
    return apply_primitive("dropout", [a], {"p": p, "rng": rng})


def layer_norm(x, gain, bias, eps: float = 1e-5):
    return apply_primitive("layer_norm", [x, gain, bias], {"eps": eps})


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def depthwise_conv1d(x, w, causal: bool = False):
    return apply_primitive("depthwise_conv1d", [x, w], {"causal": causal})


def dynamic_conv1d(x, kernels, causal: bool = False):
    return apply_primitive("dynamic_conv1d", [x, kernels], {"causal": causal})


def embedding(table, ids):
    return apply_primitive("embedding", [table], {"ids": ids})


def slice_axis(a, start: int, stop: int, axis: int = -1):
    return apply_primitive("slice", [a], {"start": start, "stop": stop, "axis": axis})


def split(a, sections: int, axis: int = -1) -> list:
    n = a.shape[axis]
    if sections <= 0 or n % sections:
        raise ShapeError(f"split: axis extent {n} is not divisible by {sections}")
    w = n // sections
    return [slice_axis(a, i * w, (i + 1) * w, axis) for i in range(sections)]


def reduce_sum(a, axis=None, keepdims: bool = False):
    return apply_primitive("sum", [a], {"axis": axis, "keepdims": keepdims})


def reduce_mean(a, axis: int = 0): return apply_primitive("mean", [a], {"axis": axis})
def reduce_max(a, axis: int = 0): return apply_primitive("max", [a], {"axis": axis})


def cross_entropy_ls(logits, targets, mask=None, smoothing: float = 0.0):
    return apply_primitive("cross_entropy_ls", [logits],
                           {"targets": targets, "mask": mask, "smoothing": smoothing})
