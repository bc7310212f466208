"""Differentiable ops.

Arrays are at least 2-D.  ``matmul`` and the elementwise ops broadcast over
leading batch axes and over a row-bias of shape ``(1, n)``; gradients are
summed back onto the broadcast operand.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError, MaskError
from .tensor import Tensor, as_array, constant

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor(ad * bd, (a, b), backward, "mul")


def scale(a, factor: float) -> Tensor:
    a = _t(a)
    factor = a.data.dtype.type(factor)

    def backward(g):
        return (g * factor,)

    return Tensor(a.data * factor, (a,), backward, "scale")


# -- linear algebra ----------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D or batched."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # one large GEMM instead of a batched loop
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        try:
            out = ad @ bd
        except ValueError:
            raise DimensionError(f"matmul: shape mismatch {a.shape} x {b.shape}") from None

    def backward(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor(out, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _t(a)

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return Tensor(np.swapaxes(a.data, -1, -2), (a,), backward, "transpose")


def permute(a, axes) -> Tensor:
    a = _t(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor(np.transpose(a.data, axes), (a,), backward, "permute")


def reshape(a, shape) -> Tensor:
    a = _t(a)
    original = a.shape

    def backward(g):
        return (g.reshape(original),)

    return Tensor(a.data.reshape(shape), (a,), backward, "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = _t(a)
    original = a.shape

    def backward(g):
        return (_unbroadcast(g, original),)

    return Tensor(np.broadcast_to(a.data, shape), (a,), backward, "broadcast")


# -- indexing ----------------------------------------------------------


def _is_basic(key) -> bool:
    if not isinstance(key, tuple):
        key = (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, slice, np.integer)) for k in key)


def getitem(a, key) -> Tensor:
    a = _t(a)
    shape, dtype = a.shape, a.data.dtype
    basic = _is_basic(key)

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return Tensor(a.data[key], (a,), backward, "getitem")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_t(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor(out, tensors, backward, "concat")


def take(table, ids, pad: int | None = None) -> Tensor:
    """Gather rows of ``table``; ids equal to ``pad`` yield zero rows with no gradient."""
    table = _t(table)
    ids = np.asarray(ids)
    if pad is not None:
        keep = ids != pad
        safe = np.where(keep, ids, 0)
    else:
        keep, safe = None, ids
    out = table.data[safe]
    if keep is not None:
        out = out * keep[..., None].astype(out.dtype)
    shape, dtype = table.shape, table.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if keep is not None:
            np.add.at(full, safe[keep], g[keep])
        else:
            np.add.at(full, safe.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return Tensor(out, (table,), backward, "take")


def embedding_bag(table, ids, segments, n_segments: int) -> Tensor:
    """Sum-pool rows: ``out[s] = sum(table[ids[k]] for segments[k] == s)``; empty bags give zeros."""
    table = _t(table)
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    segments = np.asarray(segments, dtype=np.int64).reshape(-1)
    out = np.zeros((n_segments, table.shape[-1]), dtype=table.data.dtype)
    if ids.size:
        np.add.at(out, segments, table.data[ids])
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if ids.size:
            np.add.at(full, ids, g[segments])
        return (full,)

    return Tensor(out, (table,), backward, "embedding_bag")


# -- reductions --------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _t(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return Tensor(np.asarray(out, dtype=a.data.dtype), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- nonlinearities ----------------------------------------------------


def relu(a) -> Tensor:
    a = _t(a)
    positive = a.data > 0

    def backward(g):
        return (g * positive,)

    return Tensor(np.where(positive, a.data, 0).astype(a.data.dtype), (a,), backward, "relu")


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = _t(a)
    x = a.data
    x2 = x * x
    t = np.tanh(x * (_SQRT_2_OVER_PI + (_SQRT_2_OVER_PI * _GELU_C) * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _SQRT_2_OVER_PI + (3.0 * _SQRT_2_OVER_PI * _GELU_C) * x2
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return Tensor(out.astype(x.dtype), (a,), backward, "gelu")


def identity(a) -> Tensor:
    return _t(a)


ACTIVATIONS = {"identity": identity, "relu": relu, "gelu": gelu}


def softmax_rows(scores, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``scores``; False entries
    are excluded by an additive -inf before exponentiation, so they come out
    exactly 0 and the remaining entries renormalize.
    """
    scores = _t(scores)
    s = scores.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            full = np.broadcast_to(mask, s.shape)
        except ValueError:
            raise DimensionError(f"softmax_rows: mask {mask.shape} does not match scores {s.shape}") from None
        if not full.any(axis=-1).all():
            raise MaskError("softmax_rows: a row is fully masked (no valid attention targets)")
        s = np.where(full, s, -np.inf)
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(scores.data.dtype)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor(y, (scores,), backward, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _t(x), _t(gain), _t(bias)
    n = x.shape[-1]
    if gain.shape[-1] != n or bias.shape[-1] != n:
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {n}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        d_gain = _unbroadcast(g * xhat, gain.shape)
        d_bias = _unbroadcast(g, bias.shape)
        dxhat = g * gd
        dx = rstd * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, d_gain, d_bias

    return Tensor(out.astype(xd.dtype), (x, gain, bias), backward, "layer_norm")


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm."""
    x = _t(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return Tensor(y.astype(x.data.dtype), (x,), backward, "l2_normalize")


def cross_entropy(logits, targets) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over all leading positions."""
    logits = _t(logits)
    z = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != z.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} do not match logits {z.shape}")
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_norm
    picked = np.take_along_axis(log_p, targets[..., None], axis=-1)
    count = max(targets.size, 1)
    loss = -picked.sum() / count

    def backward(g):
        p = np.exp(log_p)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((p - onehot) * (g / count),)

    return Tensor(np.asarray(loss, dtype=z.dtype).reshape(1, 1), (logits,), backward, "cross_entropy")


def as_tensor(value) -> Tensor:
    return constant(as_array(value))
