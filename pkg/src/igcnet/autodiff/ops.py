"""Differentiable operations over :class:`Tensor`.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per parent.  Broadcasting follows
numpy rules; gradients are summed back over broadcast axes.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import DimensionError, DomainError, Tensor, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- arithmetic -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.values + b.values, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.values - b.values, (a, b), back, "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.values, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.values, b.values

    def back(g):
        ga = _unbroadcast(g * bv, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(av * bv, (a, b), back, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape)
        if b.requires_grad:
            if av.ndim > 2 and bv.ndim == 2:
                # collapse batch axes into one GEMM
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(av @ bv, (a, b), back, "matmul")


# -- structural -----------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of zero tensors")
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        res = []
        for i, t in enumerate(ts):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(sl)] if t.requires_grad else None)
        return tuple(res)

    return make_result(out, ts, back, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("stack of zero tensors")
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.values for t in ts], axis=axis)
    ax = axis % out.ndim

    def back(g):
        return tuple(np.take(g, i, axis=ax) if t.requires_grad else None for i, t in enumerate(ts))

    return make_result(out, ts, back, "stack")


def slice_(a, index) -> Tensor:
    """Basic (view) indexing; the gradient scatters back into zeros."""
    a = as_tensor(a)
    try:
        out = a.values[index]
    except IndexError as exc:
        raise DimensionError(f"slice: {exc}") from exc

    def back(g):
        full = np.zeros_like(a.values)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(np.array(out), (a,), back, "slice")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def gather(a, idx: np.ndarray) -> Tensor:
    """``a.values[idx]`` along the first axis with repeated-index accumulation."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        full = np.zeros_like(a.values)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(a.values[idx], (a,), back, "gather")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from exc
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def detach(a) -> Tensor:
    """Graph-free copy; no gradient ever flows through it."""
    a = as_tensor(a)
    return Tensor(a.values.copy())


# -- elementwise nonlinearities --------------------------------------------

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.values)
    return make_result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.values)
    return make_result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.values > 0
    return make_result(np.where(pos, a.values, 0.0), (a,), lambda g: (g * pos,), "relu")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.values
    neg_part = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    dydx = np.where(x > 0, 1.0, neg_part + alpha)
    return make_result(out, (a,), lambda g: (g * dydx,), "elu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.values)
    return make_result(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise DomainError("log of an empty tensor")
    if np.any(a.values <= 0):
        raise DomainError("log of a non-positive value")
    x = a.values
    return make_result(np.log(x), (a,), lambda g: (g / x,), "log")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DomainError("softmax over an empty axis")
    x = a.values
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return make_result(s, (a,), back, "softmax")


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return make_result(y, (a,), back, "layer_norm")


def dropout(a, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or outside training."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng stream")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return make_result(a.values * keep, (a,), lambda g: (g * keep,), "dropout")


# -- reductions and losses ----------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise DomainError("mean of an empty tensor")
    out = a.values.mean(axis=axis, keepdims=keepdims)
    n = a.size // max(out.size, 1) if axis is not None else a.size

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return make_result(out, (a,), back, "mean")


def mse_loss(pred, target, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared error over the entries selected by ``mask``.

    ``mask`` broadcasts against ``pred``; the mean runs over selected
    entries of the full (broadcast) shape.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    _check_broadcast(pred, target, "mse_loss")
    diff = pred.values - target.values
    if mask is None:
        w = np.ones_like(diff)
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=np.float64), diff.shape)
    count = w.sum()
    if count == 0:
        raise DomainError("mse_loss with every entry masked out")
    loss = np.sum(w * diff * diff) / count

    def back(g):
        d = (2.0 * g / count) * w * diff
        gp = _unbroadcast(d, pred.shape) if pred.requires_grad else None
        gt = _unbroadcast(-d, target.shape) if target.requires_grad else None
        return gp, gt

    return make_result(np.asarray(loss), (pred, target), back, "mse_loss")


def bce_with_logits(logits, target: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean binary cross-entropy computed from logits."""
    logits = as_tensor(logits)
    y = np.asarray(target, dtype=np.float64)
    x = logits.values
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    w = np.ones_like(x) if mask is None else np.broadcast_to(np.asarray(mask, dtype=np.float64), x.shape)
    count = w.sum()
    if count == 0:
        raise DomainError("bce_with_logits with every entry masked out")
    loss = np.sum(w * per) / count

    def back(g):
        return ((g / count) * w * (_sigmoid(x) - y),)

    return make_result(np.asarray(loss), (logits,), back, "bce_with_logits")


def lstm_recurrence(xw, w_hh, mask: np.ndarray) -> Tensor:
    """Fused LSTM recurrence over a padded batch.

    ``xw`` holds the input projections ``x_t W_ih + b`` shaped (B, T, 4H)
    with gate order (i, f, g, o); ``w_hh`` is (H, 4H).  Steps with
    ``mask == 0`` carry the previous state unchanged.  Returns hidden
    states (B, T, H).
    """
    from .._kernels import lstm_backward, lstm_forward

    xw, w_hh = as_tensor(xw), as_tensor(w_hh)
    if xw.ndim != 3 or w_hh.ndim != 2 or w_hh.shape[1] != 4 * w_hh.shape[0] or xw.shape[2] != w_hh.shape[1]:
        raise DimensionError(f"lstm_recurrence: bad shapes xw={xw.shape} w_hh={w_hh.shape}")
    m = np.array(np.broadcast_to(np.asarray(mask, dtype=np.float64), xw.shape[:2]).T, order="C")
    xw_t = np.array(np.swapaxes(xw.values, 0, 1), order="C")
    w = np.array(w_hh.values, order="C")
    h_all, cache = lstm_forward(xw_t, w, m)

    def back(g):
        dxw, dw = lstm_backward(np.array(np.swapaxes(g, 0, 1), order="C"), w, m, h_all, cache)
        return np.swapaxes(dxw, 0, 1), dw

    return make_result(np.swapaxes(h_all, 0, 1), (xw, w_hh), back, "lstm")
