"""Differentiable primitives.

Each function computes its forward value with numpy and, when a tape is
active, records a closure producing the input gradients. Constant operands
(floats, numpy arrays) are accepted wherever a Tensor is and never receive
gradients.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, record

LN_VAR_FLOOR = 1e-6
PROB_CLAMP = 1e-7


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcastable") from None


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record("add", (a, b), a.data + b.data, backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return record("sub", (a, b), a.data - b.data, backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    da, db = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * db, da.shape) if a.requires_grad else None
        gb = _unbroadcast(g * da, db.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", (a, b), da * db, backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return record("sigmoid", (x,), out, backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return record("tanh", (x,), out, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def backward(g):
        return (g * pos,)

    return record("relu", (x,), np.where(pos, x.data, 0.0), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where the input lies outside."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return record("clip", (x,), np.clip(x.data, lo, hi), backward)


# linear algebra and shape ------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading axes (ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch axes") from None
    da, db = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(db, -1, -2), da.shape)
        if b.requires_grad:
            if da.ndim > 2 and db.ndim == 2:
                gb = da.reshape(-1, da.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(da, -1, -2) @ g, db.shape)
        return ga, gb

    return record("matmul", (a, b), da @ db, backward)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return record("transpose", (x,), np.transpose(x.data, axes), backward)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None

    def backward(g):
        return (g.reshape(src),)

    return record("reshape", (x,), value, backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat of an empty list")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if (
            t.ndim != nd
            or t.shape[:ax] + t.shape[ax + 1 :]
            != ts[0].shape[:ax] + ts[0].shape[ax + 1 :]
        ):
            raise ShapeError("concat", *(t.shape for t in ts), detail=f"axis={axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return record("concat", ts, np.concatenate([t.data for t in ts], axis=ax), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("stack of an empty list")
    if any(t.shape != ts[0].shape for t in ts):
        raise ShapeError("stack", *(t.shape for t in ts))

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return record("stack", ts, np.stack([t.data for t in ts], axis=axis), backward)


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        value = x.data[index]
    except IndexError as e:
        raise ShapeError("slice", src, detail=str(e)) from None

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def backward(g):
        out = np.zeros(src, dtype=DTYPE)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return record("slice", (x,), np.array(value, dtype=DTYPE), backward)


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` (V, D) at integer ``ids`` of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(
            "embedding", table.shape, ids.shape, detail="table must be 2-D"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape, detail="id out of range")

    def backward(g):
        out = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return record("embedding", (table,), table.data[ids], backward)


# reductions ---------------------------------------------------------------------


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return record("sum", (x,), np.sum(x.data, axis=axis, keepdims=keepdims), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    count = x.size if axis is None else np.prod([src[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src),)

    return record("mean", (x,), np.mean(x.data, axis=axis, keepdims=keepdims), backward)


# normalisation and probabilities -----------------------------------------------


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is 0 get exactly 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return record("softmax", (x,), out, backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return record("log_softmax", (x,), out, backward)


def layer_norm(x, gain=None, bias=None, eps: float = LN_VAR_FLOOR) -> Tensor:
    """Normalise over the last axis, then apply optional affine ``gain``/``bias``.

    The variance is floored at ``eps`` before the reciprocal square root, so a
    constant row maps to zeros.
    """
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    floored = var < eps
    inv = 1.0 / np.sqrt(np.maximum(var, eps))
    xhat = xc * inv

    def backward(g):
        gm = g - g.mean(axis=-1, keepdims=True)
        proj = np.where(floored, 0.0, (g * xhat).mean(axis=-1, keepdims=True))
        return (inv * (gm - xhat * proj),)

    out = record("layer_norm", (x,), xhat, backward)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


# stochastic ---------------------------------------------------------------------


def dropout(
    x, rate: float, rng: np.random.Generator | None, train: bool = True
) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or not training."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    if rng is None:
        raise ValueError("dropout in train mode needs an rng stream")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return record("dropout", (x,), x.data * keep, backward)


def gaussian_noise_add(x, sigma: float, rng: np.random.Generator) -> Tensor:
    """Add independent N(0, sigma^2) noise; the gradient passes through unchanged."""
    x = as_tensor(x)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    noise = sigma * rng.standard_normal(x.shape) if sigma > 0 else 0.0

    def backward(g):
        return (g,)

    return record("gaussian_noise_add", (x,), x.data + noise, backward)


def grad_reverse(x) -> Tensor:
    """Identity on the forward pass; multiplies the incoming gradient by -1."""
    x = as_tensor(x)

    def backward(g):
        return (-g,)

    return record("grad_reverse", (x,), x.data, backward)


# convolution over time --------------------------------------------------------------


def conv1d(x, weight, bias=None) -> Tensor:
    """Valid 1-D convolution over time.

    ``x`` is (B, T, C_in), ``weight`` is (W, C_in, C_out); output is
    (B, T - W + 1, C_out).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if (
        x.ndim != 3
        or weight.ndim != 3
        or x.shape[2] != weight.shape[1]
        or x.shape[1] < weight.shape[0]
    ):
        raise ShapeError("conv1d", x.shape, weight.shape)
    B, T, C = x.shape
    W, _, F = weight.shape
    steps = T - W + 1
    # windows: (B, steps, W, C)
    win = np.lib.stride_tricks.sliding_window_view(x.data, W, axis=1).transpose(
        0, 1, 3, 2
    )
    cols = win.reshape(B * steps, W * C)
    wmat = weight.data.reshape(W * C, F)
    out = (cols @ wmat).reshape(B, steps, F)

    def backward(g):
        g2 = g.reshape(B * steps, F)
        gw = (cols.T @ g2).reshape(W, C, F) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, steps, W, C)
            gx = np.zeros((B, T, C), dtype=DTYPE)
            for k in range(W):
                gx[:, k : k + steps, :] += gcols[:, :, k, :]
        return gx, gw

    result = record("conv1d", (x, weight), out, backward)
    if bias is not None:
        result = add(result, bias)
    return result


def max_over_time(x, valid=None) -> Tensor:
    """Max over axis 1 of (B, T, C), ignoring steps where ``valid`` (B, T) is 0."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError("max_over_time", x.shape)
    z = x.data
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != z.shape[:2]:
            raise ShapeError("max_over_time", x.shape, valid.shape)
        if not valid.any(axis=1).all():
            raise ValueError("max_over_time: a row has no valid step")
        z = np.where(valid[:, :, None], z, -np.inf)
    arg = np.argmax(z, axis=1)
    out = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return record("max_over_time", (x,), out, backward)


# losses -------------------------------------------------------------------------------


def binary_cross_entropy(prob, target) -> Tensor:
    """Mean of -[t log p + (1 - t) log(1 - p)], with p clamped to [1e-7, 1 - 1e-7]."""
    prob = as_tensor(prob)
    t = np.broadcast_to(np.asarray(target, dtype=DTYPE), prob.shape)
    p = np.clip(prob.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (prob.data >= PROB_CLAMP) & (prob.data <= 1.0 - PROB_CLAMP)
    n = prob.size
    value = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))

    def backward(g):
        d = (-(t / p) + (1.0 - t) / (1.0 - p)) / n
        return (g * d * inside,)

    return record("binary_cross_entropy", (prob,), np.asarray(value), backward)


def categorical_cross_entropy(logits, labels, weights=None) -> Tensor:
    """Weighted sum of -log softmax(logits)[label] over rows.

    ``logits`` is (..., V); ``labels`` has the leading shape; ``weights``
    (same shape as labels, default ones) lets callers mask padding.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise ShapeError("categorical_cross_entropy", logits.shape, labels.shape)
    w = np.ones(labels.shape) if weights is None else np.asarray(weights, dtype=DTYPE)
    z = logits.data - np.max(logits.data, axis=-1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    value = -np.sum(w * picked)

    def backward(g):
        d = np.exp(logp)
        np.put_along_axis(
            d,
            labels[..., None],
            np.take_along_axis(d, labels[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        return (g * w[..., None] * d,)

    return record("categorical_cross_entropy", (logits,), np.asarray(value), backward)
