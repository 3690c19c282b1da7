"""Differentiable operations.

Every op takes :class:`Tensor` (or array-like constants, which are lifted to
constants of the tensor operand's dtype) and returns a new node. Elementwise
ops follow numpy broadcasting; gradients are summed back to operand shapes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, accumulate, grad_enabled, make_node

LEAKY_SLOPE = 0.01


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return np.asarray(g)


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def backward(g):
        accumulate(a, unbroadcast(g, a.shape))
        accumulate(b, unbroadcast(g, b.shape))

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        accumulate(a, unbroadcast(g, a.shape))
        accumulate(b, unbroadcast(-g, b.shape))

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            accumulate(a, unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            accumulate(b, unbroadcast(g * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: accumulate(a, -g), "neg")


def _gemm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # stacked (..., K) @ (K, N) is much slower in numpy than one flat 2-D product
    if x.ndim <= 2:
        return x @ w
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(*x.shape[:-1], w.shape[1])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., K) @ (K, N) -> (..., N)``."""
    a, b = _pair(a, b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = _gemm(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            accumulate(a, _gemm(g, b.data.T))
        if b.requires_grad:
            k, n = b.shape
            accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))

    return make_node(out, (a, b), backward, "matmul")


# ------------------------------------------------------------- nonlinearities

def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_node(s, (x,), lambda g: accumulate(x, g * s * (1.0 - s)), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_node(t, (x,), lambda g: accumulate(x, g * (1.0 - t * t)), "tanh")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_node(np.where(pos, x.data, 0).astype(x.dtype), (x,),
                     lambda g: accumulate(x, g * pos), "relu")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    factor = np.where(x.data > 0, x.dtype.type(1.0), x.dtype.type(slope))
    return make_node(x.data * factor, (x,), lambda g: accumulate(x, g * factor), "leaky_relu")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return make_node(e, (x,), lambda g: accumulate(x, g * e), "exp")


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: accumulate(x, g / x.data), "log")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        accumulate(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return make_node(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        accumulate(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return make_node(out, (x,), backward, "log_softmax")


def logsumexp(x: Tensor, axis: int, mask: np.ndarray | None = None) -> Tensor:
    """Stable ``log(sum(exp(x)))`` over ``axis``; masked-out entries are ignored.

    ``mask`` broadcasts against ``x``. Every reduced slice must keep at least
    one entry.
    """
    data = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        data = np.where(mask, data, -np.inf)
    m = data.max(axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("logsumexp: a reduced slice has no unmasked entries")
    e = np.exp(data - m)
    total = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(total)).squeeze(axis)
    weights = e / total

    def backward(g):
        accumulate(x, (np.expand_dims(g, axis) * weights).astype(x.dtype, copy=False))

    return make_node(out.astype(x.dtype, copy=False), (x,), backward, "logsumexp")


# ----------------------------------------------------------------- reductions

def _normalize_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        accumulate(x, np.broadcast_to(g, x.shape).copy())

    return make_node(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# ------------------------------------------------------------ shape handling

def reshape(x: Tensor, shape) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: accumulate(x, g.reshape(x.shape)), "reshape")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        accumulate(x, gx)

    return make_node(np.array(out, copy=True), (x,), backward, "getitem")


def unstack(x: Tensor, axis: int = 0) -> list[Tensor]:
    """Split ``x`` into its slices along ``axis``.

    Cheaper than repeated indexing for long sequences: the slices share one
    private gradient buffer instead of each allocating a full-size gradient.
    """
    axis = axis % x.ndim
    moved = np.moveaxis(x.data, axis, 0)
    if not (grad_enabled() and x.requires_grad):
        return [Tensor(np.array(piece, copy=True), _op="unstack") for piece in moved]
    hub = make_node(x.data, (x,), lambda g: accumulate(x, g), "unstack")

    def piece_backward(k):
        def backward(g):
            if hub.grad is None:
                hub.grad = np.zeros_like(x.data)
            np.moveaxis(hub.grad, axis, 0)[k] += g
        return backward

    return [make_node(np.array(piece, copy=True), (hub,), piece_backward(k), "unstack")
            for k, piece in enumerate(moved)]


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=ax)):
            accumulate(t, np.ascontiguousarray(piece))

    return make_node(out, tensors, backward, "concat")


# ---------------------------------------------------------- network layers

def embedding(weight: Tensor, ids: np.ndarray, padding_idx: int | None = None) -> Tensor:
    """Row lookup ``weight[ids]``. The ``padding_idx`` row never receives gradient."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of shape {weight.shape}")
    out = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        flat = ids.reshape(-1)
        if flat.size:
            # sort-and-segment-sum: a deterministic, much faster np.add.at
            order = np.argsort(flat, kind="stable")
            rows, starts = np.unique(flat[order], return_index=True)
            gw[rows] = np.add.reduceat(g.reshape(-1, weight.shape[1])[order], starts, axis=0)
        if padding_idx is not None:
            gw[padding_idx] = 0
        accumulate(weight, gw)

    return make_node(out, (weight,), backward, "embedding")


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid 1-D convolution over the time axis.

    ``x`` is ``(B, L, E)``, ``kernel`` is ``(K, E, N)``; output is
    ``(B, L - K + 1, N)`` with ``out[b, j] = sum_k x[b, j + k] @ kernel[k]``.
    """
    if x.ndim != 3 or kernel.ndim != 3 or x.shape[2] != kernel.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} and kernel {kernel.shape} do not conform")
    span, emb, n_out = kernel.shape
    batch, length, _ = x.shape
    out_len = length - span + 1
    if out_len < 1:
        raise ShapeError(f"conv1d: input {x.shape} shorter than kernel span {span}")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, span, axis=1)  # (B, Lout, E, K)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(batch * out_len, span * emb)
    flat_kernel = kernel.data.reshape(span * emb, n_out)
    out = (cols @ flat_kernel).reshape(batch, out_len, n_out)
    parents: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        out = out + bias.data
        parents = (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(-1, n_out)
        if kernel.requires_grad:
            accumulate(kernel, (cols.T @ g2).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ flat_kernel.T).reshape(batch, out_len, span, emb)
            gx = np.zeros_like(x.data)
            for k in range(span):
                gx[:, k:k + out_len, :] += gcols[:, :, k, :]
            accumulate(x, gx)

    return make_node(out, parents, backward, "conv1d")


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)``."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return mul(x, Tensor(keep))


def nll(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``(B, C)`` log-probs."""
    targets = np.asarray(targets)
    if log_probs.ndim != 2 or targets.shape != (log_probs.shape[0],):
        raise ShapeError(f"nll: log-probs {log_probs.shape} and targets {targets.shape} do not conform")
    n = targets.shape[0]
    rows = np.arange(n)
    out = -log_probs.data[rows, targets].mean()

    def backward(g):
        gx = np.zeros_like(log_probs.data)
        gx[rows, targets] = -g / n
        accumulate(log_probs, gx)

    return make_node(np.asarray(out, dtype=log_probs.dtype), (log_probs,), backward, "nll")
