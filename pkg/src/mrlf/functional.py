"""Differentiable kernels used by the MRLF branches.

Each function takes and returns :class:`~mrlf.tensor.Tensor` objects and
registers its own backward rule; none of them are composed from smaller
recorded ops, so the graph stays short.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_result


def _same_padding(k: int, asymmetric: bool) -> tuple[int, int]:
    if k < 1:
        raise ValueError(f"kernel size must be positive, got {k}")
    if k % 2 == 1:
        return (k - 1) // 2, (k - 1) // 2
    if not asymmetric:
        raise ValueError(f"even kernel size {k} needs asymmetric=True")
    left = (k - 1) // 2
    return left, k - 1 - left


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor, asymmetric: bool = False,
           channels_last: bool = False) -> Tensor:
    """Zero-padded "same" 1-D cross-correlation.

    Layout is ``[..., C_in, L]`` (or ``[..., L, C_in]`` with
    ``channels_last``); ``kernels`` is ``[C_out, C_in, K]``.  Odd ``K``
    pads ``(K-1)/2`` on both sides.  Even ``K`` is only accepted with
    ``asymmetric=True`` and pads one position less on the left.
    """
    w, b = kernels.data, bias.data
    c_out, c_in, k = w.shape
    xd = x.data if channels_last else np.swapaxes(x.data, -1, -2)
    if xd.shape[-1] != c_in:
        raise ValueError(f"conv1d expects {c_in} input channels, got {xd.shape[-1]}")
    if b.shape != (c_out,):
        raise ValueError(f"conv1d bias must have shape ({c_out},), got {b.shape}")
    left, right = _same_padding(k, asymmetric)
    length = xd.shape[-2]
    lead = xd.shape[:-2]

    pad = [(0, 0)] * len(lead) + [(left, right), (0, 0)]
    xp = np.pad(xd, pad)
    # patches[..., i, d, c] = xp[..., i + d, c]
    patches = np.stack([xp[..., d:d + length, :] for d in range(k)], axis=-2)
    cols = patches.reshape(-1, k * c_in)
    wk = w.transpose(2, 1, 0).reshape(k * c_in, c_out)
    out = (cols @ wk + b).reshape(*lead, length, c_out)

    def backward(g):
        if not channels_last:
            g = np.swapaxes(g, -1, -2)
        g2 = g.reshape(-1, c_out)
        gw = (cols.T @ g2).reshape(k, c_in, c_out).transpose(2, 1, 0)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wk.T).reshape(*lead, length, k, c_in)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for d in range(k):
            gxp[..., d:d + length, :] += gcols[..., d, :]
        gx = gxp[..., left:left + length, :]
        if not channels_last:
            gx = np.swapaxes(gx, -1, -2)
        return gx, gw, gb

    if not channels_last:
        out = np.swapaxes(out, -1, -2)
    return make_result(np.ascontiguousarray(out), (x, kernels, bias), backward, "conv1d")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded "same" 2-D cross-correlation on ``[..., C_in, H, W]``."""
    w, b = kernels.data, bias.data
    c_out, c_in, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d needs odd kernel sizes")
    xd = x.data
    if xd.shape[-3] != c_in:
        raise ValueError(f"conv2d expects {c_in} input channels, got {xd.shape[-3]}")
    lead = xd.shape[:-3]
    h, wd = xd.shape[-2:]
    ph, pw = kh // 2, kw // 2
    xl = np.moveaxis(xd, -3, -1)  # [..., H, W, C]
    xp = np.pad(xl, [(0, 0)] * len(lead) + [(ph, ph), (pw, pw), (0, 0)])
    offsets = [(dy, dx) for dy in range(kh) for dx in range(kw)]
    patches = np.stack([xp[..., dy:dy + h, dx:dx + wd, :] for dy, dx in offsets], axis=-2)
    cols = patches.reshape(-1, kh * kw * c_in)
    wk = w.transpose(2, 3, 1, 0).reshape(kh * kw * c_in, c_out)
    out = (cols @ wk + b).reshape(*lead, h, wd, c_out)

    def backward(g):
        g2 = np.moveaxis(g, -3, -1).reshape(-1, c_out)
        gw = (cols.T @ g2).reshape(kh, kw, c_in, c_out).transpose(3, 2, 0, 1)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wk.T).reshape(*lead, h, wd, kh * kw, c_in)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for n, (dy, dx) in enumerate(offsets):
            gxp[..., dy:dy + h, dx:dx + wd, :] += gcols[..., n, :]
        gx = np.moveaxis(gxp[..., ph:ph + h, pw:pw + wd, :], -1, -3)
        return gx, gw, gb

    out = np.ascontiguousarray(np.moveaxis(out, -1, -3))
    return make_result(out, (x, kernels, bias), backward, "conv2d")


def pooled_length(length: int, window: int, stride: int) -> int:
    return (length - window) // stride + 1


def maxpool1d(x: Tensor, window: int, stride: int, axis: int = -1) -> Tensor:
    """Strided max pooling; trailing partial windows are dropped.

    Ties send the gradient to the first maximal position.
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    axis = axis % x.ndim
    length = x.shape[axis]
    if window > length:
        raise ValueError(f"pool window {window} exceeds length {length}")
    n_out = pooled_length(length, window, stride)
    idx = np.arange(n_out)[:, None] * stride + np.arange(window)[None, :]
    xm = np.moveaxis(x.data, axis, -1)
    windows = xm[..., idx]  # [..., n_out, window]
    arg = np.argmax(windows, axis=-1)[..., None]
    out = np.take_along_axis(windows, arg, axis=-1)[..., 0]
    moved_shape = xm.shape

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        gw = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg, gm[..., None], axis=-1)
        gx = np.zeros(moved_shape, dtype=g.dtype)
        for w in range(window):
            gx[..., idx[:, w]] += gw[..., w]
        return (np.moveaxis(gx, -1, axis),)

    out = np.ascontiguousarray(np.moveaxis(out, -1, axis))
    return make_result(out, (x,), backward, "maxpool1d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing dimension: ``x @ weight + bias``."""
    xd, w = x.data, weight.data
    if xd.shape[-1] != w.shape[0]:
        raise ValueError(f"linear expects trailing dim {w.shape[0]}, got {xd.shape[-1]}")
    x2 = xd.reshape(-1, w.shape[0])
    out = x2 @ w
    parents = (x, weight)
    if bias is not None:
        if bias.shape != (w.shape[1],):
            raise ValueError(f"linear bias must have shape ({w.shape[1]},)")
        out = out + bias.data
        parents = (x, weight, bias)
    out = out.reshape(*xd.shape[:-1], w.shape[1])

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        grads = [(g2 @ w.T).reshape(xd.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result(out, parents, backward, "linear")


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the trailing axis (max-subtracted)."""
    s = _softmax(x.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_result(s, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    ``logits`` is ``[B, m]``.  Computed in fused log-softmax form.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    z = logits.data
    if z.ndim != 2 or z.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {z.shape} do not match {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ValueError(f"labels must lie in [0, {z.shape[1]})")
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return make_result(np.asarray(loss), (logits,), backward, "cross_entropy")


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean and unit (population) variance."""
    xd = x.data
    d = xd.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ValueError(f"layer_norm gain/shift must have shape ({d},)")
    mu = xd.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(xd.var(axis=-1, keepdims=True) + eps)
    xhat = (xd - mu) * inv_std
    out = xhat * gain.data + shift.data

    def backward(g):
        gxhat = g * gain.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gain, shift), backward, "layer_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when not training or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def embedding_lookup(ids, table: Tensor, padding_idx: int | None = None) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape).

    The ``padding_idx`` row never receives gradient.
    """
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ValueError(f"embedding ids must lie in [0, {v})")

    def backward(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        if padding_idx is not None:
            gt[padding_idx] = 0.0
        return (gt,)

    return make_result(table.data[ids], (table,), backward, "embedding")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
                a != b for i, (a, b) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise ValueError("concat shapes must agree off the concat axis")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(out, tuple(tensors), backward, "concat")


def global_max_pool(x: Tensor, axis: int = -2) -> Tensor:
    """Max over the position axis (default: second to last)."""
    return x.max(axis)


def global_avg_pool(x: Tensor, axes=(-2, -1)) -> Tensor:
    return x.mean(axis=tuple(a % x.ndim for a in axes))


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """Scaled dot-product attention ``softmax(q kᵀ / sqrt(d)) v``.

    ``q`` is ``[..., Lq, d]``, ``k`` is ``[..., Lk, d]`` and ``v`` is
    ``[..., Lk, dv]``; ``d`` is the key width.
    """
    d = k.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d))
    weights = softmax(scores)
    out = weights @ v
    return (out, weights) if return_weights else out
