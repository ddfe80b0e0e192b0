"""Cross-modal fusion of hashtag and text features, and the location head."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import functional as F
from .initializers import glorot_uniform, ones, zeros
from .tensor import Tensor
from .text import position_ffn

COMPONENTS = ("text_c", "text_w", "tag_c", "tag_w", "img", "cro")


def cross_modal_attention(h_tag: Tensor, h_text: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                          return_weights: bool = False):
    """Single-head attention with hashtag queries over text keys and values.

    ``h_tag`` is ``[..., L_t, F]`` and ``h_text`` is ``[..., L_x, F]``; the
    result is ``[..., L_t, d]`` where ``d`` is the projection width (also
    the scale in ``sqrt(d)``).
    """
    q = F.linear(h_tag, wq)
    k = F.linear(h_text, wk)
    v = F.linear(h_text, wv)
    return F.attention(q, k, v, return_weights=return_weights)


def fusion_ffn_norm(o_cro: Tensor, params: dict, prefix: str, dropout: float = 0.5,
                    training: bool = False, rng=None) -> Tensor:
    """FFN, layer norm and max over positions: ``[..., L_t, d] -> [..., out]``."""
    a = position_ffn(o_cro, params[prefix + "w1"], params[prefix + "b1"],
                     params[prefix + "w2"], params[prefix + "b2"], dropout, training, rng)
    normed = F.layer_norm(a, params[prefix + "ln_gain"], params[prefix + "ln_shift"])
    return F.global_max_pool(normed, axis=-2)


def early_fusion(tag_pooled: Sequence[Tensor], text_pooled: Sequence[Tensor],
                 kernel_sizes: Sequence[int], params: dict, reduce: str = "mean",
                 dropout: float = 0.5, training: bool = False, rng=None) -> Tensor:
    """Fuse the pooled conv matrices per kernel size, then mean (or concat)."""
    outs = []
    for s, h_tag, h_text in zip(kernel_sizes, tag_pooled, text_pooled):
        p = f"fusion.s{s}."
        o = cross_modal_attention(h_tag, h_text, params[p + "wq"], params[p + "wk"],
                                  params[p + "wv"])
        outs.append(fusion_ffn_norm(o, params, p, dropout, training, rng))
    if reduce == "concat":
        return F.concat(outs, axis=-1)
    if reduce != "mean":
        raise ValueError(f"unknown fusion reduce {reduce!r}")
    total = outs[0]
    for o in outs[1:]:
        total = total + o
    return total * (1.0 / len(outs))


def late_fusion_variant(f_tag_c: Tensor, f_text_c: Tensor, params: dict, n_chunks: int,
                        dropout: float = 0.5, training: bool = False, rng=None) -> Tensor:
    """Fuse the final character vectors instead of the conv matrices.

    Each ``[..., n_chunks * w]`` vector is viewed as a length-``n_chunks``
    sequence of width-``w`` chunks and passed through the same attention,
    FFN and layer-norm stages.
    """
    *lead, width = f_tag_c.shape
    tag = f_tag_c.reshape(*lead, n_chunks, width // n_chunks)
    text = f_text_c.reshape(*lead, n_chunks, width // n_chunks)
    o = cross_modal_attention(tag, text, params["late.wq"], params["late.wk"], params["late.wv"])
    return fusion_ffn_norm(o, params, "late.", dropout, training, rng)


def init_fusion_params(rng, in_dim: int, attn_dim: int, hidden: int, out_dim: int,
                       kernel_sizes: Sequence[int] | None = None) -> dict:
    """Early-fusion params per kernel size, or late-fusion params when
    ``kernel_sizes`` is None."""
    prefixes = ["late."] if kernel_sizes is None else [f"fusion.s{s}." for s in kernel_sizes]
    params = {}
    for p in prefixes:
        for name in ("wq", "wk", "wv"):
            params[p + name] = glorot_uniform(rng, (in_dim, attn_dim))
        params[p + "w1"] = glorot_uniform(rng, (attn_dim, hidden))
        params[p + "b1"] = zeros(hidden)
        params[p + "w2"] = glorot_uniform(rng, (hidden, out_dim))
        params[p + "b2"] = zeros(out_dim)
        params[p + "ln_gain"] = ones(out_dim)
        params[p + "ln_shift"] = zeros(out_dim)
    return params


def component_offsets(widths: dict) -> dict[str, tuple[int, int]]:
    """``[start, stop)`` of every component inside the post representation."""
    offsets, start = {}, 0
    for name in COMPONENTS:
        offsets[name] = (start, start + widths[name])
        start += widths[name]
    return offsets


def concat_representation(components: dict, widths: dict, batch_shape=()) -> Tensor:
    """Concatenate components in fixed order; missing ones become zeros."""
    parts = []
    for name in COMPONENTS:
        t = components.get(name)
        if t is None:
            t = Tensor(np.zeros((*batch_shape, widths[name])))
        elif t.shape[-1] != widths[name]:
            raise ValueError(f"component {name} has width {t.shape[-1]}, expected {widths[name]}")
        parts.append(t)
    return F.concat(parts, axis=-1)


def logits(f_post: Tensor, w_p: Tensor) -> Tensor:
    return F.linear(f_post, w_p)


def predict(f_post: Tensor, w_p: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Location probabilities and argmax labels (ties go to the lowest index)."""
    probs = F.softmax(logits(f_post, w_p)).data
    return probs, np.argmax(probs, axis=-1)


def loss(scores: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true labels, from raw scores."""
    scores = scores if scores.ndim == 2 else scores.reshape(1, -1)
    return F.cross_entropy(scores, np.atleast_1d(labels))


def init_head(n_features: int, n_locations: int) -> dict:
    if n_locations < 2:
        raise ValueError("need at least two locations")
    return {"head.w": zeros(n_features, n_locations)}
