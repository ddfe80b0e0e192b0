"""Character- and word-level encoders for post text and hashtags.

The character pipeline (one per kernel size) is::

    embeddings -> conv1d -> strided max pool -> multi-head self-attention
               -> position-wise FFN -> global max pool

and the word pipeline is a plain TextCNN (conv, relu, max over time).
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import functional as F
from .initializers import conv_kernel, glorot_uniform, zeros
from .tensor import Tensor

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"

_TRAILING_PUNCT = re.compile(r"^(.*?\w)([^\w]+)$", re.UNICODE)


def normalize_tag(tag: str) -> str:
    return tag.strip().lstrip("#").lower()


def tokenize_words(text: str) -> list[str]:
    """Lowercase, split on unicode whitespace and split off trailing punctuation."""
    tokens = []
    for piece in text.lower().split():
        m = _TRAILING_PUNCT.match(piece)
        if m:
            tokens.extend(m.groups())
        else:
            tokens.append(piece)
    return tokens


def tag_string(tags: Iterable[str]) -> str:
    return " ".join(normalize_tag(t) for t in tags)


def _ordered(counts: Counter, min_count: int = 1) -> list[str]:
    kept = [t for t, c in counts.items() if c >= min_count]
    return sorted(kept, key=lambda t: (-counts[t], t))


@dataclass
class Vocabulary:
    """Token to index maps; index 0 is PAD and 1 is UNK in every map."""

    chars: list[str]
    words: list[str]
    hashtags: list[str]
    min_count: int = 50
    embed_dim: int = 100
    char_to_id: dict[str, int] = field(init=False, repr=False)
    word_to_id: dict[str, int] = field(init=False, repr=False)
    hashtag_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("chars", "words", "hashtags"):
            tokens = getattr(self, name)
            if tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
                setattr(self, name, [PAD_TOKEN, UNK_TOKEN] + list(tokens))
        self.char_to_id = {c: i for i, c in enumerate(self.chars)}
        self.word_to_id = {w: i for i, w in enumerate(self.words)}
        self.hashtag_to_id = {h: i for i, h in enumerate(self.hashtags)}

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.chars), len(self.words), len(self.hashtags)

    def to_dict(self) -> dict:
        return {"chars": self.chars, "words": self.words, "hashtags": self.hashtags,
                "min_count": self.min_count, "embed_dim": self.embed_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(list(d["chars"]), list(d["words"]), list(d["hashtags"]),
                   int(d["min_count"]), int(d["embed_dim"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1),
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(training_posts: Sequence, hashtag_min_count: int = 50,
                embed_dim: int = 100) -> Vocabulary:
    """Build the vocabulary from training posts only.

    Ids are assigned by descending frequency, ties broken lexicographically,
    so they are stable for a given corpus.
    """
    if not training_posts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    chars, words, tags = Counter(), Counter(), Counter()
    for post in training_posts:
        text = post.text.lower()
        chars.update(text)
        words.update(tokenize_words(text))
        normalized = [normalize_tag(t) for t in post.hashtags]
        tags.update(t for t in normalized if t)
        chars.update(" ".join(normalized))
    return Vocabulary(_ordered(chars), _ordered(words), _ordered(tags, hashtag_min_count),
                      hashtag_min_count, embed_dim)


@dataclass
class EncodedText:
    char_ids: np.ndarray
    word_ids: np.ndarray
    source: str  # "text" or "hashtags"


def _fit(ids: list[int], length: int) -> np.ndarray:
    out = np.full(length, PAD, dtype=np.int64)
    ids = ids[:length]
    out[:len(ids)] = ids
    return out


def encode(post, vocab: Vocabulary, max_chars: int = 100,
           max_words: int = 50) -> tuple[EncodedText, EncodedText]:
    """Encode a post's text and hashtags to fixed-length id arrays.

    Hashtags missing from the (min-count filtered) hashtag vocabulary are
    left out of the hashtag character stream as well.
    """
    text = post.text.lower()
    text_chars = [vocab.char_to_id.get(c, UNK) for c in text]
    text_words = [vocab.word_to_id.get(w, UNK) for w in tokenize_words(text)]

    tags = [normalize_tag(t) for t in post.hashtags]
    tags = [t for t in tags if t in vocab.hashtag_to_id]
    tag_chars = [vocab.char_to_id.get(c, UNK) for c in " ".join(tags)]
    tag_words = [vocab.hashtag_to_id[t] for t in tags]

    return (EncodedText(_fit(text_chars, max_chars), _fit(text_words, max_words), "text"),
            EncodedText(_fit(tag_chars, max_chars), _fit(tag_words, max_words), "hashtags"))


# -- character branch -----------------------------------------------------

def pool_stride(kernel_size: int) -> int:
    return max(kernel_size - 2, 1)


def char_pooled_length(length: int, kernel_size: int) -> int:
    return F.pooled_length(length, kernel_size, pool_stride(kernel_size))


def char_conv_pool(char_embeds: Tensor, conv_w: Tensor, conv_b: Tensor) -> Tensor:
    """Convolve ``[..., L, E]`` character embeddings and max-pool the positions.

    The pool window equals the kernel size ``s`` and the stride is
    ``max(s - 2, 1)``, giving overlapping windows.  Returns ``[..., L_s, F]``.
    """
    s = conv_w.shape[-1]
    h = F.conv1d(char_embeds, conv_w, conv_b, asymmetric=True, channels_last=True)
    return F.maxpool1d(h, window=s, stride=pool_stride(s), axis=-2)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[..., L, D] -> [..., heads, L, D/heads]``."""
    *lead, length, d = x.shape
    if d % heads:
        raise ValueError(f"width {d} is not divisible by {heads} heads")
    n = len(lead)
    x = x.reshape(*lead, length, heads, d // heads)
    return x.transpose(*range(n), n + 1, n, n + 2)


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    n = len(lead)
    return x.transpose(*range(n), n + 1, n, n + 2).reshape(*lead, length, heads * dh)


def multi_head_self_attention(h_max: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                              heads: int = 8, return_weights: bool = False):
    """Self-attention over the pooled positions with ``heads`` parallel heads.

    Each head attends with scale ``sqrt(d_attn / heads)``; head outputs are
    concatenated back to ``[..., L, d_attn]``.
    """
    q = split_heads(F.linear(h_max, wq), heads)
    k = split_heads(F.linear(h_max, wk), heads)
    v = split_heads(F.linear(h_max, wv), heads)
    out, weights = F.attention(q, k, v, return_weights=True)
    out = merge_heads(out)
    return (out, weights) if return_weights else out


def position_ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                 dropout: float = 0.0, training: bool = False, rng=None) -> Tensor:
    hidden = F.dropout(F.relu(F.linear(x, w1, b1)), dropout, training, rng)
    return F.linear(hidden, w2, b2)


def char_ffn_pool(o: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                  dropout: float = 0.5, training: bool = False, rng=None) -> Tensor:
    """Position-wise FFN on ``[..., L, d_attn]`` then max over positions."""
    return F.global_max_pool(position_ffn(o, w1, b1, w2, b2, dropout, training, rng), axis=-2)


def char_branch(char_embeds: Tensor, params: dict, kernel_sizes: Sequence[int], heads: int,
                dropout: float = 0.5, training: bool = False, rng=None, prefix: str = ""):
    """Run one character pipeline per kernel size.

    Returns the concatenated feature ``[..., len(kernel_sizes) * out]`` and
    the list of pooled conv matrices (needed by cross-modal fusion).
    """
    feats, pooled = [], []
    for s in kernel_sizes:
        p = f"{prefix}s{s}."
        h_max = char_conv_pool(char_embeds, params[p + "conv_w"], params[p + "conv_b"])
        o = multi_head_self_attention(h_max, params[p + "wq"], params[p + "wk"],
                                      params[p + "wv"], heads)
        feats.append(char_ffn_pool(o, params[p + "ffn_w1"], params[p + "ffn_b1"],
                                   params[p + "ffn_w2"], params[p + "ffn_b2"],
                                   dropout, training, rng))
        pooled.append(h_max)
    return F.concat(feats, axis=-1), pooled


def init_char_params(rng, embed_dim: int, filters: int, attn_dim: int, ffn_hidden: int,
                     out_dim: int, kernel_sizes: Sequence[int], prefix: str = "") -> dict:
    params = {}
    for s in kernel_sizes:
        p = f"{prefix}s{s}."
        params[p + "conv_w"] = conv_kernel(rng, filters, embed_dim, s)
        params[p + "conv_b"] = zeros(filters)
        for name in ("wq", "wk", "wv"):
            params[p + name] = glorot_uniform(rng, (filters, attn_dim))
        params[p + "ffn_w1"] = glorot_uniform(rng, (attn_dim, ffn_hidden))
        params[p + "ffn_b1"] = zeros(ffn_hidden)
        params[p + "ffn_w2"] = glorot_uniform(rng, (ffn_hidden, out_dim))
        params[p + "ffn_b2"] = zeros(out_dim)
    return params


# -- word branch ----------------------------------------------------------

def word_branch(word_embeds: Tensor, params: dict, kernel_sizes: Sequence[int],
                prefix: str = "") -> Tensor:
    """TextCNN: per kernel size conv -> relu -> max over time, concatenated."""
    feats = []
    for s in kernel_sizes:
        p = f"{prefix}s{s}."
        h = F.conv1d(word_embeds, params[p + "conv_w"], params[p + "conv_b"],
                     asymmetric=True, channels_last=True)
        feats.append(F.global_max_pool(F.relu(h), axis=-2))
    return F.concat(feats, axis=-1)


def init_word_params(rng, embed_dim: int, filters: int, kernel_sizes: Sequence[int],
                     prefix: str = "") -> dict:
    params = {}
    for s in kernel_sizes:
        params[f"{prefix}s{s}.conv_w"] = conv_kernel(rng, filters, embed_dim, s)
        params[f"{prefix}s{s}.conv_b"] = zeros(filters)
    return params


def init_embedding(rng, vocab_size: int, dim: int) -> Tensor:
    table = glorot_uniform(rng, (vocab_size, dim))
    table.data[PAD] = 0.0
    return table
