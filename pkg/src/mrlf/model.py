"""Full MRLF forward pass over a batch of encoded posts."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .fusion import (component_offsets, concat_representation, early_fusion, init_fusion_params,
                     init_head, late_fusion_variant, logits)
from .image import grid_head, image_head, init_image_params
from .tensor import Tensor
from .text import (PAD, char_branch, char_pooled_length, init_char_params, init_embedding,
                   init_word_params, word_branch)

MODALITIES = ("text", "tags", "image")


@dataclass(frozen=True)
class ModelConfig:
    n_chars: int
    n_words: int
    n_hashtags: int
    n_locations: int
    embed_dim: int = 100
    max_chars: int = 100
    max_words: int = 50
    char_kernel_sizes: tuple = (3, 4, 5, 6)
    char_filters: int = 100
    attn_dim: int = 96
    heads: int = 8
    ffn_hidden: int = 200
    char_out: int = 100
    word_kernel_sizes: tuple = (1, 2, 3, 4)
    word_filters: int = 100
    image_mode: str = "feature"
    image_feature_dim: int = 512
    grid_channels: int = 3
    image_out: int = 100
    fusion: str = "early"
    fusion_reduce: str = "mean"
    fusion_hidden: int = 200
    fusion_out: int = 100
    dropout: float = 0.5
    share_char_embeddings: bool = False
    modalities: tuple = MODALITIES

    def __post_init__(self):
        object.__setattr__(self, "char_kernel_sizes", tuple(self.char_kernel_sizes))
        object.__setattr__(self, "word_kernel_sizes", tuple(self.word_kernel_sizes))
        object.__setattr__(self, "modalities", tuple(m for m in MODALITIES if m in self.modalities))
        if self.attn_dim % self.heads:
            raise ValueError(f"attn_dim {self.attn_dim} not divisible by {self.heads} heads")
        if self.fusion not in ("early", "late", "none"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.image_mode not in ("feature", "grid"):
            raise ValueError(f"unknown image mode {self.image_mode!r}")
        if max(self.char_kernel_sizes) > self.max_chars:
            raise ValueError("char kernel larger than max_chars")

    @property
    def widths(self) -> dict:
        n_c = len(self.char_kernel_sizes)
        cro = self.fusion_out * (n_c if self.fusion == "early" and self.fusion_reduce == "concat"
                                 else 1)
        return {"text_c": n_c * self.char_out, "text_w": len(self.word_kernel_sizes) * self.word_filters,
                "tag_c": n_c * self.char_out, "tag_w": len(self.word_kernel_sizes) * self.word_filters,
                "img": self.image_out, "cro": cro}

    @property
    def representation_dim(self) -> int:
        return sum(self.widths.values())

    @property
    def offsets(self) -> dict:
        return component_offsets(self.widths)

    def pooled_lengths(self) -> dict:
        return {s: char_pooled_length(self.max_chars, s) for s in self.char_kernel_sizes}

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("char_kernel_sizes", "word_kernel_sizes", "modalities"):
            d[k] = list(d[k])
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """All learnable weights, in a fixed insertion order (checkpoint order)."""
    params: dict[str, Tensor] = {}
    e = cfg.embed_dim
    params["emb.char.text"] = init_embedding(rng, cfg.n_chars, e)
    if not cfg.share_char_embeddings:
        params["emb.char.tag"] = init_embedding(rng, cfg.n_chars, e)
    params["emb.word.text"] = init_embedding(rng, cfg.n_words, e)
    params["emb.word.tag"] = init_embedding(rng, cfg.n_hashtags, e)
    for src in ("text", "tag"):
        params.update(init_char_params(rng, e, cfg.char_filters, cfg.attn_dim, cfg.ffn_hidden,
                                       cfg.char_out, cfg.char_kernel_sizes, f"char.{src}."))
        params.update(init_word_params(rng, e, cfg.word_filters, cfg.word_kernel_sizes,
                                       f"word.{src}."))
    if cfg.image_mode == "feature":
        params.update(init_image_params(rng, cfg.image_out, feature_dim=cfg.image_feature_dim))
    else:
        params.update(init_image_params(rng, cfg.image_out, grid_channels=cfg.grid_channels))
    if cfg.fusion == "early":
        params.update(init_fusion_params(rng, cfg.char_filters, cfg.attn_dim, cfg.fusion_hidden,
                                         cfg.fusion_out, cfg.char_kernel_sizes))
    elif cfg.fusion == "late":
        params.update(init_fusion_params(rng, cfg.char_out, cfg.attn_dim, cfg.fusion_hidden,
                                         cfg.fusion_out))
    params.update(init_head(cfg.representation_dim, cfg.n_locations))
    return params


@dataclass
class Batch:
    """Encoded posts stacked along axis 0.

    ``image`` is ``[B, D]`` aggregated features in feature mode, or
    ``[B, M, C, H, W]`` grids with ``image_weights`` ``[B, M]`` in grid mode.
    """

    text_chars: np.ndarray
    tag_chars: np.ndarray
    text_words: np.ndarray
    tag_words: np.ndarray
    image: np.ndarray
    image_present: np.ndarray
    labels: np.ndarray
    image_weights: np.ndarray | None = None
    index: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.labels)


def representation(params: dict, cfg: ModelConfig, batch: Batch, training: bool = False,
                   rng=None) -> tuple[Tensor, dict]:
    """Post representation ``F_p`` ``[B, P]`` plus its named components.

    Components of masked-out modalities are not computed; they enter the
    concatenation as zeros.  The fused component needs both text and tags.
    """
    comps: dict[str, Tensor] = {}
    use = set(cfg.modalities)
    drop = cfg.dropout
    pooled = {}
    char_tables = {"text": params["emb.char.text"],
                   "tag": params["emb.char.text" if cfg.share_char_embeddings else "emb.char.tag"]}
    sources = [("text", "text", batch.text_chars, batch.text_words),
               ("tags", "tag", batch.tag_chars, batch.tag_words)]
    for modality, src, chars, words in sources:
        if modality not in use:
            continue
        ce = F.embedding_lookup(chars, char_tables[src], padding_idx=PAD)
        comps[f"{src}_c"], pooled[src] = char_branch(
            ce, params, cfg.char_kernel_sizes, cfg.heads, drop, training, rng, f"char.{src}.")
        we = F.embedding_lookup(words, params[f"emb.word.{src}"], padding_idx=PAD)
        comps[f"{src}_w"] = word_branch(we, params, cfg.word_kernel_sizes, f"word.{src}.")

    if "image" in use:
        if cfg.image_mode == "feature":
            comps["img"] = image_head(Tensor(batch.image), params)
        else:
            comps["img"] = grid_head(Tensor(batch.image), batch.image_weights, params)

    if "text" in use and "tags" in use:
        if cfg.fusion == "early":
            comps["cro"] = early_fusion(pooled["tag"], pooled["text"], cfg.char_kernel_sizes,
                                        params, cfg.fusion_reduce, drop, training, rng)
        elif cfg.fusion == "late":
            comps["cro"] = late_fusion_variant(comps["tag_c"], comps["text_c"], params,
                                               len(cfg.char_kernel_sizes), drop, training, rng)

    f_post = concat_representation(comps, cfg.widths, (len(batch),))
    return f_post, comps


def forward(params: dict, cfg: ModelConfig, batch: Batch, training: bool = False,
            rng=None) -> Tensor:
    """Location scores ``[B, m_l]`` (pre-softmax)."""
    f_post, _ = representation(params, cfg, batch, training, rng)
    f_post = F.dropout(f_post, cfg.dropout, training, rng)
    return logits(f_post, params["head.w"])
