"""Image branch: noisy-image filtering, per-post aggregation and the feature head.

The pretrained backbone is not part of this package.  Images arrive either
as precomputed feature vectors or as small raw grids that go through a
two-layer conv stack before global average pooling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .initializers import conv_kernel, glorot_uniform, zeros
from .tensor import Tensor

GRID_FILTERS = (8, 16)


@dataclass(eq=False)
class ImageRecord:
    image_id: str
    portrait_ratio: float
    feature: np.ndarray | None = None
    raw_grid: np.ndarray | None = None
    path: str | None = None

    def __post_init__(self):
        if (self.feature is None) == (self.raw_grid is None):
            raise ValueError(f"image {self.image_id!r} needs exactly one of feature / raw_grid")
        if not 0.0 <= self.portrait_ratio <= 1.0:
            raise ValueError(f"image {self.image_id!r}: portrait_ratio outside [0, 1]")

    @property
    def values(self) -> np.ndarray:
        return self.feature if self.feature is not None else self.raw_grid


def filter_noisy(images: Sequence[ImageRecord], eta: float = 0.5) -> list[ImageRecord]:
    """Drop images whose portrait ratio is strictly greater than ``eta``."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    return [im for im in images if im.portrait_ratio <= eta]


def aggregate(vectors: Sequence[np.ndarray], dim: int | None = None) -> tuple[np.ndarray, bool]:
    """Element-wise mean of a post's image vectors.

    Returns ``(mean, present)``.  An empty list yields zeros of length
    ``dim`` and ``present=False``.
    """
    if not vectors:
        if dim is None:
            raise ValueError("aggregate of no images needs an explicit dim")
        return np.zeros(dim), False
    arr = [np.asarray(v, dtype=np.float64) for v in vectors]
    if any(a.shape != arr[0].shape for a in arr):
        raise ValueError("image vectors must share one shape")
    if dim is not None and arr[0].shape[-1] != dim and arr[0].ndim == 1:
        raise ValueError(f"image vectors have dim {arr[0].shape[-1]}, expected {dim}")
    return np.mean(arr, axis=0), True


def image_head(aggregated: Tensor, params: dict, prefix: str = "image.") -> Tensor:
    """Map an aggregated feature vector ``[..., D]`` to ``F_img``."""
    return F.linear(aggregated, params[prefix + "fc_w"], params[prefix + "fc_b"])


def grid_features(grids: Tensor, params: dict, prefix: str = "image.") -> Tensor:
    """conv -> relu -> conv -> relu -> global average pool on ``[..., C, H, W]``."""
    h = F.relu(F.conv2d(grids, params[prefix + "conv1_w"], params[prefix + "conv1_b"]))
    h = F.relu(F.conv2d(h, params[prefix + "conv2_w"], params[prefix + "conv2_b"]))
    return F.global_avg_pool(h)


def grid_head(grids: Tensor, weights: np.ndarray, params: dict, prefix: str = "image.") -> Tensor:
    """``F_img`` for raw grids.

    ``grids`` is ``[B, M, C, H, W]`` (M image slots per post) and
    ``weights`` is ``[B, M]`` averaging weights: ``1/k`` for the ``k`` kept
    images of a post and 0 for empty slots, so image-absent posts get
    ``FC(0) = bias``.
    """
    pooled = grid_features(grids, params, prefix)  # [B, M, 16]
    w = Tensor(np.asarray(weights, dtype=pooled.dtype)[..., None])
    mean = (pooled * w).sum(axis=-2)
    return image_head(mean, params, prefix)


def init_image_params(rng, out_dim: int, feature_dim: int | None = None,
                      grid_channels: int | None = None, prefix: str = "image.") -> dict:
    if (feature_dim is None) == (grid_channels is None):
        raise ValueError("give exactly one of feature_dim / grid_channels")
    params = {}
    if grid_channels is not None:
        c1, c2 = GRID_FILTERS
        params[prefix + "conv1_w"] = conv_kernel(rng, c1, grid_channels, 3, 3)
        params[prefix + "conv1_b"] = zeros(c1)
        params[prefix + "conv2_w"] = conv_kernel(rng, c2, c1, 3, 3)
        params[prefix + "conv2_b"] = zeros(c2)
        feature_dim = c2
    params[prefix + "fc_w"] = glorot_uniform(rng, (feature_dim, out_dim))
    params[prefix + "fc_b"] = zeros(out_dim)
    return params
