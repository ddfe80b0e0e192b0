"""Parameter initialisation."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int | None = None,
                   fan_out: int | None = None) -> Tensor:
    """Uniform(-a, a) with ``a = sqrt(6 / (fan_in + fan_out))``."""
    if fan_in is None:
        fan_in, fan_out = shape[0], shape[-1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def conv_kernel(rng: np.random.Generator, c_out: int, c_in: int, *ksize: int) -> Tensor:
    receptive = int(np.prod(ksize))
    return glorot_uniform(rng, (c_out, c_in, *ksize), c_in * receptive, c_out * receptive)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)
