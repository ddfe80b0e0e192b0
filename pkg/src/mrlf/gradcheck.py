"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                   indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``t``.

    When ``indices`` is given only those entries are probed; the others
    stay NaN in the returned array.
    """
    grad = np.full(t.shape, np.nan)
    if indices is None:
        indices = list(np.ndindex(*t.shape))
    for idx in indices:
        orig = t.data[idx]
        t.data[idx] = orig + h
        fp = f().item()
        t.data[idx] = orig - h
        fm = f().item()
        t.data[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def _entry_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom  # NaN where not probed


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)`` over probed entries."""
    err = _entry_errors(analytic, numeric, floor)
    return float(np.nanmax(err)) if not np.isnan(err).all() else 0.0


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              max_entries: int | None = None, rng: np.random.Generator | None = None,
              fallback_h: float | None = None) -> float:
    """Worst relative error between autodiff and finite differences.

    ``max_entries`` caps how many entries per input are probed (chosen with
    ``rng``); useful for large parameter tensors.

    Relu and max make the function piecewise smooth, and a step of ``h`` can
    straddle a kink.  With ``fallback_h`` every entry is also probed with
    that step and the better estimate is kept; a wrong gradient fails both.
    """
    loss = f()
    backward(loss, leaves=inputs)
    worst = 0.0
    for t in inputs:
        indices = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(t.size, size=max_entries, replace=False)
            indices = [np.unravel_index(i, t.shape) for i in flat]
        err = _entry_errors(t.grad, numerical_grad(f, t, h, indices), 1e-6)
        if fallback_h is not None:
            err = np.fmin(err, _entry_errors(t.grad, numerical_grad(f, t, fallback_h, indices),
                                             1e-6))
        if not np.isnan(err).all():
            worst = max(worst, float(np.nanmax(err)))
    return worst
