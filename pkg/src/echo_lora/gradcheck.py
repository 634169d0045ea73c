"""Central finite differences, used to audit the analytic gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .autodiff import Tensor

REL_FLOOR = 1e-6


def numeric_grad(f: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f / d t by central differences, perturbing ``t.data`` one entry at a time."""
    base = t.data
    out = np.zeros_like(base)
    for i in np.ndindex(base.shape):
        shifted = np.array(base, dtype=np.float64)
        shifted[i] = base[i] + h
        t.data = shifted
        fp = f()
        shifted = np.array(base, dtype=np.float64)
        shifted[i] = base[i] - h
        t.data = shifted
        fm = f()
        out[i] = (fp - fm) / (2.0 * h)
    t.data = base
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    """max |a - n| / max(|a|, |n|, floor) over entries."""
    analytic = np.zeros_like(numeric) if analytic is None else analytic
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if numeric.size else 0.0


def check_gradients(f: Callable[[], float], params: Iterable[Tensor],
                    h: float = 1e-5) -> float:
    """Worst relative error between ``p.grad`` (already populated) and finite differences."""
    worst = 0.0
    for p in params:
        worst = max(worst, relative_error(p.grad, numeric_grad(f, p, h)))
    return worst
