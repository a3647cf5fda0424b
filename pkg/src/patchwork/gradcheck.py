"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable

import numpy as np


def rel_error(a, b) -> float:
    """``|a - b| / max(|a|, |b|)`` in the 2-norm (0 when both vanish)."""
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6,
                 indices=None) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. ``x``, perturbed in place.

    ``indices`` restricts the probe to a subset of flat positions; the
    returned array holds NaN elsewhere.
    """
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape)


def check(f: Callable[[], float], x: np.ndarray, analytic: np.ndarray, eps: float = 1e-6,
          max_probes: int | None = None, rng=None) -> float:
    """Relative error between ``analytic`` and a (possibly subsampled) numeric gradient."""
    idx = None
    if max_probes is not None and x.size > max_probes:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(x.size, size=max_probes, replace=False))
    num = numeric_grad(f, x, eps, idx)
    ana = np.asarray(analytic).reshape(-1)
    if idx is None:
        return rel_error(ana, num)
    return rel_error(ana[idx], num.reshape(-1)[idx])
