"""Tail expectations of discrete distributions."""
from __future__ import annotations

import numpy as np


def _check(values, probs):
    values = np.asarray(values, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if values.shape != probs.shape:
        raise ValueError(f"values {values.shape} and probs {probs.shape} differ in shape")
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    total = probs.sum(axis=-1)
    if np.any(probs < -1e-12) or np.any(np.abs(total - 1.0) > 1e-6):
        raise ValueError("probs must be a probability distribution (non-negative, summing to 1)")
    return values, probs


def cvar_lower(values, probs, alpha: float):
    """Mean of the worst (lowest-value) ``1 - alpha`` probability mass.

    The atom straddling the tail boundary contributes fractionally.
    Works along the last axis, so a batch of distributions is fine.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    values, probs = _check(values, probs)
    tail = 1.0 - alpha
    order = np.argsort(values, axis=-1, kind="stable")
    v = np.take_along_axis(values, order, axis=-1)
    p = np.take_along_axis(probs, order, axis=-1)
    cum = np.cumsum(p, axis=-1)
    before = cum - p
    w = np.clip(np.minimum(cum, tail) - before, 0.0, None)
    # Rounding in the cumulative sum leaves slivers past the boundary; drop them.
    w = np.where(w > 1e-12 * tail, w, 0.0)
    out = (w * v).sum(axis=-1) / w.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def cvar_upper(values, probs, alpha: float):
    """Mean of the best (highest-value) ``1 - alpha`` probability mass."""
    out = -cvar_lower(-np.asarray(values, dtype=float), probs, alpha)
    return float(out) if np.ndim(out) == 0 else out


def empirical_cvar(samples, alpha: float) -> float:
    """Upper-tail CVaR of equally weighted samples (e.g. per-day costs)."""
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise ValueError("no samples")
    probs = np.full(samples.size, 1.0 / samples.size)
    return cvar_upper(samples, probs, alpha)
