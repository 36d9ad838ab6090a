"""Field-error metrics. All take physical (denormalized) arrays."""

from __future__ import annotations

import numpy as np

from .errors import MetricError


def r_squared(truth, pred):
    """``1 - SSE / SST``; NaN (undefined) when the truth has no variance."""
    truth = np.asarray(truth, dtype=float).ravel()
    pred = np.asarray(pred, dtype=float).ravel()
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    if truth.size < 2:
        raise MetricError("r_squared needs at least two values")
    dev = truth - truth.mean()
    scale = np.max(np.abs(dev))
    if scale == 0:
        return float("nan")
    # rescaled so tiny or huge fields neither underflow nor overflow
    return float(1.0 - np.sum(((truth - pred) / scale) ** 2) / np.sum((dev / scale) ** 2))


def rel_l2(truth, pred):
    """``||pred - truth|| / ||truth||``; NaN when the truth is identically zero."""
    truth = np.asarray(truth, dtype=float).ravel()
    pred = np.asarray(pred, dtype=float).ravel()
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    scale = np.max(np.abs(truth))
    if scale == 0:
        return float("nan")
    return float(np.linalg.norm((pred - truth) / scale) / np.linalg.norm(truth / scale))


def plume_error(truth, pred, threshold=0.01, return_empty=False):
    """Mean absolute error over cells where either field exceeds ``threshold``.

    An empty indicator set gives 0; with ``return_empty`` the result is
    ``(value, is_empty)``.
    """
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    active = (truth > threshold) | (pred > threshold)
    empty = not active.any()
    value = 0.0 if empty else float(np.abs(truth - pred)[active].mean())
    return (value, empty) if return_empty else value


def rel_pressure_error(truth, pred, reference):
    """Mean absolute error divided by a positive reference value
    (the initial value, or the largest true buildup)."""
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    reference = float(reference)
    if not reference > 0:
        raise MetricError(f"reference must be positive, got {reference}")
    return float(np.abs(truth - pred).mean() / reference)


def max_buildup(truth, initial):
    """Largest increase of the true field over its initial state, the reference for buildup errors."""
    return float(np.max(np.asarray(truth, dtype=float) - np.asarray(initial, dtype=float)))
