"""Forecast-error metrics: SMAPE, WMAPE, and the coefficient of determination.

All three take flat 1-D vectors of actual and predicted values.  Multi-channel
callers decide the pooling (per channel, per group, or concatenated).
"""

from __future__ import annotations

import numpy as np


def _as_pair(actual, predicted) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("metrics need at least one sample")
    if a.shape != p.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {p.shape}")
    return a, p


def smape(actual, predicted) -> float:
    """Symmetric mean absolute percentage error, in [0, 100].

    Per-term ratio |a - p| / (|a| + |p|); a 0/0 term counts as 0 so a
    perfect prediction always scores 0.
    """
    a, p = _as_pair(actual, predicted)
    denom = np.abs(a) + np.abs(p)
    terms = np.divide(np.abs(a - p), denom, out=np.zeros_like(denom), where=denom > 0)
    return 100.0 * float(terms.mean())


def wmape(actual, predicted) -> float:
    """Total absolute error normalized by total absolute actual value, as percent.

    Robust when values are large or sparse; undefined for an all-zero
    actual vector (callers must skip such channels or report N/A).
    """
    a, p = _as_pair(actual, predicted)
    denom = float(np.abs(a).sum())
    if denom == 0.0:
        raise ValueError("wmape undefined: sum of |actual| is zero")
    return 100.0 * float(np.abs(a - p).sum()) / denom


def r2(actual, predicted) -> float:
    """Coefficient of determination: 1 for perfect fit, 0 for the mean predictor."""
    a, p = _as_pair(actual, predicted)
    if a.size < 2:
        raise ValueError("r2 needs at least two samples")
    total = float(((a - a.mean()) ** 2).sum())
    if total == 0.0:
        raise ValueError("r2 undefined: actual values have zero variance")
    residual = float(((a - p) ** 2).sum())
    return 1.0 - residual / total
