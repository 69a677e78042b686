"""Prediction-quality metrics.

These two functions are the single source of truth for model evaluation;
the client-side training loss reuses :func:`rmse` directly so the loss a
client minimizes is exactly the metric reported for the run.
"""

import numpy as np

from .errors import ShapeError, UndefinedMetricError


def _as_pair(predicted, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape:
        raise ShapeError(f"prediction shape {p.shape} != actual shape {a.shape}")
    if p.size == 0:
        raise UndefinedMetricError("metric over an empty prediction set is undefined")
    return p.ravel(), a.ravel()


def rmse(predicted, actual) -> float:
    """Root-mean-square error sqrt(mean((predicted - actual)^2))."""
    p, a = _as_pair(predicted, actual)
    return float(np.sqrt(np.mean((p - a) ** 2)))


def mae(predicted, actual) -> float:
    """Mean absolute error mean(|predicted - actual|)."""
    p, a = _as_pair(predicted, actual)
    return float(np.mean(np.abs(p - a)))
