"""Task metrics keyed by name; every entry knows whether higher is better."""

from __future__ import annotations

import numpy as np

from .errors import UserError


def accuracy(y, p) -> float:
    y, p = np.asarray(y), np.asarray(p, float)
    return float(np.mean((p >= 0.5).astype(int) == y))


def auc(y, p) -> float:
    """Rank-based ROC AUC with average ranks for ties; 0.5 when one class is absent."""
    y, p = np.asarray(y).astype(int), np.asarray(p, float)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    sp = np.sort(p)
    # average 1-based rank of each value among ties
    ranks = (np.searchsorted(sp, p, "left") + np.searchsorted(sp, p, "right") + 1) / 2.0
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def log_loss(y, p, eps: float = 1e-12) -> float:
    y, p = np.asarray(y, float), np.clip(np.asarray(p, float), eps, 1 - eps)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def mse(y, p) -> float:
    y, p = np.asarray(y, float), np.asarray(p, float)
    return float(np.mean((y - p) ** 2))


def r2(y, p) -> float:
    y, p = np.asarray(y, float), np.asarray(p, float)
    ss = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum((y - p) ** 2)) / ss if ss > 0 else 0.0


def ece(y, p, bins: int = 10) -> float:
    """Expected calibration error of positive-class probabilities over equal-width bins."""
    y, p = np.asarray(y, float), np.asarray(p, float)
    if len(y) == 0:
        return 0.0
    idx = np.minimum((p * bins).astype(int), bins - 1)
    total = 0.0
    for b in range(bins):
        m = idx == b
        if m.any():
            total += m.sum() * abs(y[m].mean() - p[m].mean())
    return float(total / len(y))


# name -> (function, higher_is_better)
METRICS = {
    "accuracy": (accuracy, True),
    "auc": (auc, True),
    "log_loss": (log_loss, False),
    "mse": (mse, False),
    "r2": (r2, True),
    "ece": (ece, False),
}


def metric(name: str):
    try:
        return METRICS[name]
    except KeyError:
        raise UserError(f"unknown metric {name!r}; choose from {sorted(METRICS)}") from None


def evaluate(name: str, y, p) -> float:
    return metric(name)[0](y, p)


def improvement(name: str, base: float, new: float) -> float:
    """Relative improvement of ``new`` over ``base`` in the metric's better direction."""
    higher = metric(name)[1]
    gain = new - base if higher else base - new
    return gain / abs(base) if base != 0 else gain
