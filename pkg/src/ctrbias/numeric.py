"""Small numerical helpers shared by several modules."""

from __future__ import annotations

import numpy as np


def sigmoid(z):
    """Numerically stable logistic function, scalar or array.

    Branches on sign so no exp() argument exceeds 0; exact for |z| > 30
    where the naive form would overflow.
    """
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    if out.ndim == 0:
        return float(out)
    return out


def log1pexp(z):
    """log(1 + exp(z)) without overflow: max(z, 0) + log1p(exp(-|z|))."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def bce_loss(logits, labels):
    """Per-sample binary cross entropy from raw logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    return log1pexp(logits) - labels * logits


def average_ranks(a):
    """1-based ranks of `a`, ties assigned the mean of their positions."""
    a = np.asarray(a)
    order = np.argsort(a, kind="stable")
    sorted_a = a[order]
    # run boundaries of equal values in the sorted array
    boundary = np.empty(len(a) + 1, dtype=bool)
    boundary[0] = True
    boundary[-1] = True
    boundary[1:-1] = sorted_a[1:] != sorted_a[:-1]
    edges = np.flatnonzero(boundary)
    run_id = np.cumsum(boundary[:-1]) - 1
    lo = edges[:-1][run_id]
    hi = edges[1:][run_id]
    ranks_sorted = 0.5 * (lo + hi + 1)  # mean of 1-based positions lo+1..hi
    ranks = np.empty(len(a), dtype=np.float64)
    ranks[order] = ranks_sorted
    return ranks


def to_jsonable(obj):
    """Recursively convert numpy containers/scalars for json.dump; NaN -> None."""
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if np.isnan(v) else v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj
