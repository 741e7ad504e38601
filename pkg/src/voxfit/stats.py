"""Agreement and precision statistics."""
from __future__ import annotations

import numpy as np

from .errors import StatError


def _vec(x, min_len=2):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < min_len:
        raise StatError(f"need at least {min_len} values, got {x.size}")
    return x


def bland_altman(a, b):
    """``(bias, lower LoA, upper LoA)`` with LoA = bias +/- 1.96 sample SD."""
    a, b = _vec(a), _vec(b)
    if a.size != b.size:
        raise StatError(f"paired inputs differ in length ({a.size} vs {b.size})")
    d = a - b
    bias = float(d.mean())
    half = 1.96 * float(d.std(ddof=1))
    return bias, bias - half, bias + half


def cov(values):
    """Coefficient of variation: sample SD over mean."""
    v = _vec(values)
    mean = v.mean()
    if mean == 0:
        raise StatError("coefficient of variation undefined for zero mean")
    return float(v.std(ddof=1) / mean)


def iqr(values):
    """Q3 - Q1 with linear interpolation between order statistics."""
    v = _vec(values)
    q1, q3 = np.percentile(v, [25, 75], method="linear")
    return float(q3 - q1)


def pearson(a, b):
    a, b = _vec(a), _vec(b)
    if a.size != b.size:
        raise StatError("paired inputs differ in length")
    if a.std() == 0 or b.std() == 0:
        raise StatError("Pearson correlation undefined for constant input")
    return float(np.corrcoef(a, b)[0, 1])


def nrmse(estimate, reference):
    estimate, reference = np.asarray(estimate), np.asarray(reference)
    return float(np.linalg.norm(estimate - reference) / np.linalg.norm(reference))
