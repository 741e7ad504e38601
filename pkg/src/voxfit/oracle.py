"""Reference voxel-by-voxel nonlinear least squares.

One bounded trust-region least-squares solve per sample with a
finite-difference Jacobian, restarted from three points; the lowest cost wins.
Deliberately sample-at-a-time: it is both the accuracy oracle for the batched
solver and the CPU timing baseline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .models import evaluate
from .volume import MeasuredData, ParamSet, Protocol


@dataclass
class OracleResult:
    params: ParamSet
    converged: np.ndarray
    cost: np.ndarray


def _starts(x0_row, lb, ub):
    span = ub - lb
    eps = 1e-6 * span
    mid = lb + 0.5 * span
    quarter = lb + np.where(x0_row > mid, 0.25, 0.75) * span
    return [np.clip(x0_row, lb + eps, ub - eps), mid, quarter]


def fit_sample(values, weights, protocol_row, model, x0_row, lb, ub):
    def resid(x):
        pred = evaluate(model, x[None, :], protocol_row)[0]
        return weights * (values - pred)

    best = None
    for start in _starts(x0_row, lb, ub):
        sol = least_squares(resid, start, bounds=(lb, ub), jac="2-point",
                            method="trf", xtol=1e-12, ftol=1e-12, gtol=1e-12,
                            max_nfev=200 * len(lb))
        if best is None or sol.cost < best.cost:
            best = sol
    return best.x, best.status > 0, best.cost


def nlls_oracle(data: MeasuredData, protocol: Protocol, model, x0: ParamSet) -> OracleResult:
    names = model.param_names
    lb = np.array([x0.lb[k] for k in names])
    ub = np.array([x0.ub[k] for k in names])
    start = np.stack([x0[k] for k in names], axis=1)
    w = data.effective_weights()
    per_sample_protocol = any(a.shape[0] > 1 for a in protocol.axes.values())
    out = np.empty_like(start)
    ok = np.zeros(data.n_samples, dtype=bool)
    cost = np.empty(data.n_samples)
    for i in range(data.n_samples):
        prot = protocol.subset([i]) if per_sample_protocol else protocol
        out[i], ok[i], cost[i] = fit_sample(data.values[i], w[i], prot, model,
                                            start[i], lb, ub)
    params = ParamSet(names, {k: out[:, j] for j, k in enumerate(names)}, x0.lb, x0.ub)
    return OracleResult(params, ok, cost)
