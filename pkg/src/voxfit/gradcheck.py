"""Tape gradients against central finite differences.

Each check draws random in-bounds points and compares the tape gradient with
``(f(x + h) - f(x - h)) / 2h`` per coordinate. The error at a point is
``|g_ad - g_fd| / max(|g_ad|, |g_fd|)`` in the Euclidean norm; model gradients
are taken w.r.t. range-normalised parameters so every component counts on the
same scale. The reported value is the worst point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import presets
from .models import REGISTRY, get_model
from .regularizers import prior_penalty, tv_graph
from .solver import bounded
from .volume import Mask, grid_graph

FD_STEP = 1e-6
TOLERANCE = 1e-5
INTERIOR = 0.05


@dataclass
class GradcheckResult:
    name: str
    n_points: int
    max_rel_err: float

    @property
    def passed(self):
        return self.max_rel_err < TOLERANCE


def relative_error(g_ad, g_fd):
    """Worst per-row norm-wise relative error."""
    g_ad, g_fd = np.atleast_2d(g_ad), np.atleast_2d(g_fd)
    num = np.linalg.norm(g_ad - g_fd, axis=1)
    den = np.maximum(np.linalg.norm(g_ad, axis=1), np.linalg.norm(g_fd, axis=1))
    err = np.where(den > 0, num / np.where(den > 0, den, 1.0), num)
    return float(err.max())


def _interior_points(model, n, rng):
    cols = {}
    for k in model.param_names:
        lo, hi = model.lb[k], model.ub[k]
        pad = INTERIOR * (hi - lo)
        cols[k] = rng.uniform(lo + pad, hi - pad, size=(n, 1))
    return cols


def check_model(model, n_points=200, seed=0, protocol=None, step=FD_STEP):
    """Gradient of ``sum c * S(theta)`` (random ``c``) per sample and parameter."""
    model = get_model(model) if isinstance(model, str) else model
    protocol = protocol or presets.default_protocol(model.name)
    rng = np.random.default_rng(seed)
    theta = _interior_points(model, n_points, rng)
    width = model.forward(theta, protocol).shape[1]
    c = rng.standard_normal((n_points, width))

    tape = ad.Tape()
    leaves = {k: tape.leaf(v, requires_grad=True) for k, v in theta.items()}
    grads = tape.backward(ad.sum_all(c * model.forward(leaves, protocol)))
    g_ad = np.hstack([grads[leaves[k]] for k in model.param_names])

    g_fd = np.empty_like(g_ad)
    for j, k in enumerate(model.param_names):
        h = step * np.maximum(1.0, np.abs(theta[k]))
        up = {**theta, k: theta[k] + h}
        dn = {**theta, k: theta[k] - h}
        diff = np.asarray(model.forward(up, protocol)) - np.asarray(model.forward(dn, protocol))
        g_fd[:, j] = np.sum(c * diff, axis=1) / (2.0 * h[:, 0])
    span = np.array([model.ub[k] - model.lb[k] for k in model.param_names])
    return GradcheckResult(f"model:{model.name}", n_points,
                           relative_error(g_ad * span, g_fd * span))


def _scalar_fd(fn, x, step):
    g = np.empty_like(x)
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2.0 * h)
    return g


def _check_field_penalty(name, penalty, n_nodes, n_points, seed, step, kink=None):
    rng = np.random.default_rng(seed)
    worst = 0.0
    used = 0
    while used < n_points:
        x = rng.uniform(-2.0, 2.0, n_nodes)
        if kink is not None and kink(x) < 1e-6:
            continue
        tape = ad.Tape()
        leaf = tape.leaf(x[:, None], requires_grad=True)
        g_ad = tape.backward(penalty(leaf))[leaf][:, 0]
        g_fd = _scalar_fd(lambda v: float(penalty(v[:, None])), x, step)
        worst = max(worst, relative_error(g_ad[None, :], g_fd[None, :]))
        used += 1
    return GradcheckResult(name, n_points, worst)


def check_tv(n_points=200, seed=0, dims=(4, 4, 3), step=FD_STEP):
    graph = grid_graph(Mask.full(dims), "3d")
    e = graph.edges

    def kink(x):
        return np.min(np.abs(x[e[:, 0]] - x[e[:, 1]]))

    return _check_field_penalty("regularizer:tv_graph", lambda f: tv_graph(f, graph),
                                graph.n_nodes, n_points, seed, step, kink)


def check_prior(n_points=200, seed=0, n_nodes=30, step=FD_STEP):
    rng = np.random.default_rng(seed + 1)
    mu = rng.uniform(-1, 1, n_nodes)
    sigma = rng.uniform(0.5, 2.0, n_nodes)
    return _check_field_penalty(
        "regularizer:prior", lambda f: prior_penalty(f, mu, sigma), n_nodes, n_points, seed,
        step, kink=lambda x: np.min(np.abs(x - mu)))


def check_transform(n_points=200, seed=0, lo=0.5, hi=7.0, step=FD_STEP):
    """``d theta / d z`` of the bounded logistic transform."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(-6, 6, n_points)
    tape = ad.Tape()
    leaf = tape.leaf(z[:, None], requires_grad=True)
    g_ad = tape.backward(ad.sum_all(bounded(leaf, lo, hi)))[leaf][:, 0]
    h = step * np.maximum(1.0, np.abs(z))
    g_fd = (np.asarray(bounded(z + h, lo, hi)) - np.asarray(bounded(z - h, lo, hi))) / (2 * h)
    return GradcheckResult("transform:logistic", n_points,
                           relative_error(g_ad[:, None], g_fd[:, None]))


def check_all(n_points=200, seed=0):
    out = [check_model(m, n_points, seed) for m in sorted(REGISTRY)]
    out += [check_tv(n_points, seed), check_prior(n_points, seed),
            check_transform(n_points, seed)]
    return out
