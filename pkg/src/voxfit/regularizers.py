"""Scalar penalties added to the solver objective.

Volumetric 2-D/3-D TV and surface TV are the same operator over a
:class:`NeighborGraph`: the anisotropic sum of absolute differences across
edges, normalised by the edge count.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, ShapeError
from .volume import NeighborGraph


def _column(x):
    if isinstance(x, ad.DiffVar):
        return x
    a = np.asarray(x, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def _n_rows(x):
    return x.shape[0]


def tv_graph(field, graph: NeighborGraph, eps=ad.TV_EPS):
    field = _column(field)
    if _n_rows(field) != graph.n_nodes:
        raise ShapeError(f"field has {_n_rows(field)} samples, graph has {graph.n_nodes} nodes")
    if graph.n_edges == 0:
        return field.tape.leaf(0.0) if isinstance(field, ad.DiffVar) else 0.0
    diff = ad.gather(field, graph.edges[:, 0]) - ad.gather(field, graph.edges[:, 1])
    return ad.sum_all(ad.smooth_abs(diff, eps)) / float(graph.n_edges)


def prior_penalty(field, mu, sigma, eps=ad.TV_EPS):
    """Mean over samples of ``|(theta - mu) / sigma|``."""
    field = _column(field)
    n = _n_rows(field)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ConfigError("prior sigma must be strictly positive")
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (n,)).reshape(-1, 1)
    sigma = np.broadcast_to(sigma, (n,)).reshape(-1, 1)
    return ad.sum_all(ad.smooth_abs((field - mu) / sigma, eps)) / float(n)


def custom(hook, fields):
    out = hook(fields)
    shape = out.shape if isinstance(out, ad.DiffVar) else np.shape(out)
    if tuple(shape) not in ((1, 1), ()):
        raise ContractError(f"custom regulariser must return a scalar, got shape {shape}")
    return out


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str
    params: tuple
    lam: float = 0.0
    graph: NeighborGraph | None = None
    mu: dict | None = None
    sigma: dict | None = None
    hook: Callable | None = None

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        if self.kind not in ("tv_graph", "prior", "custom"):
            raise ConfigError(f"unknown regulariser kind {self.kind!r}")
        if self.lam < 0:
            raise ConfigError("regularisation weight must be >= 0")
        if self.kind == "tv_graph" and self.graph is None:
            raise ConfigError("tv_graph regulariser needs a graph")
        if self.kind == "prior":
            if self.mu is None or self.sigma is None:
                raise ConfigError("prior regulariser needs mu and sigma")
            for name in self.params:
                if np.any(np.asarray(self.sigma[name]) <= 0):
                    raise ConfigError(f"prior sigma for {name!r} must be > 0")
        if self.kind == "custom" and self.hook is None:
            raise ConfigError("custom regulariser needs a hook")

    def check(self, names):
        missing = [p for p in self.params if p not in names]
        if missing:
            raise ConfigError(f"regulariser targets unknown parameters {missing}")

    def penalty(self, fields):
        """Unweighted penalty R; ``fields`` maps names to ``[n x 1]`` values."""
        if self.kind == "custom":
            return custom(self.hook, fields)
        terms = []
        for name in self.params:
            if self.kind == "tv_graph":
                terms.append(tv_graph(fields[name], self.graph))
            else:
                terms.append(prior_penalty(fields[name], self.mu[name], self.sigma[name]))
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total
