"""Masked measurements, parameter fields, protocols and neighbour graphs.

Grid data is packed into a ``[n_samples x n_meas]`` matrix holding only the
cells inside a mask, in row-major (C) order over the grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, DataError, ShapeError


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Mask:
    inside: np.ndarray

    def __post_init__(self):
        inside = _frozen(self.inside, bool)
        if inside.ndim == 0:
            inside = _frozen(inside.reshape(1), bool)
        if inside.ndim > 3:
            raise ShapeError(f"mask has {inside.ndim} axes, at most 3 supported")
        if not inside.any():
            raise DataError("mask has no cells inside")
        object.__setattr__(self, "inside", inside)

    @classmethod
    def full(cls, dims):
        return cls(np.ones(tuple(dims), dtype=bool))

    @property
    def dims(self):
        return self.inside.shape

    @property
    def count(self):
        return int(self.inside.sum())


@dataclass(frozen=True)
class MeasuredData:
    values: np.ndarray
    weights: np.ndarray | None = None
    sample_origin: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1:
            raise ShapeError(f"values must be [n_samples x n_meas], got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError("measured values contain non-finite entries")
        object.__setattr__(self, "values", _frozen(values))
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.size == 0:
                w = None
            else:
                try:
                    w = np.broadcast_to(w, values.shape)
                except ValueError:
                    raise ShapeError(f"weights of shape {w.shape} do not match "
                                     f"values {values.shape}") from None
                if not np.all(np.isfinite(w)) or np.any(w < 0):
                    raise DataError("weights must be finite and non-negative")
                w = _frozen(w)
            object.__setattr__(self, "weights", w)
        if self.sample_origin is not None:
            origin = _frozen(self.sample_origin, np.int64)
            if origin.shape[0] != values.shape[0]:
                raise ShapeError("sample_origin length differs from sample count")
            object.__setattr__(self, "sample_origin", origin)

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def n_meas(self):
        return self.values.shape[1]

    def effective_weights(self):
        if self.weights is None:
            return np.ones_like(self.values)
        return self.weights

    @property
    def n_active(self):
        """Number of entries that contribute to the data term."""
        if self.weights is None:
            return self.values.size
        return int(np.count_nonzero(self.weights))

    def subset(self, rows):
        rows = np.asarray(rows)
        return MeasuredData(
            self.values[rows],
            None if self.weights is None else self.weights[rows],
            None if self.sample_origin is None else self.sample_origin[rows])


@dataclass(frozen=True)
class ParamSet:
    """Named per-sample parameter vectors with scalar box bounds."""

    names: tuple
    fields: Mapping[str, np.ndarray]
    lb: Mapping[str, float]
    ub: Mapping[str, float]

    def __post_init__(self):
        names = tuple(self.names)
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate parameter names in {names}")
        fields, lb, ub = {}, {}, {}
        n = None
        for name in names:
            if name not in self.fields:
                raise ConfigError(f"missing field for parameter {name!r}")
            v = np.atleast_1d(np.asarray(self.fields[name], dtype=np.float64)).ravel()
            if n is None:
                n = v.size
            elif v.size != n:
                raise ShapeError(f"parameter {name!r} has {v.size} samples, expected {n}")
            lo, hi = float(self.lb[name]), float(self.ub[name])
            if not lo < hi:
                raise ConfigError(f"bounds for {name!r} need lb < ub, got [{lo}, {hi}]")
            if np.any(np.isnan(v)) or np.any(v < lo) or np.any(v > hi):
                raise DataError(f"parameter {name!r} has values outside [{lo}, {hi}]")
            fields[name] = _frozen(v)
            lb[name], ub[name] = lo, hi
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "fields", fields)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @classmethod
    def clipped(cls, names, fields, lb, ub):
        """Build a ParamSet after clipping every field into its bounds."""
        return cls(names, {k: np.clip(np.asarray(fields[k], float), lb[k], ub[k])
                           for k in names}, lb, ub)

    @property
    def n_samples(self):
        return self.fields[self.names[0]].size

    def __getitem__(self, name):
        return self.fields[name]

    def stack(self):
        """Fields as a ``[n_samples x n_params]`` matrix."""
        return np.stack([self.fields[k] for k in self.names], axis=1)

    def bounds_arrays(self):
        return (np.array([self.lb[k] for k in self.names]),
                np.array([self.ub[k] for k in self.names]))

    def replace(self, fields):
        return ParamSet(self.names, {**self.fields, **fields}, self.lb, self.ub)

    def subset(self, rows):
        return ParamSet(self.names, {k: v[rows] for k, v in self.fields.items()},
                        self.lb, self.ub)


@dataclass(frozen=True)
class Protocol:
    """Acquisition variables, each broadcastable to ``[n_samples x n_meas]``."""

    axes: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        axes = {}
        for name, a in self.axes.items():
            a = np.asarray(a, dtype=np.float64)
            if a.ndim == 0:
                a = a.reshape(1, 1)
            elif a.ndim == 1:
                a = a[None, :]
            elif a.ndim != 2:
                raise ShapeError(f"protocol axis {name!r} must be at most 2-D")
            if not np.all(np.isfinite(a)):
                raise DataError(f"protocol axis {name!r} has non-finite entries")
            axes[name] = _frozen(a)
        object.__setattr__(self, "axes", axes)

    def __getitem__(self, name):
        try:
            return self.axes[name]
        except KeyError:
            raise ConfigError(f"protocol has no axis {name!r}") from None

    def check(self, n_samples, n_meas):
        for name, a in self.axes.items():
            try:
                np.broadcast_shapes(a.shape, (n_samples, n_meas))
            except ValueError:
                raise ShapeError(f"protocol axis {name!r} of shape {a.shape} does not "
                                 f"broadcast to {(n_samples, n_meas)}") from None

    @property
    def n_meas(self):
        widths = {a.shape[1] for a in self.axes.values() if a.shape[1] > 1}
        return widths.pop() if len(widths) == 1 else None

    def subset(self, rows):
        return Protocol({k: a[rows] if a.shape[0] > 1 else a for k, a in self.axes.items()})

    def repeat_rows(self, k):
        """Repeat per-sample rows ``k`` times each (walkers sharing a sample)."""
        return Protocol({n: np.repeat(a, k, axis=0) if a.shape[0] > 1 else a
                         for n, a in self.axes.items()})


@dataclass(frozen=True)
class NeighborGraph:
    n_nodes: int
    edges: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= self.n_nodes):
            raise IndexError("edge index out of range")
        if np.any(e[:, 0] >= e[:, 1]):
            raise ConfigError("edges must satisfy i < j (no self-loops)")
        if len(np.unique(e, axis=0)) != len(e):
            raise ConfigError("duplicate edges")
        object.__setattr__(self, "n_nodes", int(self.n_nodes))
        object.__setattr__(self, "edges", _frozen(e, np.int64))

    @property
    def n_edges(self):
        return len(self.edges)

    def degrees(self):
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)


def _canonical_edges(pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.sort(pairs, axis=1)
    if len(pairs) == 0:
        return pairs
    return np.unique(pairs, axis=0)


def pack(volume, mask: Mask) -> MeasuredData:
    """Select masked cells of ``volume`` (dims or dims + [n_meas]) as rows."""
    volume = np.asarray(volume, dtype=np.float64)
    nd = len(mask.dims)
    if volume.shape[:nd] != mask.dims or volume.ndim > nd + 1:
        raise ShapeError(f"volume shape {volume.shape} does not match mask {mask.dims}")
    rows = volume[mask.inside]
    if rows.ndim == 1:
        rows = rows[:, None]
    return MeasuredData(rows, sample_origin=np.argwhere(mask.inside))


def unpack(data, mask: Mask, fill=0.0):
    """Scatter packed rows back onto the grid; cells outside get ``fill``."""
    data = np.asarray(data)
    if data.shape[0] != mask.count:
        raise ShapeError(f"{data.shape[0]} packed rows but mask has {mask.count} cells")
    out = np.full(mask.dims + data.shape[1:], fill, dtype=np.result_type(data, fill))
    out[mask.inside] = data
    return out


def grid_graph(mask: Mask, connectivity="3d") -> NeighborGraph:
    """Axis-adjacent in-mask cells. ``"2d"`` links only along the first two axes."""
    if connectivity not in ("2d", "3d"):
        raise ConfigError(f"connectivity must be '2d' or '3d', got {connectivity!r}")
    inside = mask.inside
    idx = np.full(inside.shape, -1, dtype=np.int64)
    idx[inside] = np.arange(mask.count)
    n_axes = min(inside.ndim, 2 if connectivity == "2d" else 3)
    pairs = []
    for ax in range(n_axes):
        lo = [slice(None)] * inside.ndim
        hi = [slice(None)] * inside.ndim
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        both = inside[lo] & inside[hi]
        pairs.append(np.stack([idx[lo][both], idx[hi][both]], axis=1))
    edges = np.concatenate(pairs) if pairs else np.empty((0, 2), np.int64)
    if len(edges):
        edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    return NeighborGraph(mask.count, edges)


def mesh_graph(n_vertices, faces=None, edges=None) -> NeighborGraph:
    """Undirected edge set of a mesh given triangle faces and/or edges."""
    pairs = []
    if faces is not None:
        f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        pairs += [f[:, [0, 1]], f[:, [1, 2]], f[:, [0, 2]]]
    if edges is not None:
        pairs.append(np.asarray(edges, dtype=np.int64).reshape(-1, 2))
    pairs = np.concatenate(pairs) if pairs else np.empty((0, 2), np.int64)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n_vertices):
        raise IndexError(f"mesh index out of range for {n_vertices} vertices")
    return NeighborGraph(n_vertices, _canonical_edges(pairs))
