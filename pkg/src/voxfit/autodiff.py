"""Reverse-mode automatic differentiation on an explicit tape.

Values are 2-D float64 arrays, ``[n_samples x width]``; scalars are ``(1, 1)``.
Binary operations broadcast along either axis (a per-sample column against a
per-measurement protocol row) and gradients are summed back over broadcast
axes.

Every op also accepts plain arrays and then simply returns the numpy result,
so one forward-model definition serves both the gradient solver and the
samplers.
"""
from __future__ import annotations

import numpy as np
from scipy import special

from .errors import ContractError, DomainError, ShapeError
from .parallel import pairwise_sum

DIV_FLOOR = 1e-30
TV_EPS = 1e-12


class Tape:
    def __init__(self):
        self.reset()

    def reset(self):
        self._values = []
        self._parents = []
        self._leaves = {}

    def __len__(self):
        return len(self._values)

    def _record(self, value, parents):
        # parents: list of (DiffVar, vjp); drop branches that need no gradient
        parents = [(p._index, vjp) for p, vjp in parents if p._needs_grad]
        var = DiffVar(self, len(self._values), value, bool(parents))
        self._values.append(value)
        self._parents.append(parents)
        return var

    def leaf(self, values, requires_grad=False):
        value = _as_matrix(values)
        if not np.all(np.isfinite(value)):
            raise DomainError("cannot lift non-finite values onto the tape")
        var = DiffVar(self, len(self._values), value, requires_grad)
        self._values.append(value)
        self._parents.append([])
        if requires_grad:
            self._leaves[var._index] = var
        return var

    def backward(self, root):
        """Gradients of scalar ``root`` w.r.t. every ``requires_grad`` leaf."""
        if not isinstance(root, DiffVar) or root.tape is not self:
            raise ContractError("backward needs a node recorded on this tape")
        if root.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1, 1) root, got {root.shape}")
        grads = [None] * (root._index + 1)
        grads[root._index] = np.ones((1, 1))
        for i in range(root._index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            for p, vjp in self._parents[i]:
                contrib = vjp(g)
                grads[p] = contrib if grads[p] is None else grads[p] + contrib
        return {var: grads[i] for i, var in self._leaves.items()
                if i <= root._index and grads[i] is not None}


class DiffVar:
    """Handle to one recorded node."""

    __array_ufunc__ = None  # make ndarray defer to our reflected operators
    __slots__ = ("tape", "_index", "value", "_needs_grad")

    def __init__(self, tape, index, value, needs_grad):
        self.tape = tape
        self._index = index
        self.value = value
        self._needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"DiffVar(shape={self.shape}, index={self._index})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, c):
        return power(self, c)


def _as_matrix(x):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(-1, 1)
    if a.ndim != 2:
        raise ShapeError(f"tape values must be at most 2-D, got shape {a.shape}")
    return a


def lift(values, requires_grad=False, tape=None):
    """Put ``values`` on ``tape`` (a fresh one by default) as a leaf."""
    return (tape if tape is not None else Tape()).leaf(values, requires_grad)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, DiffVar):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands live on different tapes")
    return tape


def _val(x):
    return x.value if isinstance(x, DiffVar) else x


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(ax for ax in range(g.ndim) if shape[ax] == 1 and g.shape[ax] != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _out_shape(a, b):
    sa, sb = np.shape(a), np.shape(b)
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"shapes {sa} and {sb} do not broadcast") from None


def _binary(a, b, value, da, db):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if tape is None:
        return value(av, bv)
    av, bv = _as_matrix(av), _as_matrix(bv)
    shape = _out_shape(av, bv)
    if len(shape) != 2:
        raise ShapeError(f"tape values must be 2-D, got {shape}")
    out = value(av, bv)
    parents = []
    if isinstance(a, DiffVar):
        parents.append((a, lambda g: _unbroadcast(da(g, av, bv, out), av.shape)))
    if isinstance(b, DiffVar):
        parents.append((b, lambda g: _unbroadcast(db(g, av, bv, out), bv.shape)))
    return tape._record(out, parents)


def _unary(x, value, deriv):
    if not isinstance(x, DiffVar):
        return value(x)
    xv = x.value
    out = value(xv)
    return x.tape._record(out, [(x, lambda g: g * deriv(xv, out))])


def add(a, b):
    return _binary(a, b, np.add, lambda g, *_: g, lambda g, *_: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, *_: g, lambda g, *_: -g)


def mul(a, b):
    return _binary(a, b, np.multiply,
                   lambda g, av, bv, o: g * bv, lambda g, av, bv, o: g * av)


def _guarded(b):
    """Denominator with magnitude clamped to at least DIV_FLOOR, and its mask."""
    b = np.asarray(b, dtype=np.float64)
    small = np.abs(b) < DIV_FLOOR
    if not small.any():
        return b, None
    return np.where(small, np.where(b < 0, -DIV_FLOOR, DIV_FLOOR), b), small


def div(a, b):
    def value(av, bv):
        return av / _guarded(bv)[0]

    def db(g, av, bv, out):
        bs, small = _guarded(bv)
        d = -g * av / (bs * bs)
        return d if small is None else np.where(small, 0.0, d)

    return _binary(a, b, value, lambda g, av, bv, o: g / _guarded(bv)[0], db)


def neg(x):
    return _unary(x, np.negative, lambda xv, o: -1.0)


def exp(x):
    return _unary(x, np.exp, lambda xv, o: o)


def log(x):
    xv = _val(x)
    if np.any(np.asarray(xv) < 0):
        raise DomainError("log of a negative value")
    return _unary(x, np.log, lambda xv, o: 1.0 / _guarded(xv)[0])


def sqrt(x):
    xv = _val(x)
    if np.any(np.asarray(xv) < 0):
        raise DomainError("sqrt of a negative value")
    return _unary(x, np.sqrt, lambda xv, o: 0.5 / _guarded(o)[0])


def square(x):
    return _unary(x, np.square, lambda xv, o: 2.0 * xv)


def power(x, c):
    c = float(c)
    return _unary(x, lambda v: np.power(v, c), lambda xv, o: c * np.power(xv, c - 1.0))


def erf(x):
    return _unary(x, special.erf,
                  lambda xv, o: (2.0 / np.sqrt(np.pi)) * np.exp(-xv * xv))


def sigmoid(x):
    return _unary(x, special.expit, lambda xv, o: o * (1.0 - o))


def smooth_abs(x, eps=TV_EPS):
    """``sqrt(x^2 + eps^2)``: differentiable everywhere, derivative 0 at 0."""
    e2 = float(eps) ** 2
    return _unary(x, lambda v: np.sqrt(v * v + e2), lambda xv, o: xv / o)


def abs(x):  # noqa: A001 - mirrors numpy naming
    """|x| with subgradient sign(x), sign(0) = 0."""
    return _unary(x, np.abs, lambda xv, o: np.sign(xv))


def sum_all(x):
    """Sum of every entry as a (1, 1) node, reduced in a fixed pairwise order."""
    if not isinstance(x, DiffVar):
        return pairwise_sum(x)
    shape = x.shape
    out = np.array([[pairwise_sum(x.value)]])
    return x.tape._record(out, [(x, lambda g: np.broadcast_to(g, shape))])


def sum_over_meas(x):
    if not isinstance(x, DiffVar):
        return np.sum(x, axis=-1, keepdims=True)
    shape = x.shape
    out = np.sum(x.value, axis=1, keepdims=True)
    return x.tape._record(out, [(x, lambda g: np.broadcast_to(g, shape))])


def broadcast_meas(x, n_meas):
    """Repeat a ``[n x 1]`` column across ``n_meas`` measurement columns."""
    if not isinstance(x, DiffVar):
        return np.broadcast_to(x, np.shape(x)[:-1] + (n_meas,))
    if x.shape[1] != 1:
        raise ShapeError(f"broadcast_meas needs a single column, got {x.shape}")
    out = np.broadcast_to(x.value, (x.shape[0], n_meas)).copy()
    return x.tape._record(out, [(x, lambda g: g.sum(axis=1, keepdims=True))])


def gather(x, rows):
    """Rows ``x[rows]``; the adjoint scatter-adds in index order."""
    rows = np.asarray(rows, dtype=np.int64)
    if not isinstance(x, DiffVar):
        return np.asarray(x)[rows]
    n, width = x.shape

    def vjp(g):
        out = np.empty((n, width))
        for c in range(width):
            out[:, c] = np.bincount(rows, weights=g[:, c], minlength=n)
        return out

    return x.tape._record(x.value[rows], [(x, vjp)])


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; gradient flows only to the chosen branch."""
    cond = np.asarray(cond, dtype=bool)
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = np.where(cond, av, bv)
    if tape is None:
        return out
    out = _as_matrix(out)
    parents = []
    if isinstance(a, DiffVar):
        parents.append((a, lambda g: _unbroadcast(np.where(cond, g, 0.0), a.shape)))
    if isinstance(b, DiffVar):
        parents.append((b, lambda g: _unbroadcast(np.where(cond, 0.0, g), b.shape)))
    return tape._record(out, parents)


def linop(inputs, forward, adjoint):
    """Apply a real-linear map of several inputs with a user-supplied adjoint.

    ``forward(list_of_arrays) -> array``; ``adjoint(array) -> list_of_arrays``
    must be its exact transpose.
    """
    tape = _tape_of(*inputs)
    vals = [_val(x) for x in inputs]
    if tape is None:
        return forward(vals)
    out = _as_matrix(forward(vals))
    parents = []
    cache = {}

    def make_vjp(k):
        def vjp(g):
            key = id(g)
            if key not in cache:
                cache.clear()
                cache[key] = (g, adjoint(g))
            return cache[key][1][k]
        return vjp

    for k, x in enumerate(inputs):
        if isinstance(x, DiffVar):
            parents.append((x, make_vjp(k)))
    return tape._record(out, parents)


def value_of(x):
    return _val(x)
