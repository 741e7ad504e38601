"""Whole-volume gradient-descent fitting.

All samples share one scalar objective::

    loss = sum |W (S_meas - S(theta))|^p / n_active + sum_k lambda_k R_k(theta)

with p = 1 or 2 and ``n_active`` the count of entries with non-zero weight.
Bounded parameters are optimised through ``theta = lb + (ub - lb) sigmoid(z)``;
parameters with both bounds infinite are optimised directly. The learning rate
is a step in range-normalised units: for a bounded parameter the z-step is
``lr / sigmoid'(0) = 4 lr``, so one step moves theta by about ``lr (ub - lb)``
at mid-range.

The data term is evaluated in fixed-size sample blocks (optionally on worker
threads) and the block sums are combined in a fixed pairwise order, so the loss
history is bit-identical for any worker count.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np
from scipy import special

from . import autodiff as ad
from .errors import ConfigError, ModelError, ShapeError
from .parallel import map_blocks, tree_sum
from .volume import MeasuredData, ParamSet, Protocol

log = logging.getLogger(__name__)

BOUND_MARGIN = 1e-6
# 1 / sigmoid'(0): converts a range-normalised step into a z-step
Z_STEP_SCALE = 4.0
# optimisers whose update ignores gradient scale (up to eps)
SCALE_FREE = ("adam", "rmsprop")

# camelCase config keys -> SolverOptions attributes
OPTION_KEYS = {
    "optimizer": "optimizer",
    "initialLearnRate": "initial_learn_rate",
    "lossFunction": "loss_function",
    "iteration": "iteration",
    "tol": "tol",
    "convergenceValue": "convergence_value",
    "convergenceWindow": "convergence_window",
    "isOptimiseMemory": "is_optimise_memory",
    "seed": "seed",
    "workers": "workers",
    "blockSize": "block_size",
}


@dataclass(frozen=True)
class SolverOptions:
    optimizer: str = "adam"
    initial_learn_rate: float = 1e-3
    loss_function: str = "l1"
    iteration: int = 4000
    tol: float = 1e-4
    convergence_value: float = 1e-8
    convergence_window: int = 20
    regularizers: tuple = ()
    seed: int = 0
    is_optimise_memory: bool = True
    workers: int | None = None
    block_size: int = 8192

    def __post_init__(self):
        object.__setattr__(self, "regularizers", tuple(self.regularizers))
        if self.optimizer not in ("adam", "sgdm", "rmsprop"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_function not in ("l1", "l2"):
            raise ConfigError(f"lossFunction must be 'l1' or 'l2', got {self.loss_function!r}")
        if not self.initial_learn_rate > 0:
            raise ConfigError("initialLearnRate must be positive")
        if int(self.iteration) < 1:
            raise ConfigError("iteration must be >= 1")
        if int(self.convergence_window) < 2:
            raise ConfigError("convergenceWindow must be >= 2")
        if int(self.block_size) < 1:
            raise ConfigError("blockSize must be >= 1")

    @classmethod
    def from_dict(cls, cfg, regularizers=()):
        known = {f.name for f in dc_fields(cls)}
        kwargs = {}
        for key, val in cfg.items():
            attr = OPTION_KEYS.get(key, key)
            if attr not in known or attr == "regularizers":
                raise ConfigError(f"unknown solver option {key!r}")
            kwargs[attr] = val
        return cls(regularizers=regularizers, **kwargs)


@dataclass
class FitResult:
    final: ParamSet
    loss_history: np.ndarray
    iterations_run: int
    stop_reason: str
    message: str = ""
    last: ParamSet | None = None
    best_iteration: int = 1


# -- bounded <-> unconstrained -------------------------------------------------

def _kind(lo, hi):
    if np.isfinite(lo) and np.isfinite(hi):
        return "box"
    if lo == -np.inf and hi == np.inf:
        return "free"
    raise ConfigError(f"half-bounded parameters are not supported ([{lo}, {hi}])")


def to_unconstrained(theta: ParamSet):
    """Map each field into the unconstrained space, clamping away from the bounds."""
    z = {}
    for name in theta.names:
        lo, hi = theta.lb[name], theta.ub[name]
        if _kind(lo, hi) == "free":
            z[name] = np.array(theta[name], dtype=np.float64)
            continue
        margin = BOUND_MARGIN * (hi - lo)
        v = np.clip(theta[name], lo + margin, hi - margin)
        z[name] = special.logit((v - lo) / (hi - lo))
    return z


def bounded(zvar, lo, hi):
    """Differentiable ``lb + (ub - lb) sigmoid(z)`` (identity for free params)."""
    if _kind(lo, hi) == "free":
        return zvar
    return lo + (hi - lo) * ad.sigmoid(zvar)


def from_unconstrained(z, template: ParamSet):
    out = {}
    for name in template.names:
        lo, hi = template.lb[name], template.ub[name]
        val = np.asarray(bounded(np.asarray(z[name], dtype=np.float64), lo, hi))
        out[name] = np.clip(val, lo, hi)
    return ParamSet(template.names, out, template.lb, template.ub)


# -- objective -----------------------------------------------------------------

def _check_prediction(pred, values, theta_cols):
    if tuple(pred.shape) != tuple(values.shape):
        raise ShapeError(f"model output shape {tuple(pred.shape)} differs from data "
                         f"shape {tuple(values.shape)}")
    pv = ad.value_of(pred)
    if not np.all(np.isfinite(pv)):
        stats = ", ".join(
            f"{k}: min={np.min(ad.value_of(v)):.4g} max={np.max(ad.value_of(v)):.4g} "
            f"max|.|={np.max(np.abs(ad.value_of(v))):.4g}" for k, v in theta_cols.items())
        raise ModelError(f"model produced non-finite output "
                         f"({np.count_nonzero(~np.isfinite(pv))} entries); parameters: {stats}")


def data_term_sum(theta_cols, values, weights, protocol, model, loss="l1"):
    """Unnormalised ``sum |w (S_meas - S)|^p`` as a scalar node."""
    pred = model.forward(theta_cols, protocol)
    _check_prediction(pred, values, theta_cols)
    resid = values - pred
    if weights is not None:
        resid = weights * resid
    per_entry = ad.abs(resid) if loss == "l1" else ad.square(resid)
    return ad.sum_all(per_entry)


def regularization_term(theta_cols, regularizers):
    total = None
    for reg in regularizers:
        if reg.lam == 0:
            continue
        term = reg.lam * reg.penalty(theta_cols)
        total = term if total is None else total + term
    return total


def objective(theta_cols, data: MeasuredData, protocol: Protocol, model, regularizers=(),
              loss="l1"):
    """Full objective on one tape. ``theta_cols`` maps names to ``[n x 1]`` nodes."""
    out = data_term_sum(theta_cols, data.values, data.weights, protocol, model, loss)
    out = out / float(data.n_active)
    reg = regularization_term(theta_cols, regularizers)
    return out if reg is None else out + reg


# -- optimiser updates -----------------------------------------------------------

def adam_step(z, grad, state, lr, iteration, beta1=0.9, beta2=0.999, eps=1e-8):
    state = state or {"m": np.zeros_like(z), "v": np.zeros_like(z)}
    m = beta1 * state["m"] + (1.0 - beta1) * grad
    v = beta2 * state["v"] + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** iteration)
    v_hat = v / (1.0 - beta2 ** iteration)
    return z - lr * m_hat / (np.sqrt(v_hat) + eps), {"m": m, "v": v}


def sgdm_step(z, grad, state, lr, momentum=0.9):
    vel = grad if state is None else momentum * state["v"] + grad
    return z - lr * vel, {"v": vel}


def rmsprop_step(z, grad, state, lr, rho=0.99, eps=1e-8):
    s = (1.0 - rho) * grad * grad if state is None else rho * state["s"] + (1.0 - rho) * grad * grad
    return z - lr * grad / (np.sqrt(s) + eps), {"s": s}


def _step(optimizer, z, grad, state, lr, iteration):
    if optimizer == "adam":
        return adam_step(z, grad, state, lr, iteration)
    if optimizer == "sgdm":
        return sgdm_step(z, grad, state, lr)
    return rmsprop_step(z, grad, state, lr)


def loss_slope(window):
    """Least-squares slope of the values against their iteration index."""
    y = np.asarray(window, dtype=np.float64)
    x = np.arange(y.size, dtype=np.float64)
    x -= x.mean()
    return float(np.dot(x, y - y.mean()) / np.dot(x, x))


def check_stop(loss_history, options: SolverOptions):
    """Return ``(stop, reason)``; reason is 'tol', 'converged', 'max_iter' or ''."""
    if len(loss_history) == 0:
        raise ConfigError("loss history is empty")
    if loss_history[-1] < options.tol:
        return True, "tol"
    n = int(options.convergence_window)
    if len(loss_history) >= n and abs(loss_slope(loss_history[-n:])) < options.convergence_value:
        return True, "converged"
    if len(loss_history) >= int(options.iteration):
        return True, "max_iter"
    return False, ""


# -- driver ----------------------------------------------------------------------

class _Problem:
    """Loss and gradient w.r.t. the unconstrained variables."""

    def __init__(self, template, data, protocol, model, options):
        self.template = template
        self.names = template.names
        self.data = data
        self.protocol = protocol
        self.model = model
        self.options = options
        self.n_active = float(data.n_active)
        n = data.n_samples
        if model.separable:
            bs = int(options.block_size)
            self.blocks = [slice(i, min(i + bs, n)) for i in range(0, n, bs)]
        else:
            self.blocks = [slice(0, n)]
        self.block_protocols = [protocol if len(self.blocks) == 1 else
                                protocol.subset(np.arange(n)[b]) for b in self.blocks]

    def _theta(self, tape, z, rows):
        leaves, cols = {}, {}
        for name in self.names:
            leaves[name] = tape.leaf(z[name][rows].reshape(-1, 1), requires_grad=True)
            cols[name] = bounded(leaves[name], self.template.lb[name], self.template.ub[name])
        return leaves, cols

    def _block(self, args):
        k, z = args
        rows = self.blocks[k]
        tape = ad.Tape()
        leaves, cols = self._theta(tape, z, rows if self.model.separable else slice(None))
        w = None if self.data.weights is None else self.data.weights[rows]
        total = data_term_sum(cols, self.data.values[rows], w, self.block_protocols[k],
                              self.model, self.options.loss_function)
        grads = tape.backward(total)
        return float(total.value[0, 0]), {n: grads[leaves[n]][:, 0] for n in self.names}

    def __call__(self, z):
        parts = map_blocks(self._block, [(k, z) for k in range(len(self.blocks))],
                           self.options.workers)
        loss = tree_sum([p[0] for p in parts]) / self.n_active
        grad = {n: np.concatenate([p[1][n] for p in parts]) / self.n_active
                for n in self.names}
        regs = [r for r in self.options.regularizers if r.lam != 0]
        if regs:
            tape = ad.Tape()
            leaves, cols = self._theta(tape, z, slice(None))
            reg = regularization_term(cols, regs)
            rg = tape.backward(reg)
            loss = loss + float(reg.value[0, 0])
            for n in self.names:
                if leaves[n] in rg:
                    grad[n] = grad[n] + rg[leaves[n]][:, 0]
        return loss, grad


def optimize(x0: ParamSet, data: MeasuredData, protocol: Protocol, model,
             options: SolverOptions = SolverOptions()) -> FitResult:
    """Minimise the whole-volume objective starting from ``x0``."""
    if model.separable and x0.n_samples != data.n_samples:
        raise ShapeError(f"x0 has {x0.n_samples} samples, data has {data.n_samples}")
    missing = [p for p in model.param_names if p not in x0.names]
    if missing:
        raise ConfigError(f"x0 is missing model parameters {missing}")
    for reg in options.regularizers:
        reg.check(x0.names)
    if model.separable:
        protocol.check(data.n_samples, data.n_meas)
    problem = _Problem(x0, data, protocol, model, options)

    z = to_unconstrained(x0)
    state = {n: None for n in x0.names}
    history = []
    best_loss, best_z, best_it = np.inf, z, 1
    last_z = z
    reason, message = "max_iter", ""
    lr = {n: float(options.initial_learn_rate)
          * (Z_STEP_SCALE if _kind(x0.lb[n], x0.ub[n]) == "box" else 1.0) for n in x0.names}
    # scale-free optimisers see the gradient of the un-normalised sum, so eps
    # acts at the same per-sample scale whatever the volume size
    gscale = float(data.n_active) if options.optimizer in SCALE_FREE else 1.0
    for it in range(1, int(options.iteration) + 1):
        try:
            loss, grad = problem(z)
        except ModelError as exc:
            reason, message = "diverged", str(exc)
            break
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grad.values()):
            reason, message = "diverged", f"non-finite loss or gradient at iteration {it}"
            break
        history.append(loss)
        last_z = z
        if loss < best_loss:
            best_loss, best_z, best_it = loss, z, it
        stop, why = check_stop(history, options)
        if stop:
            reason = why
            break
        new_z = {}
        for n in x0.names:
            new_z[n], state[n] = _step(options.optimizer, z[n], gscale * grad[n], state[n],
                                       lr[n], it)
        z = new_z
    if reason == "diverged":
        log.warning("optimisation aborted: %s", message)
    final = from_unconstrained(best_z, x0)
    return FitResult(final=final, loss_history=np.asarray(history),
                     iterations_run=len(history), stop_reason=reason, message=message,
                     last=from_unconstrained(last_z, x0), best_iteration=best_it)


def theta_columns(params: ParamSet, tape=None, requires_grad=False):
    """Lift each field of ``params`` as an ``[n x 1]`` leaf."""
    tape = tape or ad.Tape()
    return {n: tape.leaf(params[n].reshape(-1, 1), requires_grad) for n in params.names}
