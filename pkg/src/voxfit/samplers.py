"""Vectorised MCMC over all samples at once.

Two samplers share one Gaussian log-posterior:

* Metropolis-Hastings with a joint normal proposal, one chain per sample and
  repetition, all advancing in lockstep.
* The affine-invariant ensemble sampler (stretch move), walkers split into two
  halves updated alternately against the complementary half.

Random numbers come from counter-keyed Philox streams indexed by
``(seed, sample, walker, iteration, slot)``; results are therefore
reproducible and identical to a one-sample-at-a-time loop.

State arrays are ``[n_samples x n_chains x n_params]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields as dc_fields

import numba as nb
import numpy as np

from . import rng
from .errors import ConfigError, ShapeError
from .volume import MeasuredData, ParamSet, Protocol

NOISE = "noise"
INIT_SPREAD = 1e-3

OPTION_KEYS = {
    "algorithm": "algorithm",
    "iteration": "iteration",
    "burnin": "burnin",
    "thinning": "thinning",
    "Nwalker": "n_walker",
    "Nwalkers": "n_walker",
    "StepSize": "step_size",
    "stepSize": "step_size",
    "xStepSize": "x_step_size",
    "repetition": "repetition",
    "seed": "seed",
    "keepSamples": "keep_samples",
    "pointEstimate": "point_estimate",
}


@dataclass(frozen=True)
class McmcOptions:
    algorithm: str = "mh"
    iteration: int = 20000
    burnin: float = 0.2
    thinning: int = 5
    n_walker: int = 50
    step_size: float = 2.0
    x_step_size: dict | None = None
    seed: int = 0
    repetition: int = 1
    keep_samples: bool = False
    point_estimate: str = "mean"

    def __post_init__(self):
        if self.algorithm not in ("mh", "ensemble"):
            raise ConfigError(f"algorithm must be 'mh' or 'ensemble', got {self.algorithm!r}")
        if int(self.iteration) < 1:
            raise ConfigError("iteration must be >= 1")
        if not 0 <= self.burnin < 1:
            raise ConfigError("burnin must be a ratio in [0, 1)")
        if int(self.thinning) < 1:
            raise ConfigError("thinning must be >= 1")
        if self.algorithm == "ensemble":
            if int(self.n_walker) % 2:
                raise ConfigError("Nwalker must be even for the two-half ensemble update")
            if not self.step_size > 1:
                raise ConfigError("StepSize must be > 1")
        if int(self.repetition) < 1:
            raise ConfigError("repetition must be >= 1")
        if self.point_estimate not in ("mean", "median"):
            raise ConfigError("pointEstimate must be 'mean' or 'median'")
        if self.point_estimate == "median" and not self.keep_samples:
            raise ConfigError("a median point estimate needs keepSamples")
        if self.n_retained_steps == 0:
            raise ConfigError("burnin/thinning leave no retained draws")

    @classmethod
    def from_dict(cls, cfg):
        known = {f.name for f in dc_fields(cls)}
        kwargs = {}
        for key, val in cfg.items():
            attr = OPTION_KEYS.get(key, key)
            if attr not in known:
                raise ConfigError(f"unknown MCMC option {key!r}")
            kwargs[attr] = val
        return cls(**kwargs)

    @property
    def n_burn(self):
        return int(math.floor(self.burnin * int(self.iteration) + 1e-9))

    @property
    def n_retained_steps(self):
        return (int(self.iteration) - self.n_burn) // int(self.thinning)

    def retained(self, t):
        """Whether 1-based iteration ``t`` is kept."""
        k = t - self.n_burn
        return k > 0 and k % int(self.thinning) == 0

    @property
    def n_chains(self):
        return int(self.n_walker) if self.algorithm == "ensemble" else int(self.repetition)


@dataclass
class PosteriorSummary:
    names: tuple
    mean: dict
    std: dict
    mcse: dict
    acceptance_rate: np.ndarray
    n_draws: int
    median: dict | None = None
    retained: np.ndarray | None = None

    def point(self, how="mean"):
        return self.median if how == "median" else self.mean


@nb.njit(cache=True)
def _clip_rows(theta, lb, ub, out, inside):
    for i in range(theta.shape[0]):
        ok = True
        for j in range(theta.shape[1]):
            v = theta[i, j]
            if v < lb[j]:
                v, ok = lb[j], False
            elif v > ub[j]:
                v, ok = ub[j], False
            elif not v == v:
                ok = False
            out[i, j] = v
        inside[i] = ok


@nb.njit(cache=True)
def _weighted_ss(values, pred, w, out):
    # sum_m (w (y - s))^2 per (sample, chain); w may have a single row and column
    n, k, m = pred.shape
    wr = w.shape[0] > 1
    wc = w.shape[1] > 1
    for i in range(n):
        y = values[i]
        wi = w[i] if wr else w[0]
        for c in range(k):
            acc = 0.0
            for q in range(m):
                r = (y[q] - pred[i, c, q]) * (wi[q] if wc else wi[0])
                acc += r * r
            out[i, c] = acc


class LogPosterior:
    """Gaussian likelihood with uniform priors inside the parameter box.

    Per sample::

        -(n_meas / 2) log(2 pi sigma^2) - sum_m w^2 (s_meas - s)^2 / (2 sigma^2)

    and ``-inf`` when any parameter leaves ``[lb, ub]``. ``sigma`` is the
    ``noise`` parameter.
    """

    def __init__(self, model, data: MeasuredData, protocol: Protocol, names, lb, ub):
        self.model = model
        self.names = tuple(names)
        if NOISE not in self.names:
            raise ConfigError("MCMC needs a 'noise' parameter with bounds")
        missing = [p for p in model.param_names if p not in self.names]
        if missing:
            raise ConfigError(f"parameters missing for the model: {missing}")
        self.noise_idx = self.names.index(NOISE)
        self.model_idx = [self.names.index(p) for p in model.param_names]
        self.lb = np.asarray(lb, dtype=np.float64)
        self.ub = np.asarray(ub, dtype=np.float64)
        self.values = data.values
        w = data.effective_weights()
        self.w = w
        self.ones = np.ones((1, 1))
        self.n_meas = np.count_nonzero(w, axis=1).astype(np.float64)
        self.protocol = protocol
        self.per_sample_protocol = any(a.shape[0] > 1 for a in protocol.axes.values())
        self.uniform_weights = data.weights is None

    @classmethod
    def from_params(cls, model, data, protocol, params: ParamSet):
        lb, ub = params.bounds_arrays()
        return cls(model, data, protocol, params.names, lb, ub)

    def __call__(self, theta, rows):
        """Log density of ``theta`` ``[len(rows) x k x d]`` against data ``rows``."""
        theta = np.asarray(theta, dtype=np.float64)
        n, k, d = theta.shape
        flat = np.empty((n * k, d))
        inside = np.empty(n * k, dtype=np.bool_)
        _clip_rows(theta.reshape(n * k, d), self.lb, self.ub, flat, inside)
        inside = inside.reshape(n, k)
        cols = {p: flat[:, j:j + 1] for p, j in zip(self.model.param_names, self.model_idx)}
        prot = self.protocol
        if self.per_sample_protocol:
            prot = prot.subset(rows).repeat_rows(k)
        pred = np.asarray(self.model.forward(cols, prot), dtype=np.float64)
        pred = np.broadcast_to(pred, (n * k, self.values.shape[1])).reshape(n, k, -1)
        ss = np.empty((n, k))
        weights = self.ones if self.uniform_weights else self.w[rows]
        _weighted_ss(self.values[rows], pred, weights, ss)
        var = flat[:, self.noise_idx].reshape(n, k) ** 2
        n_meas = self.n_meas[rows][:, None]
        lp = -0.5 * n_meas * np.log(2.0 * np.pi * var) - ss / (2.0 * var)
        lp[~(inside & np.isfinite(lp))] = -np.inf
        return lp


# -- Metropolis-Hastings -----------------------------------------------------------

def _mh_normals(seed, samples, chains, t, d):
    cols = []
    for slot in range((d + 1) // 2):
        a, b = rng.normals(seed, rng.MH, samples[:, None], chains[None, :], t, slot)
        cols += [a, b]
    return np.stack(cols[:d], axis=-1)


def mh_step(states, logp, step, logpost, seed, t, samples, rows=None):
    """One lockstep Metropolis-Hastings update of every chain.

    Returns ``(states, logp, accepted)``.
    """
    n, r, d = states.shape
    rows = samples if rows is None else rows
    chains = np.arange(r)
    prop = states + step * _mh_normals(seed, samples, chains, t, d)
    lp_prop = logpost(prop, rows)
    log_u, _ = rng.log_uniforms(seed, rng.MH, samples[:, None], chains[None, :], t,
                                (d + 1) // 2)
    acc = log_u < lp_prop - logp
    return np.where(acc[..., None], prop, states), np.where(acc, lp_prop, logp), acc


def mh_chain_reference(logpost, x0_row, step, seed, iterations, sample, chain=0):
    """Plain loop for one chain of one sample; the vectorised sampler must match it."""
    d = len(x0_row)
    state = np.array(x0_row, dtype=np.float64)
    lp = logpost(state[None, None, :], [sample])[0, 0]
    chain_out = np.empty((iterations, d))
    n_slots = (d + 1) // 2
    for t in range(1, iterations + 1):
        eps = []
        for slot in range(n_slots):
            a, b = rng.normals(seed, rng.MH, sample, chain, t, slot)
            eps += [float(a), float(b)]
        prop = state + step * np.array(eps[:d])
        lp_prop = logpost(prop[None, None, :], [sample])[0, 0]
        log_u = float(rng.log_uniforms(seed, rng.MH, sample, chain, t, n_slots)[0])
        if log_u < lp_prop - lp:
            state, lp = prop, lp_prop
        chain_out[t - 1] = state
    return chain_out


# -- affine-invariant ensemble ------------------------------------------------------

def stretch_z(u, a):
    """Inverse CDF of g(z) ~ 1/sqrt(z) on [1/a, a]."""
    ra = np.sqrt(a)
    return (u * (ra - 1.0 / ra) + 1.0 / ra) ** 2


@nb.njit(cache=True)
def _stretch_propose(k0, k1, samples, ids, t, a, x, other, y, log_z, log_u):
    # draws match rng.uniforms(..., slot=0) for (z, partner) and
    # rng.log_uniforms(..., slot=1) for the acceptance test
    n, h, d = x.shape
    ra = np.sqrt(a)
    mask = np.uint64(0xFFFFFFFF)
    ct = np.uint64(t) & mask
    for i in range(n):
        cs = np.uint64(samples[i]) & mask
        for w in range(h):
            cw = np.uint64(ids[w]) & mask
            b0, b1, b2, b3 = rng._philox_block(k0, k1, cs, cw, ct, np.uint64(0))
            uz = rng._to_unit(b0, b1)
            up = rng._to_unit(b2, b3)
            c0, c1, _, _ = rng._philox_block(k0, k1, cs, cw, ct, np.uint64(1))
            z = (uz * (ra - 1.0 / ra) + 1.0 / ra) ** 2
            j = min(int(up * h), h - 1)
            for q in range(d):
                p = other[i, j, q]
                y[i, w, q] = p + z * (x[i, w, q] - p)
            log_z[i, w] = np.log(z)
            log_u[i, w] = np.log(rng._to_unit(c0, c1))


def stretch_step(walkers, logp, a, logpost, seed, t, samples, rows=None):
    """One full ensemble update (both halves). Returns ``(walkers, logp, accepted)``."""
    n, w, d = walkers.shape
    rows = samples if rows is None else rows
    half = w // 2
    walkers = walkers.copy()
    logp = logp.copy()
    accepted = np.zeros((n, w), dtype=bool)
    k0, k1 = rng.stream_key(seed, rng.ENSEMBLE)
    samples = np.ascontiguousarray(samples, dtype=np.int64)
    y = np.empty((n, half, d))
    log_z = np.empty((n, half))
    log_u = np.empty((n, half))
    for h in (0, 1):
        act = slice(h * half, (h + 1) * half)
        other = walkers[:, (1 - h) * half:(2 - h) * half]
        ids = np.arange(h * half, (h + 1) * half)
        x = walkers[:, act]
        _stretch_propose(k0, k1, samples, ids, t, float(a), x, other, y, log_z, log_u)
        lp_y = logpost(y, rows)
        acc = log_u < (d - 1) * log_z + lp_y - logp[:, act]
        walkers[:, act] = np.where(acc[..., None], y, x)
        logp[:, act] = np.where(acc, lp_y, logp[:, act])
        accepted[:, act] = acc
    return walkers, logp, accepted


def initial_walkers(x0: np.ndarray, lb, ub, n_walker, seed, samples=None):
    """Gaussian ball of std 1e-3 (ub - lb) around ``x0`` ``[n x d]``, clipped to bounds."""
    n, d = x0.shape
    samples = np.arange(n) if samples is None else np.asarray(samples)
    ids = np.arange(n_walker)
    cols = []
    for slot in range((d + 1) // 2):
        a, b = rng.normals(seed, rng.INIT, samples[:, None], ids[None, :], 0, slot)
        cols += [a, b]
    eps = np.stack(cols[:d], axis=-1)
    ball = x0[:, None, :] + INIT_SPREAD * (ub - lb) * eps
    return np.clip(ball, lb, ub)


# -- driver ---------------------------------------------------------------------------

class _Accumulator:
    """Pooled running mean / M2 over chains, plus per-step chain means for MCSE."""

    def __init__(self, n, d, n_steps, chains, keep):
        self.count = 0
        self.mean = np.zeros((n, d))
        self.m2 = np.zeros((n, d))
        self.trace = np.empty((n, n_steps, d))
        self.k = 0
        self.kept = np.empty((n, n_steps * chains, d)) if keep else None
        self.chains = chains

    def add(self, states):
        c = states.shape[1]
        b_mean = states.mean(axis=1)
        b_m2 = ((states - b_mean[:, None, :]) ** 2).sum(axis=1)
        total = self.count + c
        delta = b_mean - self.mean
        self.mean = self.mean + delta * (c / total)
        self.m2 = self.m2 + b_m2 + delta * delta * (self.count * c / total)
        self.count = total
        self.trace[:, self.k] = b_mean
        if self.kept is not None:
            self.kept[:, self.k * c:(self.k + 1) * c] = states
        self.k += 1

    def batch_mcse(self, n_batches=None):
        """Batch-means standard error of the pooled mean; floor(sqrt(m)) batches by default."""
        m = self.k
        if m < 4:
            return np.full(self.mean.shape, np.nan)
        nb = int(math.isqrt(m)) if n_batches is None else int(n_batches)
        nb = max(2, min(nb, m // 2))
        size = m // nb
        batches = self.trace[:, :nb * size].reshape(self.mean.shape[0], nb, size, -1).mean(axis=2)
        return batches.std(axis=1, ddof=1) / np.sqrt(nb)


def run(x0: ParamSet, data: MeasuredData, protocol: Protocol, model,
        options: McmcOptions = McmcOptions(), init=None, logpost=None) -> PosteriorSummary:
    """Sample the posterior of every sample simultaneously.

    ``init`` optionally supplies explicit starting states ``[n x chains x d]``
    (ensemble walkers or MH chains); ``logpost`` overrides the Gaussian target.
    """
    if x0.n_samples != data.n_samples:
        raise ShapeError(f"x0 has {x0.n_samples} samples, data has {data.n_samples}")
    lb, ub = x0.bounds_arrays()
    names = x0.names
    d = len(names)
    if logpost is None:
        if model.separable:
            protocol.check(data.n_samples, data.n_meas)
        logpost = LogPosterior(model, data, protocol, names, lb, ub)
    n = data.n_samples
    samples = np.arange(n)
    chains = options.n_chains
    if options.algorithm == "ensemble" and chains < 2 * d + 2:
        raise ConfigError(f"Nwalker must be >= 2 * n_params + 2 = {2 * d + 2}")

    start = x0.stack()
    if init is not None:
        states = np.array(init, dtype=np.float64)
        if states.shape != (n, chains, d):
            raise ShapeError(f"init must have shape {(n, chains, d)}, got {states.shape}")
    elif options.algorithm == "ensemble":
        states = initial_walkers(start, lb, ub, chains, options.seed)
    else:
        states = np.repeat(start[:, None, :], chains, axis=1)
    logp = logpost(states, samples)
    if not np.all(np.isfinite(logp)):
        raise ConfigError("starting states must lie inside the bounds")

    if options.algorithm == "mh":
        xs = options.x_step_size or {}
        step = np.array([float(xs.get(k, (ub[i] - lb[i]) / 100.0)) for i, k in enumerate(names)])
        if np.any(step <= 0):
            raise ConfigError("xStepSize entries must be positive")

    acc_count = np.zeros(n)
    stats = _Accumulator(n, d, options.n_retained_steps, chains, options.keep_samples)
    for t in range(1, int(options.iteration) + 1):
        if options.algorithm == "mh":
            states, logp, acc = mh_step(states, logp, step, logpost, options.seed, t, samples)
        else:
            states, logp, acc = stretch_step(states, logp, float(options.step_size), logpost,
                                             options.seed, t, samples)
        acc_count += acc.mean(axis=1)
        if options.retained(t):
            stats.add(states)

    var = stats.m2 / max(stats.count - 1, 1)
    std = np.sqrt(np.maximum(var, 0.0))
    mcse = stats.batch_mcse()
    median = None
    if stats.kept is not None:
        med = np.median(stats.kept, axis=1)
        median = {k: med[:, i] for i, k in enumerate(names)}
    return PosteriorSummary(
        names=names,
        mean={k: stats.mean[:, i] for i, k in enumerate(names)},
        std={k: std[:, i] for i, k in enumerate(names)},
        mcse={k: mcse[:, i] for i, k in enumerate(names)},
        acceptance_rate=acc_count / int(options.iteration),
        n_draws=stats.count,
        median=median,
        retained=stats.kept,
    )
