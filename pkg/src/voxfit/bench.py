"""Timing and agreement harness across batch sizes.

Batched solvers are timed at every sample count. Sample-at-a-time baselines
(the NLLS oracle and the scalar MH loop) are timed only at the smallest count
(on at most ``scalar_cap`` samples) and extrapolated linearly to the others.
Repeats run sequentially.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import presets, samplers, simulate as sim, stats
from .errors import ConfigError
from .models import get_model
from .oracle import nlls_oracle
from .solver import SolverOptions, optimize
from .volume import ParamSet

BATCHED = ("adam", "mh", "ensemble")
SCALAR = ("nlls_oracle", "mh_scalar")
TIMING_COLUMNS = ("solver", "n_samples", "repeat", "wall_time_s", "time_per_sample_s",
                  "extrapolated")
AGREEMENT_COLUMNS = ("solver", "reference", "param", "bias", "loa_low", "loa_high",
                     "cov", "iqr", "pearson")

NOISE_START, NOISE_LB, NOISE_UB = 0.01, 0.001, 0.1


@dataclass
class BenchReport:
    timings: list = field(default_factory=list)
    agreement: list = field(default_factory=list)

    def per_sample(self, solver, n_samples):
        """Mean per-sample time over repeats."""
        t = [r["time_per_sample_s"] for r in self.timings
             if r["solver"] == solver and r["n_samples"] == n_samples]
        if not t:
            raise KeyError((solver, n_samples))
        return float(np.mean(t))

    def write_timings(self, path):
        _write_csv(path, TIMING_COLUMNS, self.timings)

    def write_agreement(self, path):
        _write_csv(path, AGREEMENT_COLUMNS, self.agreement)


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def with_noise(params: ParamSet, start=NOISE_START, lb=NOISE_LB, ub=NOISE_UB) -> ParamSet:
    """Append the ``noise`` parameter the samplers need."""
    return ParamSet(params.names + (samplers.NOISE,),
                    {**params.fields, samplers.NOISE: np.full(params.n_samples, start)},
                    {**params.lb, samplers.NOISE: lb}, {**params.ub, samplers.NOISE: ub})


def _run_scalar_mh(x0, data, protocol, model, options: samplers.McmcOptions):
    x0 = with_noise(x0)
    lb, ub = x0.bounds_arrays()
    lp = samplers.LogPosterior(model, data, protocol, x0.names, lb, ub)
    xs = options.x_step_size or {}
    step = np.array([float(xs.get(k, (ub[i] - lb[i]) / 100.0)) for i, k in enumerate(x0.names)])
    start = x0.stack()
    means = np.empty_like(start)
    for i in range(data.n_samples):
        chain = samplers.mh_chain_reference(lp, start[i], step, options.seed,
                                            int(options.iteration), i)
        keep = [t - 1 for t in range(1, int(options.iteration) + 1) if options.retained(t)]
        means[i] = chain[keep].mean(axis=0)
    return {k: means[:, j] for j, k in enumerate(x0.names)}


def run_solver(solver, x0, data, protocol, model, adam_options=None, mcmc_options=None):
    """Run one solver; returns ``{param: estimates}``."""
    if solver == "adam":
        res = optimize(x0, data, protocol, model, adam_options or SolverOptions())
        return dict(res.final.fields)
    if solver == "nlls_oracle":
        return dict(nlls_oracle(data, protocol, model, x0).params.fields)
    mc = mcmc_options or samplers.McmcOptions()
    if solver == "mh_scalar":
        return _run_scalar_mh(x0, data, protocol, model, mc)
    if solver in ("mh", "ensemble"):
        mc = samplers.McmcOptions(**{**mc.__dict__, "algorithm": solver})
        summary = samplers.run(with_noise(x0), data, protocol, model, mc)
        return dict(summary.point(mc.point_estimate))
    raise ConfigError(f"unknown solver {solver!r}")


def _agreement_rows(solver, reference, est, ref, names):
    rows = []
    for k in names:
        a, b = np.asarray(est[k]), np.asarray(ref[k])
        bias, lo, hi = stats.bland_altman(a, b)
        try:
            r = stats.pearson(a, b)
        except Exception:
            r = float("nan")
        rows.append(dict(solver=solver, reference=reference, param=k, bias=bias,
                         loa_low=lo, loa_high=hi, cov=stats.cov(a), iqr=stats.iqr(a),
                         pearson=r))
    return rows


def bench_scaling(model, sample_counts, solvers=("adam", "nlls_oracle"), repeats=3,
                  snr=100.0, seed=0, adam_options=None, mcmc_options=None,
                  scalar_cap=100, protocol=None) -> BenchReport:
    """Time each solver over ascending ``sample_counts``.

    Agreement statistics (against the ground truth, and against the oracle when
    it is in the solver set) are computed at the smallest count.
    """
    model = get_model(model) if isinstance(model, str) else model
    counts = [int(c) for c in sample_counts]
    if not counts or any(b <= a for a, b in zip(counts, counts[1:])) or counts[0] < 2:
        raise ConfigError("sample_counts must be ascending integers >= 2")
    if int(repeats) < 1:
        raise ConfigError("repeats must be >= 1")
    for s in solvers:
        if s not in BATCHED + SCALAR:
            raise ConfigError(f"unknown solver {s!r}")
    protocol = protocol or presets.default_protocol(model.name)
    report = BenchReport()
    estimates = {}
    for n in counts:
        truth = sim.random_truth(model, n, presets.default_truth(model.name), seed=seed)
        data, _ = sim.simulate(model, truth, protocol, snr, seed=seed + 1)
        x0 = sim.random_truth(model, n, presets.default_start(model.name), seed=seed + 2)
        for solver in solvers:
            scalar = solver in SCALAR
            if scalar and n != counts[0]:
                continue
            m = min(n, int(scalar_cap)) if scalar else n
            rows = np.arange(m)
            sub_data, sub_x0 = (data.subset(rows), x0.subset(rows)) if m < n else (data, x0)
            for rep in range(int(repeats)):
                t0 = time.perf_counter()
                est = run_solver(solver, sub_x0, sub_data, protocol, model,
                                 adam_options, mcmc_options)
                wall = time.perf_counter() - t0
                report.timings.append(dict(solver=solver, n_samples=m, repeat=rep,
                                           wall_time_s=wall, time_per_sample_s=wall / m,
                                           extrapolated=False))
                if n == counts[0] and rep == 0:
                    estimates[solver] = (est, rows)
            if scalar:
                per = report.per_sample(solver, m)
                for c in counts:
                    if c != m:
                        report.timings.append(dict(
                            solver=solver, n_samples=c, repeat=0, wall_time_s=per * c,
                            time_per_sample_s=per, extrapolated=True))
        if n == counts[0]:
            first_truth = truth
    for solver, (est, rows) in estimates.items():
        ref = {k: first_truth[k][rows] for k in model.param_names}
        report.agreement += _agreement_rows(solver, "truth", est, ref, model.param_names)
        if "nlls_oracle" in estimates and solver != "nlls_oracle":
            oracle, o_rows = estimates["nlls_oracle"]
            common = np.intersect1d(rows, o_rows)
            report.agreement += _agreement_rows(
                solver, "nlls_oracle", {k: est[k][common] for k in model.param_names},
                {k: oracle[k][common] for k in model.param_names}, model.param_names)
    report.timings.sort(key=lambda r: (r["solver"], r["n_samples"], r["repeat"]))
    return report
