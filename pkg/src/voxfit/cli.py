"""Command-line entry point: ``python -m voxfit <command> --config cfg.json``.

Each command reads one JSON config; command-line flags and ``--set key=value``
override its keys. Outputs are NIfTI maps, CSV tables and a JSON summary
without timings, so identical configs give byte-identical files.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, gradcheck, io, nifti, presets, recon, samplers
from . import simulate as sim
from .errors import ConfigError, DataError, VoxfitError
from .models import get_model
from .oracle import nlls_oracle
from .parallel import THREADS_ENV
from .regularizers import RegularizerSpec
from .solver import SolverOptions, optimize
from .volume import Mask, MeasuredData, NeighborGraph, ParamSet, grid_graph, pack, unpack

log = logging.getLogger("voxfit")

SOLVERS = ("adam", "mh", "ensemble", "nlls_oracle")


# -- config handling ------------------------------------------------------------

def load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def apply_overrides(cfg, pairs):
    """``key=value`` pairs; dotted keys reach into nested objects, values parse as JSON."""
    cfg = json.loads(json.dumps(cfg))
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key!r}: {p!r} is not an object")
        node[parts[-1]] = value
    return cfg


def _base_dir(args):
    return Path(args.config).parent if args.config else Path(".")


def _path(base, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def _require(cfg, key):
    if key not in cfg:
        raise ConfigError(f"config needs {key!r}")
    return cfg[key]


def _load_nii(base, p):
    path = _path(base, p)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    return nifti.load(path)


def _protocol(cfg, base, model):
    spec = cfg.get("protocol")
    if spec is None:
        return presets.default_protocol(model.name)
    if isinstance(spec, str):
        return io.load_protocol(_path(base, spec))
    return io.Protocol({k: np.asarray(v, dtype=float) for k, v in spec.items()})


def _out_dir(cfg, base):
    out = _path(base, cfg.get("output", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- simulate ---------------------------------------------------------------------

def cmd_simulate(cfg, base):
    """Synthetic dataset: data.nii, mask.nii, truth_<param>.nii, protocol.json."""
    model = get_model(_require(cfg, "model"))
    protocol = _protocol(cfg, base, model)
    seed = int(cfg.get("seed", 0))
    dims = tuple(int(d) for d in cfg.get("dims", [int(cfg.get("n_samples", 1000))]))
    if not 1 <= len(dims) <= 3:
        raise ConfigError("dims must have 1 to 3 entries")
    n = int(np.prod(dims))
    truth = sim.random_truth(model, n, cfg.get("truth", presets.default_truth(model.name)),
                             seed=seed)
    labels = None
    phantom = cfg.get("phantom")
    if phantom:
        fields = dict(truth.fields)
        for name, values in phantom.items():
            if name not in model.param_names:
                raise ConfigError(f"phantom names unknown parameter {name!r}")
            vol, labels = sim.block_phantom(dims, values)
            fields[name] = vol.ravel()
        truth = ParamSet(truth.names, fields, truth.lb, truth.ub)
    data, _ = sim.simulate(model, truth, protocol, float(cfg.get("snr", 100.0)),
                           cfg.get("noise", "rician"), seed=seed + 1)
    out = _out_dir(cfg, base)
    mask = Mask.full(dims)
    nifti.save(out / "data.nii", unpack(data.values, mask))
    nifti.save(out / "mask.nii", mask.inside.astype(float), dtype="float32")
    for k in truth.names:
        nifti.save(out / f"truth_{k}.nii", unpack(truth[k], mask))
    if labels is not None:
        nifti.save(out / "labels.nii", labels.astype(float), dtype="float32")
    io.save_protocol(out / "protocol.json", protocol)
    return 0


# -- fit ----------------------------------------------------------------------------

def _graph(spec, base, mask: Mask, full_grid):
    """Neighbour graph over the solver's sample order."""
    if isinstance(spec, str) and spec.startswith("mesh:"):
        g = io.load_mesh(_path(base, spec[5:]))
        if g.n_nodes != mask.count:
            raise DataError(f"mesh has {g.n_nodes} vertices, mask has {mask.count} samples")
    elif spec in ("grid2d", "grid3d"):
        g = grid_graph(mask, "2d" if spec == "grid2d" else "3d")
    else:
        raise ConfigError(f"graph must be 'grid2d', 'grid3d' or 'mesh:<file>', got {spec!r}")
    if full_grid:
        # in-mask edges, re-indexed onto the full grid
        full_index = np.flatnonzero(mask.inside.ravel())
        g = NeighborGraph(mask.inside.size, full_index[g.edges])
    return g


def _field_value(v, base, mask):
    if isinstance(v, str):
        return pack(_load_nii(base, v), mask).values[:, 0]
    return v


def regularizers_from_config(specs, base, mask, full_grid=False):
    out = []
    for spec in specs or ():
        kind = spec.get("kind", "tv_graph")
        params = spec.get("params") or []
        if isinstance(params, str):
            params = [params]
        lam = float(spec.get("lambda", 0.0))
        if kind == "tv_graph":
            g = _graph(spec.get("graph", "grid3d"), base, mask, full_grid)
            out.append(RegularizerSpec("tv_graph", params, lam, graph=g))
        elif kind == "prior":
            sel = Mask.full(mask.inside.shape) if full_grid else mask
            mu = {k: _field_value(v, base, sel) for k, v in _require(spec, "mu").items()}
            sigma = {k: _field_value(v, base, sel) for k, v in _require(spec, "sigma").items()}
            out.append(RegularizerSpec("prior", params, lam, mu=mu, sigma=sigma))
        else:
            raise ConfigError(f"regulariser kind {kind!r} is not available from a config")
    return tuple(out)


def _start(cfg, base, model, mask, seed):
    x0 = cfg.get("x0")
    spec = dict(presets.default_start(model.name))
    fields = {}
    if x0:
        for k, v in x0.items():
            if k not in model.param_names:
                continue
            if isinstance(v, str):
                fields[k] = pack(_load_nii(base, v), mask).values[:, 0]
            else:
                spec[k] = v
    # drawn over the whole grid so packed and full-grid runs start alike
    rand = sim.random_truth(model, mask.inside.size, spec, seed=seed)
    rows = mask.inside.ravel()
    fields = {k: fields.get(k, rand[k][rows]) for k in model.param_names}
    return ParamSet.clipped(model.param_names, fields, model.lb, model.ub)


def _load_fit_inputs(cfg, base):
    model = get_model(_require(cfg, "model"))
    volume = _load_nii(base, _require(cfg, "data"))
    if "mask" in cfg:
        inside = _load_nii(base, cfg["mask"]) > 0
    else:
        inside = np.ones(volume.shape[:-1] if volume.ndim > 1 else volume.shape, dtype=bool)
    mask = Mask(inside)
    if volume.ndim == len(mask.dims):
        volume = volume[..., None]
    weights = _load_nii(base, cfg["weights"]) if "weights" in cfg else None
    return model, volume, mask, weights


def cmd_fit(cfg, base, threads=None):
    model, volume, mask, weights = _load_fit_inputs(cfg, base)
    solver = cfg.get("solver", "adam")
    if solver not in SOLVERS:
        raise ConfigError(f"solver must be one of {SOLVERS}, got {solver!r}")
    protocol = _protocol(cfg, base, model)
    seed = int(cfg.get("seed", 0))
    opts = dict(cfg.get("options", {}))
    full_grid = solver == "adam" and not bool(opts.get("isOptimiseMemory", True))
    out = _out_dir(cfg, base)

    if full_grid:
        # every grid cell is a sample; out-of-mask residuals carry zero weight
        sel = Mask.full(mask.dims)
        data = pack(volume, sel)
        w = np.broadcast_to(mask.inside.reshape(-1, 1), data.values.shape).astype(float)
        if weights is not None:
            w = w * pack(np.broadcast_to(weights, volume.shape) if weights.shape != volume.shape
                         else weights, sel).values
        data = MeasuredData(data.values, w, data.sample_origin)
    else:
        sel = mask
        data = pack(volume, mask)
        if weights is not None:
            wv = weights if weights.shape == volume.shape else weights[..., None]
            data = MeasuredData(data.values, pack(np.broadcast_to(wv, volume.shape), mask).values,
                                data.sample_origin)
    x0 = _start(cfg, base, model, sel, seed)
    summary = {"model": model.name, "solver": solver, "n_samples": data.n_samples,
               "n_meas": data.n_meas, "seed": seed}

    def save_map(prefix, values):
        vol = unpack(np.asarray(values, dtype=float), sel)
        if full_grid:
            vol = np.where(mask.inside, vol, 0.0)
        nifti.save(out / f"{prefix}.nii", vol)

    if solver == "adam":
        regs = regularizers_from_config(cfg.get("regularizers"), base, mask, full_grid)
        opts.setdefault("seed", seed)
        if threads is not None:
            opts["workers"] = threads
        options = SolverOptions.from_dict(opts, regs)
        res = optimize(x0, data, protocol, model, options)
        for k in model.param_names:
            save_map(f"final_{k}", res.final[k])
        with open(out / "loss_history.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss"])
            for i, v in enumerate(res.loss_history, start=1):
                w.writerow([i, repr(float(v))])
        summary.update(stop_reason=res.stop_reason, iterations_run=res.iterations_run,
                       best_iteration=res.best_iteration,
                       best_loss=float(res.loss_history[res.best_iteration - 1])
                       if len(res.loss_history) else None,
                       message=res.message)
        if res.stop_reason == "diverged":
            log.warning("fit diverged: %s", res.message)
    elif solver == "nlls_oracle":
        res = nlls_oracle(data, protocol, model, x0)
        for k in model.param_names:
            save_map(f"final_{k}", res.params[k])
        summary.update(converged_fraction=float(res.converged.mean()))
    else:
        noise = cfg.get("noise", {})
        start = bench.with_noise(x0, float(noise.get("start", bench.NOISE_START)),
                                 float(noise.get("lb", bench.NOISE_LB)),
                                 float(noise.get("ub", bench.NOISE_UB)))
        opts.setdefault("seed", seed)
        opts["algorithm"] = solver
        mc = samplers.McmcOptions.from_dict(opts)
        post = samplers.run(start, data, protocol, model, mc)
        point = post.point(mc.point_estimate)
        for k in post.names:
            save_map(f"final_{k}", point[k])
            save_map(f"mean_{k}", post.mean[k])
            save_map(f"std_{k}", post.std[k])
        summary.update(n_draws=post.n_draws,
                       mean_acceptance=float(np.mean(post.acceptance_rate)))
    _write_json(out / "fit_summary.json", summary)
    return 0


# -- recon ------------------------------------------------------------------------

def _recon_problem(cfg, base):
    ph = cfg.get("phantom")
    if ph:
        n = int(ph.get("n", 32))
        n_echo = int(ph.get("n_echo", 1))
        n_coils = int(ph.get("n_coils", 8))
        truth = np.stack([sim.shepp_logan(n) * np.exp(-float(ph.get("decay", 0.1)) * e)
                          for e in range(n_echo)], axis=-1).astype(complex)
        coils = sim.coil_maps(n, n, n_coils, seed=int(ph.get("seed", 0)))
        m = recon.caipi_mask(n, n, int(ph.get("Rz", 3)), int(ph.get("z_shift", 1)),
                             int(ph.get("te_shift", 1)), n_echo)
        empty = recon.ReconProblem(np.zeros((n, n, n_coils, n_echo), complex), coils, m)
        k = recon.encode(truth, empty)
        sigma = float(ph.get("noise", 0.0))
        if sigma > 0:
            rng = np.random.default_rng(int(ph.get("seed", 0)) + 1)
            k = k + sigma * (rng.standard_normal(k.shape) + 1j * rng.standard_normal(k.shape))
        return recon.ReconProblem(k, coils, m), truth
    kspace = io.load_complex(_require(cfg, "kspace"), base)
    coils = io.load_complex(_require(cfg, "coilmaps"), base)
    samp = _require(cfg, "sampling")
    if isinstance(samp, str):
        m = _load_nii(base, samp) > 0
    else:
        c = samp.get("caipi", samp)
        ky, kz, _, ne = kspace.shape
        m = recon.caipi_mask(ky, kz, int(c["Rz"]), int(c.get("z_shift", 0)),
                             int(c.get("te_shift", 0)), ne)
    return recon.ReconProblem(kspace, coils, m), None


def cmd_recon(cfg, base, threads=None):
    problem, truth = _recon_problem(cfg, base)
    method = cfg.get("method", "gd")
    out = _out_dir(cfg, base)
    summary = {"method": method, "image_shape": list(problem.image_shape)}
    if method == "lsqr":
        res = recon.recon_lsqr(problem, float(cfg.get("lambda_tikhonov", 0.0)),
                               int(cfg.get("max_iter", 500)))
        img = res.image
        summary.update(iterations=res.iterations, converged=bool(res.converged),
                       residual=float(res.residual))
    elif method == "gd":
        opts = dict(cfg.get("options", {}))
        if threads is not None:
            opts["workers"] = threads
        loss = cfg.get("loss", "l2")
        options = None
        if opts:
            defaults = {"initialLearnRate": recon.RECON_LEARN_RATE, "iteration": 500, "tol": 0.0,
                        "convergenceValue": 1e-9 if loss == "l2" else 1e-8}
            options = SolverOptions.from_dict({**defaults, **opts})
        img, res = recon.recon_gd(problem, loss, float(cfg.get("lambda_tv", 0.0)), options)
        summary.update(loss=loss, stop_reason=res.stop_reason,
                       iterations_run=res.iterations_run)
    else:
        raise ConfigError(f"recon method must be 'gd' or 'lsqr', got {method!r}")
    io.save_complex_pair(out / "recon", img)
    if truth is not None:
        io.save_complex_pair(out / "truth", truth)
        summary["nrmse_vs_truth"] = float(np.linalg.norm(img - truth) / np.linalg.norm(truth))
    _write_json(out / "recon_summary.json", summary)
    return 0


# -- bench, gradcheck, graph ---------------------------------------------------------

def cmd_bench(cfg, base):
    model = get_model(_require(cfg, "model"))
    adam = SolverOptions.from_dict(cfg["options"]) if "options" in cfg else None
    mc = samplers.McmcOptions.from_dict(cfg["mcmc_options"]) if "mcmc_options" in cfg else None
    report = bench.bench_scaling(
        model, cfg.get("sample_counts", [100, 1000, 10000]),
        tuple(cfg.get("solvers", ["adam", "nlls_oracle"])), int(cfg.get("repeats", 3)),
        float(cfg.get("snr", 100.0)), int(cfg.get("seed", 0)), adam, mc,
        int(cfg.get("scalar_cap", 100)), _protocol(cfg, base, model) if "protocol" in cfg else None)
    out = _out_dir(cfg, base)
    report.write_timings(out / "bench_timings.csv")
    report.write_agreement(out / "bench_agreement.csv")
    for r in report.timings:
        tag = " (extrapolated)" if r["extrapolated"] else ""
        print(f"{r['solver']:>12} n={r['n_samples']:<8d} rep={r['repeat']} "
              f"{r['time_per_sample_s']:.3e} s/sample{tag}")
    return 0


def cmd_gradcheck(cfg, base):
    n = int(cfg.get("points", 200))
    seed = int(cfg.get("seed", 0))
    results = gradcheck.check_all(n, seed)
    ok = True
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<24} max rel err {r.max_rel_err:.3e}")
        ok &= r.passed
    return 0 if ok else 4


def cmd_graph(cfg, base):
    if "mesh" in cfg:
        g = io.load_mesh(_path(base, cfg["mesh"]))
    else:
        mask = Mask(_load_nii(base, _require(cfg, "mask")) > 0)
        g = grid_graph(mask, cfg.get("connectivity", "3d"))
    deg = g.degrees()
    print(f"nodes {g.n_nodes} edges {g.n_edges} degree min {deg.min()} max {deg.max()} "
          f"mean {deg.mean():.3f}")
    if "output" in cfg:
        io.save_mesh(_path(base, cfg["output"]), g)
    return 0


# -- argument parsing ---------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="voxfit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, output=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted keys reach nested objects)")
        sp.add_argument("--seed", type=int)
        if output:
            sp.add_argument("--output", help="output directory")
        return sp

    common(sub.add_parser("simulate", help="generate a synthetic dataset"))
    fit = common(sub.add_parser("fit", help="fit a model to a dataset"))
    fit.add_argument("--solver", choices=SOLVERS)
    fit.add_argument("--threads", type=int, help=f"worker threads (also {THREADS_ENV})")
    rec = common(sub.add_parser("recon", help="reconstruct undersampled k-space"))
    rec.add_argument("--method", choices=("gd", "lsqr"))
    rec.add_argument("--threads", type=int)
    common(sub.add_parser("bench", help="timing across batch sizes"))
    gc = common(sub.add_parser("gradcheck", help="tape gradients vs finite differences"),
                output=False)
    gc.add_argument("--points", type=int)
    gr = common(sub.add_parser("graph", help="build and inspect a neighbour graph"))
    gr.add_argument("--mask")
    gr.add_argument("--mesh")
    gr.add_argument("--connectivity", choices=("2d", "3d"))
    return p


def _merged_config(args):
    cfg = load_config(args.config)
    for key in ("seed", "output", "solver", "method", "points", "mask", "mesh", "connectivity"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return apply_overrides(cfg, args.set)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = getattr(args, "threads", None)
    if threads is not None:
        if threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return ConfigError.exit_code
        os.environ[THREADS_ENV] = str(threads)
    try:
        cfg = _merged_config(args)
        base = _base_dir(args)
        if args.command == "simulate":
            return cmd_simulate(cfg, base)
        if args.command == "fit":
            return cmd_fit(cfg, base, threads)
        if args.command == "recon":
            return cmd_recon(cfg, base, threads)
        if args.command == "bench":
            return cmd_bench(cfg, base)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, base)
        return cmd_graph(cfg, base)
    except VoxfitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
