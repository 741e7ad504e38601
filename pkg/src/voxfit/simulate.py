"""Synthetic measurements, phantoms and coil sensitivities."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .models import evaluate
from .volume import MeasuredData, ParamSet, Protocol


def noise_sigma(model, truth: ParamSet, snr):
    if not snr > 0:
        raise ConfigError("SNR must be positive")
    if np.isinf(snr):
        return np.zeros(truth.n_samples)
    if model.reference is not None:
        ref = np.asarray(model.reference({k: truth[k] for k in truth.names}), dtype=float)
    else:
        ref = np.max(np.abs(evaluate(model, truth.stack(), Protocol())), axis=1)
    return np.abs(ref).ravel() / snr


def simulate(model, truth: ParamSet, protocol: Protocol, snr, noise="rician", seed=0):
    """Noisy measurements of ``model`` at ``truth``.

    ``gaussian`` adds real N(0, sigma); ``rician`` adds complex N(0, sigma) noise
    and takes the magnitude. ``sigma = reference / SNR`` per sample.
    """
    if noise not in ("gaussian", "rician"):
        raise ConfigError(f"noise must be 'gaussian' or 'rician', got {noise!r}")
    signal = evaluate(model, truth.stack(), protocol)
    sigma = noise_sigma(model, truth, snr)[:, None]
    rng = np.random.default_rng(seed)
    if noise == "gaussian":
        meas = signal + sigma * rng.standard_normal(signal.shape)
    else:
        re = rng.standard_normal(signal.shape)
        im = rng.standard_normal(signal.shape)
        meas = np.abs(signal + sigma * (re + 1j * im))
    return MeasuredData(meas), truth


def random_truth(model, n, spec, seed=0, margin=0.02):
    """Per-sample ground truth drawn as N(mean, std) and clipped inside the bounds.

    ``spec`` maps parameter name to ``{"mean": m, "std": s}`` or a constant.
    Draws are clipped to ``margin`` of the range away from each bound.
    """
    rng = np.random.default_rng(seed)
    fields = {}
    for name in model.param_names:
        lo, hi = model.lb[name], model.ub[name]
        entry = spec.get(name, {"mean": 0.5 * (lo + hi), "std": 0.0})
        if not isinstance(entry, dict):
            entry = {"mean": float(entry), "std": 0.0}
        v = entry["mean"] + entry.get("std", 0.0) * rng.standard_normal(n)
        if entry.get("abs", False):
            v = np.abs(v)
        pad = margin * (hi - lo)
        fields[name] = np.clip(v, lo + pad, hi - pad)
    return ParamSet(model.param_names, fields, model.lb, model.ub)


def block_labels(dims, n_regions=4):
    """Region label per cell: quadrants over the first two axes."""
    dims = tuple(dims)
    grids = np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")
    qx = (2 * grids[0]) // dims[0]
    qy = (2 * grids[1]) // dims[1] if len(dims) > 1 else np.zeros_like(qx)
    return ((2 * qx + qy) % n_regions).astype(np.int64)


def block_phantom(dims, region_values):
    """Piecewise-constant map taking ``region_values[label]`` on each quadrant."""
    labels = block_labels(dims, len(region_values))
    return np.asarray(region_values, dtype=float)[labels], labels


def shepp_logan(n):
    """Modified Shepp-Logan head phantom on an ``n x n`` grid."""
    ellipses = [
        (1.0, 0.69, 0.92, 0.0, 0.0, 0),
        (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0),
        (-0.2, 0.11, 0.31, 0.22, 0.0, -18),
        (-0.2, 0.16, 0.41, -0.22, 0.0, 18),
        (0.1, 0.21, 0.25, 0.0, 0.35, 0),
        (0.1, 0.046, 0.046, 0.0, 0.1, 0),
        (0.1, 0.046, 0.046, 0.0, -0.1, 0),
        (0.1, 0.046, 0.023, -0.08, -0.605, 0),
        (0.1, 0.023, 0.023, 0.0, -0.606, 0),
        (0.1, 0.023, 0.046, 0.06, -0.605, 0),
    ]
    coords = (np.arange(n) - (n - 1) / 2.0) / (n / 2.0)
    y, x = np.meshgrid(coords, coords, indexing="ij")
    img = np.zeros((n, n))
    for amp, a, b, x0, y0, phi in ellipses:
        t = np.deg2rad(phi)
        xr = (x - x0) * np.cos(t) + (y - y0) * np.sin(t)
        yr = -(x - x0) * np.sin(t) + (y - y0) * np.cos(t)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += amp
    return img


def coil_maps(ny, nz, n_coils, width=0.6, seed=0):
    """Smooth complex Gaussian-bump sensitivities, normalised so sum |C|^2 = 1."""
    rng = np.random.default_rng(seed)
    y, z = np.meshgrid(np.linspace(-1, 1, ny), np.linspace(-1, 1, nz), indexing="ij")
    maps = np.empty((ny, nz, n_coils), dtype=np.complex128)
    for c in range(n_coils):
        ang = 2 * np.pi * c / n_coils
        cy, cz = 1.2 * np.cos(ang), 1.2 * np.sin(ang)
        mag = np.exp(-((y - cy) ** 2 + (z - cz) ** 2) / (2 * width ** 2))
        phase = rng.uniform(-np.pi, np.pi) + 0.5 * (y * np.cos(ang) + z * np.sin(ang))
        maps[..., c] = mag * np.exp(1j * phase)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=-1, keepdims=True))
    return maps
