"""Built-in forward models.

A forward function takes ``params`` (name -> ``[n x 1]`` column, either a
``DiffVar`` or a plain array) and a :class:`Protocol`, and returns the
predicted signal ``[n x n_meas]``. Written with :mod:`voxfit.autodiff` ops so
it differentiates on the tape and runs as plain numpy in the samplers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

STICK_SERIES_BELOW = 1e-6


@dataclass(frozen=True)
class ModelSpec:
    name: str
    param_names: tuple
    lb: dict
    ub: dict
    protocol_axes: tuple
    forward: Callable
    # per-sample reference signal used to set the noise level from an SNR
    reference: Callable | None = None
    # False when output rows are not one-per-sample (e.g. k-space encoding)
    separable: bool = True
    units: dict = field(default_factory=dict)

    def __call__(self, params, protocol):
        return self.forward(params, protocol)


def monoexp_forward(params, protocol):
    t = protocol["TE_s"]
    return params["S0"] * ad.exp(-(t * params["R2star"]))


def biexp_forward(params, protocol):
    t = protocol["TE_s"]
    return (params["A1"] * ad.exp(-(t * params["R2_1"]))
            + params["A2"] * ad.exp(-(t * params["R2_2"])))


def stick_spherical_mean(x):
    """Orientation average of ``exp(-x cos^2)``: ``sqrt(pi/4x) erf(sqrt x)``.

    Below ``STICK_SERIES_BELOW`` the truncated series ``1 - x/3 + x^2/10`` is
    used; the large-argument branch sees a safe dummy input there so its
    gradient never turns into 0 * inf.
    """
    xv = np.asarray(ad.value_of(x))
    small = xv < STICK_SERIES_BELOW
    x_safe = ad.where(small, 1.0, x)
    root = ad.sqrt(x_safe)
    large = np.sqrt(np.pi / 4.0) * ad.erf(root) / root
    series = 1.0 - x / 3.0 + ad.square(x) / 10.0
    return ad.where(small, series, large)


def smt_ballstick_forward(params, protocol):
    b = protocol["bval_ms_per_um2"]
    f = params["f"]
    stick = stick_spherical_mean(b * params["Da"])
    ball = ad.exp(-(b * params["Diso"]))
    return f * stick + (1.0 - f) * ball


MONOEXP = ModelSpec(
    name="monoexp",
    param_names=("S0", "R2star"),
    lb={"S0": 0.0, "R2star": 0.0},
    ub={"S0": 5.0, "R2star": 50.0},
    protocol_axes=("TE_s",),
    forward=monoexp_forward,
    reference=lambda p: p["S0"],
    units={"S0": "a.u.", "R2star": "1/s", "TE_s": "s"},
)

BIEXP = ModelSpec(
    name="biexp",
    param_names=("A1", "A2", "R2_1", "R2_2"),
    lb={"A1": 0.0, "A2": 0.0, "R2_1": 1.0, "R2_2": 1.0},
    ub={"A1": 5.0, "A2": 5.0, "R2_1": 300.0, "R2_2": 300.0},
    protocol_axes=("TE_s",),
    forward=biexp_forward,
    reference=lambda p: p["A1"] + p["A2"],
    units={"A1": "a.u.", "A2": "a.u.", "R2_1": "1/s", "R2_2": "1/s", "TE_s": "s"},
)

SMT_BALLSTICK = ModelSpec(
    name="smt_ballstick",
    param_names=("f", "Da", "Diso"),
    lb={"f": 0.0, "Da": 0.1, "Diso": 0.1},
    ub={"f": 1.0, "Da": 3.0, "Diso": 3.0},
    protocol_axes=("bval_ms_per_um2",),
    forward=smt_ballstick_forward,
    reference=lambda p: np.ones_like(p["f"]),
    units={"Da": "um^2/ms", "Diso": "um^2/ms", "bval_ms_per_um2": "ms/um^2"},
)

REGISTRY = {m.name: m for m in (MONOEXP, BIEXP, SMT_BALLSTICK)}


def get_model(name):
    try:
        return REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; known: {sorted(REGISTRY)}") from None


def evaluate(model, values, protocol):
    """Plain-array forward evaluation from a ``[n x n_params]`` matrix."""
    values = np.asarray(values, dtype=np.float64)
    cols = {k: values[:, i:i + 1] for i, k in enumerate(model.param_names)}
    return np.asarray(model.forward(cols, protocol), dtype=np.float64)
