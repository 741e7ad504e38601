"""Default acquisition protocols, ground truths and starting points per model.

Used by the CLI, the benchmark and the demo scripts when a config leaves them out.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .volume import Protocol

# echo times 3, 8, ..., 38 ms
MONOEXP_TE_S = np.arange(3, 41, 5) * 1e-3
BIEXP_TE_S = np.arange(1, 33) * 2e-3
SMT_BVALS = np.array([0.0, 0.05, 0.35, 0.8, 1.5, 2.4, 3.45, 4.75, 6.0,
                      0.2, 0.95, 2.3, 4.25, 6.75, 9.85, 13.5])

PROTOCOLS = {
    "monoexp": {"TE_s": MONOEXP_TE_S},
    "biexp": {"TE_s": BIEXP_TE_S},
    "smt_ballstick": {"bval_ms_per_um2": SMT_BVALS},
}

TRUTHS = {
    "monoexp": {"S0": {"mean": 2.0, "std": 0.5, "abs": True},
                "R2star": {"mean": 30.0, "std": 10.0}},
    "biexp": {"A1": {"mean": 0.3, "std": 0.05}, "A2": {"mean": 0.7, "std": 0.1},
              "R2_1": {"mean": 100.0, "std": 15.0}, "R2_2": {"mean": 20.0, "std": 4.0}},
    "smt_ballstick": {"f": {"mean": 0.6, "std": 0.1}, "Da": {"mean": 2.2, "std": 0.3},
                      "Diso": {"mean": 1.0, "std": 0.2}},
}

STARTS = {
    "monoexp": {"S0": {"mean": 2.0, "std": 0.5, "abs": True},
                "R2star": {"mean": 20.0, "std": 10.0}},
    "biexp": {"A1": 0.5, "A2": 0.5, "R2_1": 80.0, "R2_2": 15.0},
    "smt_ballstick": {"f": 0.5, "Da": 2.0, "Diso": 1.5},
}


def _lookup(table, model_name, what):
    try:
        return table[model_name]
    except KeyError:
        raise ConfigError(f"no default {what} for model {model_name!r}") from None


def default_protocol(model_name) -> Protocol:
    return Protocol(_lookup(PROTOCOLS, model_name, "protocol"))


def default_truth(model_name):
    return _lookup(TRUTHS, model_name, "ground truth")


def default_start(model_name):
    return _lookup(STARTS, model_name, "starting point")
