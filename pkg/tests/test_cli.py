import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from voxfit import nifti
from voxfit.cli import apply_overrides, main
from voxfit.errors import ConfigError


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def digest(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(folder.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    cfg = write(d / "sim.json", {"model": "monoexp", "dims": [8, 8, 2], "snr": 50,
                                 "seed": 3, "output": "data",
                                 "phantom": {"R2star": [10, 20, 30, 40]}})
    assert main(["simulate", "--config", cfg]) == 0
    return d / "data"


def test_simulate_outputs(dataset):
    names = {p.name for p in dataset.iterdir()}
    assert {"data.nii", "mask.nii", "truth_S0.nii", "truth_R2star.nii", "labels.nii",
            "protocol.json"} <= names
    assert nifti.load(dataset / "data.nii").shape == (8, 8, 2, 8)
    assert set(np.unique(nifti.load(dataset / "truth_R2star.nii"))) == {10.0, 20.0, 30.0, 40.0}


def fit_config(tmp_path, dataset, **extra):
    cfg = {"model": "monoexp", "data": str(dataset / "data.nii"),
           "mask": str(dataset / "mask.nii"), "protocol": str(dataset / "protocol.json"),
           "seed": 1, "options": {"iteration": 200}}
    cfg.update(extra)
    return write(tmp_path / "fit.json", cfg)


def test_fit_adam(tmp_path, dataset):
    cfg = fit_config(tmp_path, dataset)
    assert main(["fit", "--config", cfg, "--output", "a"]) == 0
    out = tmp_path / "a"
    assert {"final_S0.nii", "final_R2star.nii", "loss_history.csv",
            "fit_summary.json"} <= {p.name for p in out.iterdir()}
    summary = json.loads((out / "fit_summary.json").read_text())
    assert summary["solver"] == "adam" and summary["n_samples"] == 128
    lines = (out / "loss_history.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss" and len(lines) == summary["iterations_run"] + 1


def test_fit_is_deterministic_across_threads(tmp_path, dataset):
    reg = [{"kind": "tv_graph", "params": ["R2star"], "lambda": 0.001, "graph": "grid3d"}]
    cfg = fit_config(tmp_path, dataset, regularizers=reg,
                     options={"iteration": 100, "blockSize": 16})
    runs = []
    for threads in ("1", "4", "1"):
        out = f"t{len(runs)}"
        assert main(["fit", "--config", cfg, "--threads", threads, "--output", out]) == 0
        runs.append(digest(tmp_path / out))
    assert runs[0] == runs[1] == runs[2]


def test_packed_and_full_grid_agree(tmp_path, dataset):
    reg = [{"kind": "tv_graph", "params": ["R2star"], "lambda": 0.001, "graph": "grid3d"}]
    cfg = fit_config(tmp_path, dataset, regularizers=reg)
    assert main(["fit", "--config", cfg, "--output", "packed"]) == 0
    assert main(["fit", "--config", cfg, "--output", "grid",
                 "--set", "options.isOptimiseMemory=false"]) == 0
    for k in ("S0", "R2star"):
        a = nifti.load(tmp_path / "packed" / f"final_{k}.nii")
        b = nifti.load(tmp_path / "grid" / f"final_{k}.nii")
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("solver", ["mh", "ensemble", "nlls_oracle"])
def test_fit_other_solvers(tmp_path, dataset, solver):
    cfg = fit_config(tmp_path, dataset, options={"iteration": 100, "burnin": 0.2,
                                                 "thinning": 2, "Nwalker": 8}
                     if solver != "nlls_oracle" else {})
    assert main(["fit", "--config", cfg, "--solver", solver, "--output", solver]) == 0
    names = {p.name for p in (tmp_path / solver).iterdir()}
    assert "final_R2star.nii" in names
    if solver != "nlls_oracle":
        assert {"mean_noise.nii", "std_R2star.nii"} <= names


def test_recon_commands(tmp_path):
    cfg = write(tmp_path / "r.json", {"phantom": {"n": 16, "n_echo": 1, "n_coils": 4, "Rz": 2},
                                      "output": "r"})
    assert main(["recon", "--config", cfg, "--method", "lsqr"]) == 0
    s = json.loads((tmp_path / "r" / "recon_summary.json").read_text())
    assert s["converged"] and s["nrmse_vs_truth"] < 1e-6
    assert main(["recon", "--config", cfg, "--set", "options.iteration=50",
                 "--output", "g"]) == 0
    assert (tmp_path / "g" / "recon_real.nii").exists()


def test_bench_command(tmp_path):
    cfg = write(tmp_path / "b.json", {"model": "monoexp", "sample_counts": [10, 40],
                                      "repeats": 1, "options": {"iteration": 50},
                                      "output": "b"})
    assert main(["bench", "--config", cfg]) == 0
    header = (tmp_path / "b" / "bench_timings.csv").read_text().splitlines()[0]
    assert header == "solver,n_samples,repeat,wall_time_s,time_per_sample_s,extrapolated"


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--points", "10"]) == 0
    assert capsys.readouterr().out.count("PASS") == 6


def test_graph_command(tmp_path, dataset, capsys):
    assert main(["graph", "--mask", str(dataset / "mask.nii"), "--connectivity", "2d"]) == 0
    assert "edges 224" in capsys.readouterr().out
    mesh = write(tmp_path / "m.json", {"n_vertices": 3, "faces": [[0, 1, 2]]})
    assert main(["graph", "--mesh", mesh]) == 0
    assert "edges 3" in capsys.readouterr().out


def test_exit_codes(tmp_path, dataset):
    assert main(["fit", "--config", fit_config(tmp_path, dataset, model="nexi")]) == 2
    assert main(["fit", "--config", fit_config(tmp_path, dataset, data="missing.nii")]) == 3
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["simulate", "--config", str(tmp_path / "bad.json")]) == 2
    assert main(["fit", "--config", fit_config(tmp_path, dataset), "--threads", "0"]) == 2
    cfg = fit_config(tmp_path, dataset, regularizers=[{"kind": "tv_graph", "params": ["R2star"],
                                                       "lambda": 1, "graph": "hex"}])
    assert main(["fit", "--config", cfg]) == 2
    mesh = write(tmp_path / "m.json", {"n_vertices": 2, "faces": [[0, 1, 2]]})
    assert main(["graph", "--mesh", mesh]) == 3


def test_overrides():
    cfg = apply_overrides({"options": {"iteration": 5}}, ["options.iteration=10", "model=biexp",
                                                         "options.tol=1e-3"])
    assert cfg == {"options": {"iteration": 10, "tol": 1e-3}, "model": "biexp"}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "voxfit", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0
    for cmd in ("simulate", "fit", "recon", "bench", "gradcheck", "graph"):
        assert cmd in out.stdout
