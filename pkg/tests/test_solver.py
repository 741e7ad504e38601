import numpy as np
import pytest

from voxfit import autodiff as ad
from voxfit import simulate as sim
from voxfit.errors import ConfigError, ShapeError
from voxfit.models import ModelSpec, get_model
from voxfit.oracle import nlls_oracle
from voxfit.regularizers import RegularizerSpec
from voxfit.solver import (SolverOptions, adam_step, check_stop, from_unconstrained,
                           objective, optimize, rmsprop_step, sgdm_step, theta_columns,
                           to_unconstrained, bounded)
from voxfit.volume import Mask, MeasuredData, ParamSet, Protocol, grid_graph

MONO = get_model("monoexp")
TE = Protocol({"TE_s": np.arange(3, 41, 5) * 1e-3})


def identity_model():
    return ModelSpec("identity", ("x",), {"x": -100.0}, {"x": 100.0}, (),
                     lambda p, prot: p["x"])


def one(name, values, lo=0.0, hi=50.0):
    return ParamSet((name,), {name: np.atleast_1d(values)}, {name: lo}, {name: hi})


class TestTransform:
    def test_midpoint(self):
        assert from_unconstrained({"a": np.zeros(1)}, one("a", 1.0))["a"][0] == 25.0

    def test_near_bound_roundtrip(self):
        p = one("a", [1e-6 * 50, 50 - 1e-6 * 50, 10.0])
        z = to_unconstrained(p)
        assert np.all(np.isfinite(z["a"]))
        np.testing.assert_allclose(from_unconstrained(z, p)["a"], p["a"], rtol=0, atol=1e-9)

    def test_roundtrip_interior(self, rng):
        p = one("a", rng.uniform(1, 49, 100))
        back = from_unconstrained(to_unconstrained(p), p)["a"]
        np.testing.assert_allclose(back, p["a"], rtol=0, atol=1e-12)

    def test_chain_rule(self):
        z = np.linspace(-4, 4, 9)
        tape = ad.Tape()
        leaf = tape.leaf(z, True)
        g = tape.backward(ad.sum_all(bounded(leaf, 2.0, 7.0)))[leaf][:, 0]
        s = 1 / (1 + np.exp(-z))
        np.testing.assert_allclose(g, 5.0 * s * (1 - s), rtol=1e-12)

    def test_bad_bounds(self):
        with pytest.raises(ConfigError):
            one("a", 1.0, lo=2.0, hi=2.0)


class TestObjective:
    def test_exact_fit_is_zero(self):
        truth = sim.random_truth(MONO, 5, {"S0": 1.0, "R2star": 20.0})
        data, _ = sim.simulate(MONO, truth, TE, np.inf)
        assert objective(theta_columns(truth), data, TE, MONO).value[0, 0] == 0.0

    def test_single_residual_l2(self):
        m = identity_model()
        d = MeasuredData(np.array([[3.0]]))
        out = objective(theta_columns(one("x", 1.0, -100, 100)), d, Protocol(), m, loss="l2")
        assert out.value[0, 0] == 4.0

    def test_l1_mean(self):
        m = identity_model()
        d = MeasuredData(np.array([2.0, -1.0, 3.0]))
        x = one("x", [1.0, 0.0, 0.0], -100, 100)
        assert objective(theta_columns(x), d, Protocol(), m, loss="l1").value[0, 0] == pytest.approx(5 / 3)

    def test_weights_and_n_active(self):
        m = identity_model()
        d = MeasuredData(np.array([2.0, 5.0, 3.0]), weights=np.array([[2.0], [0.0], [1.0]]))
        x = one("x", [1.0, 0.0, 0.0], -100, 100)
        # |2*1| + |0*5| + |1*3| over 2 active entries
        assert objective(theta_columns(x), d, Protocol(), m, loss="l1").value[0, 0] == 2.5

    def test_shape_mismatch(self):
        d = MeasuredData(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            objective(theta_columns(sim.random_truth(MONO, 2, {})), d, TE, MONO)


class TestSteps:
    def test_zero_grad(self):
        z = np.array([0.3, -1.0])
        assert np.array_equal(adam_step(z, np.zeros(2), None, 0.1, 1)[0], z)
        assert np.array_equal(sgdm_step(z, np.zeros(2), None, 0.1)[0], z)
        assert np.array_equal(rmsprop_step(z, np.zeros(2), None, 0.1)[0], z)

    def test_adam_first_step(self):
        dz = adam_step(np.zeros(1), np.ones(1), None, 1e-3, 1)[0][0]
        # bias-corrected m_hat = v_hat = 1
        assert dz == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-15)
        assert abs(dz + 0.000999999990) < 1e-15

    def test_sgdm_first_step(self):
        assert sgdm_step(np.zeros(1), np.ones(1), None, 1e-3)[0][0] == -1e-3
        z, st = sgdm_step(np.zeros(1), np.ones(1), None, 1e-3)
        z, st = sgdm_step(z, np.ones(1), st, 1e-3)
        assert z[0] == pytest.approx(-1e-3 - 1.9e-3)

    def test_rmsprop_first_step(self):
        dz = rmsprop_step(np.zeros(1), np.ones(1), None, 1e-3)[0][0]
        assert dz == pytest.approx(-1e-3 / (np.sqrt(0.01) + 1e-8), rel=1e-15)
        assert abs(dz + 0.01) < 1e-8

    def test_adam_descends_quadratic(self):
        z, st, prev = np.array([3.0]), None, 9.0
        for it in (1, 2):
            z, st = adam_step(z, 2 * z, st, 0.1, it)
            assert z[0] ** 2 < prev
            prev = z[0] ** 2


class TestCheckStop:
    def test_constant_history(self):
        opts = SolverOptions(convergence_value=1e-8, tol=-1.0)
        assert check_stop([0.5] * 20, opts) == (True, "converged")
        assert check_stop([0.5] * 19, opts) == (False, "")

    def test_tol(self):
        assert check_stop([1.0, 1e-5], SolverOptions(tol=1e-4)) == (True, "tol")

    def test_slope_minus_one_runs_to_max(self):
        opts = SolverOptions(iteration=50, tol=-np.inf, convergence_value=1e-8)
        hist = []
        for k in range(100):
            hist.append(1000.0 - k)
            stop, why = check_stop(hist, opts)
            if stop:
                break
        assert len(hist) == 50 and why == "max_iter"

    def test_empty(self):
        with pytest.raises(ConfigError):
            check_stop([], SolverOptions())


def test_options_validation():
    with pytest.raises(ConfigError):
        SolverOptions(optimizer="lbfgs")
    with pytest.raises(ConfigError):
        SolverOptions(convergence_window=1)
    with pytest.raises(ConfigError):
        SolverOptions(initial_learn_rate=0)
    with pytest.raises(ConfigError):
        SolverOptions.from_dict({"learnRate": 1})
    o = SolverOptions.from_dict({"initialLearnRate": 0.01, "lossFunction": "l2",
                                 "iteration": 10, "convergenceWindow": 5})
    assert (o.initial_learn_rate, o.loss_function, o.iteration, o.convergence_window) == \
        (0.01, "l2", 10, 5)


def small_problem(n=60, snr=100.0, seed=0):
    truth = sim.random_truth(MONO, n, {"S0": {"mean": 2, "std": 0.5, "abs": True},
                                       "R2star": {"mean": 30, "std": 8}}, seed=seed)
    data, _ = sim.simulate(MONO, truth, TE, snr, seed=seed + 1)
    x0 = sim.random_truth(MONO, n, {"S0": 2.0, "R2star": 20.0}, seed=seed + 2)
    return truth, data, x0


def test_fixed_point():
    truth, _, _ = small_problem()
    data, _ = sim.simulate(MONO, truth, TE, np.inf)
    res = optimize(truth, data, TE, MONO, SolverOptions())
    assert res.iterations_run <= 2
    assert res.stop_reason == "tol"
    assert res.loss_history[-1] < 1e-4


@pytest.mark.parametrize("optimizer", ["adam", "sgdm", "rmsprop"])
def test_bounds_and_best_iterate(optimizer):
    truth, data, x0 = small_problem()
    lr = 1e-3 if optimizer != "sgdm" else 1e-2
    res = optimize(x0, data, TE, MONO, SolverOptions(optimizer=optimizer, iteration=300,
                                                    initial_learn_rate=lr))
    for k in MONO.param_names:
        assert np.all(res.final[k] >= MONO.lb[k]) and np.all(res.final[k] <= MONO.ub[k])
    assert len(res.loss_history) == res.iterations_run
    assert res.loss_history.min() <= res.loss_history[0]
    assert res.loss_history[res.best_iteration - 1] == res.loss_history.min()


def test_recovers_truth_and_agrees_with_oracle():
    truth, data, x0 = small_problem(n=100)
    res = optimize(x0, data, TE, MONO, SolverOptions())
    oracle = nlls_oracle(data, TE, MONO, x0).params
    diff = np.abs(res.final["R2star"] - oracle["R2star"])
    spread = np.abs(oracle["R2star"] - truth["R2star"])
    assert diff.mean() < spread.mean()


def test_deleting_a_sample_changes_nothing():
    truth, data, x0 = small_problem(n=40)
    opts = SolverOptions(iteration=200, tol=-1.0, convergence_value=0.0, loss_function="l2")
    full = optimize(x0, data, TE, MONO, opts)
    keep = np.delete(np.arange(40), 17)
    part = optimize(x0.subset(keep), data.subset(keep), TE, MONO, opts)
    for k in MONO.param_names:
        np.testing.assert_allclose(part.final[k], full.final[k][keep], rtol=0, atol=1e-9)


def test_worker_count_invariance(monkeypatch):
    truth, data, x0 = small_problem(n=500)
    runs = []
    for workers in (1, 3):
        opts = SolverOptions(iteration=50, workers=workers, block_size=64)
        runs.append(optimize(x0, data, TE, MONO, opts))
    assert np.array_equal(runs[0].loss_history, runs[1].loss_history)
    for k in MONO.param_names:
        assert np.array_equal(runs[0].final[k], runs[1].final[k])


def test_block_size_invariance():
    truth, data, x0 = small_problem(n=300)
    a = optimize(x0, data, TE, MONO, SolverOptions(iteration=30, block_size=8192))
    b = optimize(x0, data, TE, MONO, SolverOptions(iteration=30, block_size=1024))
    # one block vs one block: identical; both below the leaf size of the sum tree
    assert np.array_equal(a.loss_history, b.loss_history)


def test_tv_lowers_within_region_spread():
    dims = (12, 12, 2)
    r2, labels = sim.block_phantom(dims, [15.0, 25.0, 35.0, 45.0])
    mask = Mask.full(dims)
    n = mask.count
    truth = ParamSet(MONO.param_names, {"S0": np.full(n, 2.0), "R2star": r2.ravel()},
                     MONO.lb, MONO.ub)
    data, _ = sim.simulate(MONO, truth, TE, 30.0, seed=3)
    x0 = sim.random_truth(MONO, n, {"S0": 2.0, "R2star": 25.0}, seed=4)
    graph = grid_graph(mask, "3d")
    stds = []
    for lam in (0.0, 0.01):
        regs = (RegularizerSpec("tv_graph", ("R2star",), lam, graph=graph),)
        res = optimize(x0, data, TE, MONO, SolverOptions(iteration=1500, regularizers=regs))
        est = res.final["R2star"]
        stds.append(np.mean([est[labels.ravel() == r].std() for r in range(4)]))
    assert stds[1] < stds[0]


def test_divergence_is_reported():
    def bad(p, prot):
        # finite only while x < 0.75
        return p["x"] * ad.where(ad.value_of(p["x"]) < 0.75, 1.0, np.nan)

    m = ModelSpec("bad", ("x",), {"x": 0.0}, {"x": 1.0}, (), bad)
    x0 = one("x", [0.7], 0.0, 1.0)
    res = optimize(x0, MeasuredData(np.array([[5.0]])), Protocol(), m,
                   SolverOptions(iteration=500, initial_learn_rate=0.01))
    assert res.stop_reason == "diverged"
    assert "non-finite output" in res.message and "x: min=" in res.message
    assert 0.7 <= res.final["x"][0] < 0.75


def test_input_validation():
    truth, data, x0 = small_problem(n=10)
    with pytest.raises(ShapeError):
        optimize(x0.subset(np.arange(5)), data, TE, MONO)
    reg = RegularizerSpec("tv_graph", ("T1",), 1.0, graph=grid_graph(Mask.full((10,))))
    with pytest.raises(ConfigError):
        optimize(x0, data, TE, MONO, SolverOptions(regularizers=(reg,)))
