import math

import numpy as np
import pytest
from scipy.stats import norm

from tilc.errors import ConfigError, FitError, TilcError, UndefinedCostError
from tilc.loop import SCALAR_SIGNALS, WHEEL_SIGNALS, RunLog, Scenario, Settings, run_experiment
from tilc.tuner import (TIL_BOX, ParameterBox, acquisition_argmax, apply_theta, bo_optimize, braking_time,
                        cost_effort, cost_mpc_prediction, cost_slip, eol_box, expected_improvement, gp_fit,
                        replay_mpc_prediction)


def synthetic_log(n=100, dt=1e-3, active_from=0):
    sig = {name: np.zeros(n) for name, _ in SCALAR_SIGNALS}
    sig.update({name: np.zeros((n, 4)) for name, _ in WHEEL_SIGNALS})
    sig["time"] = np.arange(n) * dt
    sig["active"][active_from:] = 1.0
    sig["slip_pred"][:] = np.nan
    log = RunLog("synthetic", "til", sig, np.full(n, np.nan), np.full(n, np.nan))
    log.activation_time = active_from * dt
    return log


# ---------------------------------------------------------------- indices

def test_cost_slip_examples():
    log = synthetic_log()
    assert cost_slip(log) == 0.0
    log.slip_ref[:] = 0.01
    assert cost_slip(log) == pytest.approx(0.01)
    log.slip_ref[:] = 0.0
    log.slip[:, :2] = 0.02
    assert cost_slip(log) == pytest.approx(math.sqrt(2 * 0.02 ** 2 / 4))


def test_cost_slip_wheel_permutation_invariant():
    log = synthetic_log()
    rng = np.random.default_rng(0)
    log.slip[:] = rng.uniform(0, 0.2, log.slip.shape)
    log.torque_act[:] = np.cumsum(rng.normal(size=log.torque_act.shape), axis=0)
    a, b = cost_slip(log), cost_effort(log)
    perm = [2, 0, 3, 1]
    log.slip[:] = log.slip[:, perm]
    log.torque_act[:] = log.torque_act[:, perm]
    assert cost_slip(log) == pytest.approx(a, rel=1e-14) and cost_effort(log) == pytest.approx(b, rel=1e-14)


def test_cost_effort_examples():
    log = synthetic_log()
    log.torque_act[:] = 500.0
    assert cost_effort(log) == 0.0
    log.torque_act[:, 0] = 500.0 + 100.0 * log.time
    assert cost_effort(log) == pytest.approx(50.0)


def test_empty_window_is_undefined():
    log = synthetic_log(active_from=100)
    with pytest.raises(UndefinedCostError):
        cost_slip(log)
    with pytest.raises(UndefinedCostError):
        cost_effort(log)


def test_braking_time_examples():
    log = synthetic_log(n=5001, active_from=1000)
    log.v[:] = np.where(log.time < 4.88 - 1e-9, 30.0, 2.0)
    assert braking_time(log) == pytest.approx(3.88, abs=1e-9)
    log = synthetic_log(n=100, active_from=10)
    log.v[:] = 1.0
    assert braking_time(log) == 0.0
    log.v[:] = 30.0
    with pytest.raises(UndefinedCostError):
        braking_time(log)


def test_braking_time_shift_invariant():
    a = synthetic_log(n=3000, active_from=500)
    b = synthetic_log(n=3000, active_from=800)
    a.v[:] = np.where(np.arange(3000) < 2000, 30.0, 1.0)
    b.v[:] = np.where(np.arange(3000) < 2300, 30.0, 1.0)
    assert braking_time(a) == pytest.approx(braking_time(b), abs=1e-12)


def test_prediction_cost_degenerate_and_missing():
    log = synthetic_log(n=200)
    with pytest.raises(ConfigError):
        cost_mpc_prediction(log)
    rng = np.random.default_rng(1)
    log.slip_meas[:] = rng.uniform(0.0, 0.1, log.slip_meas.shape)
    log.slip_pred[::5] = 0.0
    ticks = np.arange(0, 200, 5)
    ticks = ticks[ticks + 25 < 200]
    expected = np.sqrt(np.mean(log.slip_meas[ticks + 25] ** 2))
    assert cost_mpc_prediction(log, settle=0.0) == pytest.approx(expected)


@pytest.fixture(scope="module")
def nominal_baseline():
    return run_experiment(Scenario(duration_cap=4.0), "mpc", Settings())


def test_self_prediction_small(nominal_baseline):
    assert cost_mpc_prediction(nominal_baseline) < 1e-3


def test_replay_inertia_perturbation_increases_cost(nominal_baseline):
    v = Settings().vehicle
    radius = [v.wheel_radius_front] * 2 + [v.wheel_radius_rear] * 2
    inertia = np.array([v.wheel_inertia_front] * 2 + [v.wheel_inertia_rear] * 2)
    base = replay_mpc_prediction(nominal_baseline, radius, inertia)
    worse = replay_mpc_prediction(nominal_baseline, radius, 1.5 * inertia)
    assert worse > base


# ---------------------------------------------------------------- boxes

def test_parameter_box_roundtrip_and_bounds():
    theta = np.array([800.0, 0.2, 300.0, 0.05])
    assert np.allclose(TIL_BOX.from_unit(TIL_BOX.to_unit(theta)), theta, rtol=1e-12)
    assert TIL_BOX.contains(TIL_BOX.from_unit([-1, 2, 0.5, 1.0]))
    with pytest.raises(ValueError):
        ParameterBox(("x",), (1.0,), (0.0,))
    box = eol_box(Settings())
    assert box.dim == 4 and box.contains(np.array(box.lower) * 1.0001)


def test_apply_theta():
    s = apply_theta(Settings(), TIL_BOX.names, [900.0, 0.3, 400.0, 0.1])
    assert s.compensator.theta == (900.0, 0.3, 400.0, 0.1)
    s = apply_theta(Settings(), ("eol.inertia_front",), [2.0])
    assert s.eol_wheel(0).inertia == 2.0 and s.eol_wheel(2).inertia == Settings().eol_wheel(2).inertia


# ---------------------------------------------------------------- GP

def test_gp_interpolates_noiseless():
    x = np.linspace(0, 1, 8)[:, None]
    y = np.sin(2 * np.pi * x[:, 0])
    gp = gp_fit(x, y, noise_var=0.0)
    mean, std = gp.predict(x)
    assert np.max(np.abs(mean - y)) < 1e-6
    assert np.all(std ** 2 <= gp.y_std ** 2 * (gp.noise_var + gp.jitter) + 1e-8)


def test_gp_sine_oracle():
    x = np.linspace(0, 1, 8)[:, None]
    gp = gp_fit(x, np.sin(2 * np.pi * x[:, 0]))
    t = np.linspace(0, 1, 100)[:, None]
    err = gp.predict(t, return_std=False) - np.sin(2 * np.pi * t[:, 0])
    assert np.sqrt(np.mean(err ** 2)) < 0.05


def test_gp_permutation_invariant():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(10, 2))
    y = np.sin(3 * x[:, 0]) + x[:, 1] ** 2
    perm = rng.permutation(10)
    a = gp_fit(x, y, noise_var=1e-4)
    b = gp_fit(x[perm], y[perm], noise_var=1e-4)
    t = rng.uniform(size=(20, 2))
    ma, sa = a.predict(t)
    mb, sb = b.predict(t)
    assert np.allclose(ma, mb, atol=1e-6) and np.allclose(sa, sb, atol=1e-6)


def test_gp_fit_errors():
    with pytest.raises(FitError):
        gp_fit([[0.5]], [1.0])
    with pytest.raises(FitError):
        gp_fit([[0.5], [0.5], [0.5]], [1.0, 2.0, 3.0])


def test_ei_matches_closed_form():
    rng = np.random.default_rng(3)
    mean, std = rng.normal(size=200), rng.uniform(0.01, 2.0, 200)
    best = 0.1
    z = (best - mean) / std
    ref = (best - mean) * norm.cdf(z) + std * norm.pdf(z)
    assert np.max(np.abs(expected_improvement(mean, std, best) - ref)) < 1e-10
    assert expected_improvement(np.array([1.0]), np.array([0.0]), 0.5)[0] == 0.0


class CertainSurrogate:
    """Posterior with zero variance everywhere and mean (x - 0.3)^2 + 0.1."""

    def predict(self, x, return_std=True):
        mean = (np.atleast_2d(x)[:, 0] - 0.3) ** 2 + 0.1
        return (mean, np.zeros_like(mean)) if return_std else mean


def test_acquisition_certain_surrogate_exploits():
    box = ParameterBox(("x",), (0.0,), (1.0,))
    cand = acquisition_argmax(CertainSurrogate(), box, best=0.1)
    assert cand[0] == pytest.approx(0.3, abs=1e-4)


def test_acquisition_explores_away_from_incumbent():
    x = np.array([[0.0], [0.05], [0.1]])
    y = np.array([0.0, 0.5, 1.0])
    gp = gp_fit(x, y, noise_var=0.0)
    box = ParameterBox(("x",), (0.0,), (1.0,))
    cand = acquisition_argmax(gp, box, best=0.0)
    assert cand[0] > 0.3
    assert expected_improvement(*gp.predict([[0.0]]), 0.0)[0] < 1e-6


# ---------------------------------------------------------------- BO

def test_bo_quadratic():
    box = ParameterBox(("x",), (-2.0,), (3.0,))
    res = bo_optimize(lambda t: (t[0] - 0.7) ** 2, box, budget=20, seed=0)
    assert abs(res.best_theta[0] - 0.7) < 0.05 * 5.0
    inc = [r.incumbent for r in res.history]
    assert all(b <= a for a, b in zip(inc, inc[1:]))
    assert all(box.contains(r.theta) for r in res.history)


def test_bo_budget_equal_design():
    box = ParameterBox(("x", "y"), (0.0, 0.0), (1.0, 1.0))
    res = bo_optimize(lambda t: t[0] + t[1], box, budget=8, seed=1)
    assert len(res.history) == 8
    assert res.best_cost == min(r.cost for r in res.history)
    with pytest.raises(ValueError):
        bo_optimize(lambda t: 0.0, box, budget=4)


def test_bo_penalty_never_hurts_incumbent():
    box = ParameterBox(("x",), (0.0,), (1.0,))

    def objective(t):
        if t[0] > 0.6:
            raise TilcError("diverged")
        return (t[0] - 0.4) ** 2

    res = bo_optimize(objective, box, budget=15, seed=0)
    ok = [r.cost for r in res.history if not r.failed]
    assert any(r.failed for r in res.history)
    assert res.best_cost == min(ok)
    inc = [r.incumbent for r in res.history]
    assert all(b <= a for a, b in zip(inc, inc[1:]))
    csv = res.history_csv(box.names)
    assert csv.splitlines()[0] == "iteration,x,cost,incumbent,failed"


def test_bo_deterministic():
    box = ParameterBox(("x", "y"), (0.0, 0.0), (1.0, 1.0))
    f = lambda t: (t[0] - 0.2) ** 2 + (t[1] - 0.8) ** 2  # noqa: E731
    a = bo_optimize(f, box, budget=12, seed=4)
    b = bo_optimize(f, box, budget=12, seed=4)
    assert a.history_csv(box.names) == b.history_csv(box.names)
