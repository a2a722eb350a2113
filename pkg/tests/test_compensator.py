import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tilc.compensator import (CompensatorConfig, CompensatorState, Mode, TilCompensator, compensator_step, pi_step,
                              scheduled_gain, switching_step)
from tilc.errors import InvalidConfigurationError

CFG = CompensatorConfig()
DT = CFG.sample_time
BIG = 1e9


def test_schedule_branches():
    kp = CFG.kp_nominal_front
    assert scheduled_gain(CFG, CFG.v_ub + 10) == kp
    assert scheduled_gain(CFG, CFG.v_lb) == pytest.approx(kp * CFG.kp_lb)
    assert scheduled_gain(CFG, 1.0) == pytest.approx(kp * CFG.kp_lb)
    cfg = CompensatorConfig(kp_lb=0.2)
    assert scheduled_gain(cfg, np.nextafter(cfg.v_ub, 0.0)) == pytest.approx(kp * 1.2)


def test_continuous_schedule_variant():
    cfg = CompensatorConfig(kp_lb=0.2, continuous_schedule=True)
    below = scheduled_gain(cfg, np.nextafter(cfg.v_ub, 0.0))
    assert below == pytest.approx(cfg.kp_nominal_front)
    assert scheduled_gain(cfg, cfg.v_lb) == pytest.approx(0.2 * cfg.kp_nominal_front)


def test_config_invariants():
    for bad in (dict(kp_nominal_front=0.0), dict(Ti_rear=-1.0), dict(v_lb=30.0), dict(kp_lb=1.5)):
        with pytest.raises(InvalidConfigurationError):
            CompensatorConfig(**bad)


def test_zero_error_zero_output():
    s = CompensatorState()
    assert all(pi_step(s, 800.0, 0.2, 0.0, DT, -BIG, BIG) == 0.0 for _ in range(100))


def test_ramp_matches_continuous_pi():
    kp, ti, e0 = 800.0, 0.2, 0.01
    s = CompensatorState()
    out = np.array([pi_step(s, kp, ti, e0, DT, -BIG, BIG) for _ in range(201)])
    t = np.arange(201) * DT
    exact = kp * e0 * (1.0 + t / ti)
    assert np.max(np.abs(out - exact)) < 0.005 * exact[-1]
    assert out[-1] == pytest.approx(kp * e0 * (1.0 + 1.0 / ti), rel=0.005)
    slope = np.diff(out) / DT
    assert slope[-1] == pytest.approx(kp * e0 / ti, rel=1e-9)


def _state_space(kp, ti):
    """Identify the unsaturated regulator as x+ = A x + B e, u = C x + D e with x = (w, u_prev)."""
    def run(w, u, e):
        s = CompensatorState(integrator_state=w, previous_output=u)
        out = pi_step(s, kp, ti, e, DT, -BIG, BIG)
        return np.array([s.integrator_state, s.previous_output]), out
    cols = [run(*v) for v in ((1, 0, 0), (0, 1, 0), (0, 0, 1))]
    a = np.column_stack([cols[0][0], cols[1][0]])
    b = cols[2][0]
    c = np.array([cols[0][1], cols[1][1]])
    return a, b, c, cols[2][1]


def test_frequency_response_matches_continuous():
    kp, ti = 800.0, 0.2
    a, b, c, d = _state_space(kp, ti)
    for f in np.linspace(0.1, 10.0, 100):
        w = 2 * math.pi * f
        z = np.exp(1j * w * DT)
        h = c @ np.linalg.solve(z * np.eye(2) - a, b) + d
        r = kp * (1 + 1j * w * ti) / (1j * w * ti)
        assert abs(abs(h) / abs(r) - 1.0) < 0.01


def test_windup_free_recovery():
    s = CompensatorState()
    kp, ti, hi = 800.0, 0.2, 1500.0
    for _ in range(400):
        out = pi_step(s, kp, ti, 1.0, DT, -hi, hi)
        assert abs(s.integrator_state) <= hi + kp * 1.0
    assert out == hi
    left = None
    for k in range(1, 20):
        if pi_step(s, kp, ti, -0.05, DT, -hi, hi) < hi:
            left = k
            break
    assert left is not None and left <= 5


@settings(max_examples=50, deadline=None)
@given(errors=st.lists(st.floats(-0.5, 0.5), min_size=1, max_size=60), nominal=st.floats(0.0, 3000.0))
def test_total_command_within_limits(errors, nominal):
    comp = TilCompensator(CFG, "front")
    for e in errors:
        delta = comp.step(0.08, 0.08 - e, 30.0, False, nominal)
        assert -1e-9 <= nominal + delta <= CFG.torque_max_front + 1e-9


def test_switching_modes():
    s = CompensatorState()
    for _ in range(10):
        assert switching_step(s, CFG, 0.07, False, 30.0).mode == Mode.TRACK_TWIN
    d = switching_step(s, CFG, 0.07, True, 30.0)
    assert d.switched and d.mode == Mode.HOLD_TOTAL_TORQUE and d.reference == CFG.fallback_slip_ref
    assert switching_step(s, CFG, 0.07, True, 2.0).mode == Mode.OFF
    assert switching_step(s, CFG, 0.07, False, 30.0).mode == Mode.OFF  # latched


def test_bumpless_switch_unit():
    comp = TilCompensator(CFG, "front")
    nominal = 1800.0
    for k in range(50):
        comp.step(0.08, 0.07 + 0.0002 * k, 20.0, False, nominal)
    before = comp.last_total
    delta = comp.step(0.0, 0.085, 20.0, True, nominal)
    assert comp.state.mode == Mode.HOLD_TOTAL_TORQUE
    assert abs(delta - before) < 1.0  # nominal drops to 0, correction carries the full torque


def test_deactivation_below_10kmh():
    comp = TilCompensator(CFG, "rear")
    comp.step(0.08, 0.05, 20.0, False, 500.0)
    assert comp.step(0.08, 0.05, 2.7, False, 500.0) == 0.0
    assert comp.step(0.08, 0.05, 20.0, False, 500.0) == 0.0


def test_non_finite_error_latches_off():
    comp = TilCompensator(CFG, "front")
    comp.step(0.08, 0.05, 20.0, False, 500.0)
    assert compensator_step(comp, 0.08, float("nan"), 20.0, False, 500.0) == 0.0
    assert comp.state.fault and comp.state.mode == Mode.OFF
    assert compensator_step(comp, 0.08, 0.05, 20.0, False, 500.0) == 0.0


def test_sign_convention_and_zero_mismatch():
    comp = TilCompensator(CFG, "front")
    assert comp.step(0.08, 0.06, 30.0, False, 1000.0) > 0.0  # plant under-braking: add torque
    comp = TilCompensator(CFG, "front")
    assert comp.step(0.08, 0.10, 30.0, False, 1000.0) < 0.0
    comp = TilCompensator(CFG, "front")
    assert all(abs(comp.step(0.08, 0.08, 30.0, False, 1000.0)) < 1.0 for _ in range(100))


def test_front_rear_distinct_gains():
    cfg = CompensatorConfig(kp_nominal_front=900.0, Ti_front=0.1, kp_nominal_rear=300.0, Ti_rear=0.5)
    front, rear = TilCompensator(cfg, "front"), TilCompensator(cfg, "rear")
    for _ in range(5):
        f = front.step(0.08, 0.07, 30.0, False, 500.0)
        r = rear.step(0.08, 0.07, 30.0, False, 500.0)
    assert f != r and f > r > 0.0
