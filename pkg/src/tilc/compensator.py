"""Residual slip compensator acting on the twin/plant mismatch.

The PI law kp (1 + s Ti) / (s Ti) is realized as ``u = kp e + w`` where
``w`` is the *saturated* output passed through 1 / (1 + s Ti).  Without
saturation this is exactly the PI; with saturation the feedback state can
never wind up past the limits.  The filter is Tustin-discretized, so the
whole regulator is the Tustin image of the continuous PI.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from .errors import InvalidConfigurationError


class Mode(enum.IntEnum):
    TRACK_TWIN = 0
    HOLD_TOTAL_TORQUE = 1
    OFF = 2


@dataclass(frozen=True)
class CompensatorConfig:
    kp_nominal_front: float = 800.0  # N m per unit slip
    Ti_front: float = 0.2  # s
    kp_nominal_rear: float = 800.0
    Ti_rear: float = 0.2
    v_lb: float = 8.0  # m/s
    v_ub: float = 25.0
    kp_lb: float = 0.3
    continuous_schedule: bool = False
    fallback_slip_ref: float = 0.08
    sample_rate: float = 200.0  # Hz
    torque_max_front: float = 3000.0
    torque_max_rear: float = 1500.0
    deactivation_speed: float = 10.0 / 3.6

    def __post_init__(self):
        if min(self.kp_nominal_front, self.kp_nominal_rear) <= 0:
            raise InvalidConfigurationError("kp must be > 0")
        if min(self.Ti_front, self.Ti_rear) <= 0:
            raise InvalidConfigurationError("Ti must be > 0")
        if not self.v_lb < self.v_ub:
            raise InvalidConfigurationError("schedule needs v_lb < v_ub")
        if not 0.0 <= self.kp_lb <= 1.0:
            raise InvalidConfigurationError("kp_lb must lie in [0, 1]")
        if self.sample_rate <= 0:
            raise InvalidConfigurationError("sample_rate must be > 0")

    @property
    def sample_time(self) -> float:
        return 1.0 / self.sample_rate

    def gains(self, axle: str) -> tuple[float, float]:
        if axle == "front":
            return self.kp_nominal_front, self.Ti_front
        if axle == "rear":
            return self.kp_nominal_rear, self.Ti_rear
        raise ValueError(f"unknown axle {axle!r}")

    def torque_max(self, axle: str) -> float:
        return self.torque_max_front if axle == "front" else self.torque_max_rear

    @property
    def theta(self) -> tuple[float, float, float, float]:
        """Tunable vector (kp_f, Ti_f, kp_r, Ti_r)."""
        return (self.kp_nominal_front, self.Ti_front, self.kp_nominal_rear, self.Ti_rear)


@dataclass
class CompensatorState:
    integrator_state: float = 0.0  # w: filtered saturated output
    previous_output: float = 0.0  # saturated PI output of the last sample
    previous_error: float = 0.0
    mode: Mode = Mode.TRACK_TWIN
    time: float = 0.0
    fault: bool = False


def scheduled_gain(config: CompensatorConfig, chassis_speed: float, axle: str = "front") -> float:
    """Speed-scheduled proportional gain.

    The printed law jumps at v_ub by kp_lb * kp_nom (the middle branch
    reaches kp_nom (1 + kp_lb) from below); ``continuous_schedule`` swaps in
    a ramp from kp_lb to 1 instead.
    """
    kp_nom, _ = config.gains(axle)
    v_lb, v_ub, kp_lb = config.v_lb, config.v_ub, config.kp_lb
    if chassis_speed >= v_ub:
        return kp_nom
    if chassis_speed >= v_lb:
        frac = (chassis_speed - v_lb) / (v_ub - v_lb)
        if config.continuous_schedule:
            return kp_nom * (kp_lb + (1.0 - kp_lb) * frac)
        return kp_nom * (kp_lb + frac)
    return kp_nom * kp_lb


def _tustin_coeffs(ti: float, dt: float) -> tuple[float, float]:
    den = 2.0 * ti + dt
    return (2.0 * ti - dt) / den, dt / den


def pi_step(state: CompensatorState, kp: float, ti: float, error: float, dt: float,
            lower: float, upper: float) -> float:
    """One sample of the anti-windup PI; returns the saturated output."""
    if not math.isfinite(error):
        state.fault = True
        state.mode = Mode.OFF
        state.integrator_state = 0.0
        state.previous_output = 0.0
        return 0.0
    alpha, beta = _tustin_coeffs(ti, dt)
    raw = (kp * error + alpha * state.integrator_state + beta * state.previous_output) / (1.0 - beta)
    out = min(max(raw, lower), upper)
    state.integrator_state = alpha * state.integrator_state + beta * (out + state.previous_output)
    state.previous_output = out
    state.previous_error = error
    state.time += dt
    return out


def seed_output(state: CompensatorState, kp: float, ti: float, error: float, dt: float, target: float):
    """Re-seed the PI memory so that the next ``pi_step`` with ``error``
    returns exactly ``target`` (bumpless transfer)."""
    alpha, beta = _tustin_coeffs(ti, dt)
    state.previous_output = target
    if alpha > 0.0:
        state.integrator_state = ((1.0 - 2.0 * beta) * target - kp * error) / alpha
    else:
        state.integrator_state = target - kp * error


@dataclass
class SwitchDecision:
    reference: float
    mode: Mode
    switched: bool = False


def switching_step(state: CompensatorState, config: CompensatorConfig, twin_slip_ref: float,
                   twin_done: bool, chassis_speed: float) -> SwitchDecision:
    """Mode logic: follow the twin, hold the total torque once the twin has
    stopped, switch off below the deactivation speed (latched)."""
    if state.mode == Mode.OFF or chassis_speed < config.deactivation_speed:
        state.mode = Mode.OFF
        return SwitchDecision(0.0, Mode.OFF)
    if state.mode == Mode.TRACK_TWIN and twin_done:
        state.mode = Mode.HOLD_TOTAL_TORQUE
        return SwitchDecision(config.fallback_slip_ref, state.mode, switched=True)
    if state.mode == Mode.HOLD_TOTAL_TORQUE:
        return SwitchDecision(config.fallback_slip_ref, state.mode)
    return SwitchDecision(twin_slip_ref, state.mode)


@dataclass
class TilCompensator:
    """Per-wheel compensator; ``step`` returns the additive torque correction."""

    config: CompensatorConfig
    axle: str = "front"
    state: CompensatorState = field(default_factory=CompensatorState)
    last_total: float = 0.0
    last_reference: float = 0.0

    def reset(self):
        self.state = CompensatorState()
        self.last_total = 0.0
        self.last_reference = 0.0

    def step(self, twin_slip: float, measured_slip: float, chassis_speed: float, twin_done: bool,
             nominal_torque: float) -> float:
        cfg = self.config
        decision = switching_step(self.state, cfg, twin_slip, twin_done, chassis_speed)
        self.last_reference = decision.reference
        if decision.mode == Mode.OFF:
            self.last_total = 0.0
            return 0.0
        if decision.mode == Mode.HOLD_TOTAL_TORQUE:
            # the twin is frozen: its nominal action is gone
            nominal_torque = 0.0
        kp_nom, ti = cfg.gains(self.axle)
        kp = scheduled_gain(cfg, chassis_speed, self.axle)
        error = decision.reference - measured_slip
        dt = cfg.sample_time
        if decision.switched:
            seed_output(self.state, kp, ti, error, dt, self.last_total - nominal_torque)
        tmax = cfg.torque_max(self.axle)
        delta = pi_step(self.state, kp, ti, error, dt, -nominal_torque, tmax - nominal_torque)
        if self.state.mode == Mode.OFF:
            self.last_total = 0.0
            return 0.0
        self.last_total = nominal_torque + delta
        return delta


def compensator_step(comp: TilCompensator, twin_slip: float, measured_slip: float, chassis_speed: float,
                     twin_done: bool, nominal_torque: float) -> float:
    return comp.step(twin_slip, measured_slip, chassis_speed, twin_done, nominal_torque)
