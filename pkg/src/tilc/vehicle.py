"""Longitudinal two-track vehicle: chassis, four wheels, Pacejka tires and
second-order brake actuators.

Wheel order everywhere is fl, fr, rl, rr.  Brake torques are positive.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import kernels as K
from .errors import DegenerateSpeedError, InvalidConfigurationError, NumericalDivergenceError

WHEELS = ("fl", "fr", "rl", "rr")


@dataclass(frozen=True)
class TireParams:
    B: float = 12.0
    C: float = 1.9
    D: float = 1.0
    E: float = 0.97
    peak_friction_scale: float = 1.0  # mu_s
    shape_factor_scale: float = 1.0  # c_s
    vertical_load_sensitivity: float = 1.0e-5  # 1/N, linear derating of D around nominal_load
    nominal_load: float = 4000.0

    def __post_init__(self):
        if self.peak_friction_scale <= 0 or self.shape_factor_scale <= 0:
            raise InvalidConfigurationError("tire scalings must be positive")
        peak = self.D * self.peak_friction_scale
        if not 0.0 < peak <= 2.0:
            raise InvalidConfigurationError(f"effective peak friction {peak} outside (0, 2]")
        if self.B <= 0 or self.C <= 0:
            raise InvalidConfigurationError("B and C must be positive")

    def scaled(self, mu_s: float, c_s: float) -> "TireParams":
        return replace(self, peak_friction_scale=mu_s, shape_factor_scale=c_s)


@dataclass(frozen=True)
class VehicleParams:
    """Defaults reproduce the sport car of the braking case study."""

    total_mass: float = 1612.0
    wheel_radius_front: float = 0.33
    wheel_radius_rear: float = 0.35
    wheel_inertia_front: float = 1.49
    wheel_inertia_rear: float = 2.25
    cog_to_front_axle: float = 1.57
    cog_to_rear_axle: float = 1.03
    cog_height: float = 0.46
    wheelbase: float = 2.60
    gravity: float = 9.81
    aero_drag_area_coeff: float = 0.6
    air_density: float = 1.225
    max_brake_torque_front: float = 3000.0
    max_brake_torque_rear: float = 1500.0
    actuator_natural_freq: float = 70.0
    actuator_damping: float = 0.7
    actuator_slew_limit: float = 30000.0
    standstill_speed: float = 0.5
    tire: TireParams = field(default_factory=TireParams)

    def __post_init__(self):
        positive = ("total_mass", "wheel_radius_front", "wheel_radius_rear", "wheel_inertia_front",
                    "wheel_inertia_rear", "cog_to_front_axle", "cog_to_rear_axle", "cog_height",
                    "wheelbase", "gravity", "max_brake_torque_front", "max_brake_torque_rear",
                    "actuator_natural_freq", "actuator_damping", "actuator_slew_limit")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidConfigurationError(f"{name} must be strictly positive")
        if self.aero_drag_area_coeff < 0 or self.air_density < 0:
            raise InvalidConfigurationError("drag terms must be non-negative")
        if abs(self.cog_to_front_axle + self.cog_to_rear_axle - self.wheelbase) > 1e-9 * self.wheelbase:
            raise InvalidConfigurationError(
                f"l_f + l_r = {self.cog_to_front_axle + self.cog_to_rear_axle} "
                f"differs from wheelbase {self.wheelbase}")

    @property
    def radii(self) -> np.ndarray:
        return np.array([self.wheel_radius_front] * 2 + [self.wheel_radius_rear] * 2)

    @property
    def inertias(self) -> np.ndarray:
        return np.array([self.wheel_inertia_front] * 2 + [self.wheel_inertia_rear] * 2)

    @property
    def max_torques(self) -> np.ndarray:
        return np.array([self.max_brake_torque_front] * 2 + [self.max_brake_torque_rear] * 2)

    @functools.cached_property
    def packed(self) -> np.ndarray:
        p = np.zeros(K.N_PARAMS)
        p[K.P_MASS] = self.total_mass
        p[K.P_GRAVITY] = self.gravity
        p[K.P_LF] = self.cog_to_front_axle
        p[K.P_LR] = self.cog_to_rear_axle
        p[K.P_H] = self.cog_height
        p[K.P_DRAG] = 0.5 * self.air_density * self.aero_drag_area_coeff
        p[K.P_RADIUS:K.P_RADIUS + 4] = self.radii
        p[K.P_INERTIA:K.P_INERTIA + 4] = self.inertias
        t = self.tire
        p[K.P_TIRE_B], p[K.P_TIRE_C], p[K.P_TIRE_D], p[K.P_TIRE_E] = t.B, t.C, t.D, t.E
        p[K.P_MU_S] = t.peak_friction_scale
        p[K.P_C_S] = t.shape_factor_scale
        p[K.P_LOAD_SENS] = t.vertical_load_sensitivity
        p[K.P_FZ_NOM] = t.nominal_load
        p[K.P_TMAX:K.P_TMAX + 4] = self.max_torques
        p[K.P_SLEW] = self.actuator_slew_limit
        p[K.P_STANDSTILL] = self.standstill_speed
        return p


@dataclass(frozen=True)
class ConcentratedMass:
    mass: float
    longitudinal_offset: float  # m from nominal COG, positive forward
    lateral_offset: float = 0.0  # m, positive left; loads are split evenly so this is informational
    height: float | None = None  # m above ground; None keeps the base COG height

    def __post_init__(self):
        if self.mass < 0:
            raise InvalidConfigurationError("concentrated mass must be >= 0")


# Unmodelled loads: driver and passenger seats, two unbalanced front-trunk masses.
TABLE2_MASSES = (
    ConcentratedMass(75.0, 0.25, 0.37, 0.45),
    ConcentratedMass(80.0, 0.25, -0.37, 0.45),
    ConcentratedMass(90.0, 2.00, 0.35, 0.50),
    ConcentratedMass(30.0, 2.00, -0.35, 0.50),
)


@dataclass(frozen=True)
class DriverInput:
    throttle: float = 0.0
    brake: float = 0.0
    steer: float = 0.0
    gear: int = 0

    def check_straight_braking(self):
        if self.throttle != 0.0 or self.steer != 0.0:
            raise InvalidConfigurationError("straight braking requires zero throttle and steer")


@dataclass
class VehicleState:
    chassis_speed: float
    chassis_position: float
    wheel_rates: np.ndarray
    actuated_torque: np.ndarray
    torque_rate: np.ndarray
    longitudinal_accel: float = 0.0
    slips: np.ndarray = field(default_factory=lambda: np.zeros(4))

    @classmethod
    def rolling(cls, params: VehicleParams, speed: float, position: float = 0.0) -> "VehicleState":
        """Free-rolling state at ``speed`` with idle actuators."""
        return cls(float(speed), float(position), speed / params.radii,
                   np.zeros(4), np.zeros(4), 0.0, np.zeros(4))

    @property
    def actuator_states(self) -> np.ndarray:
        return np.column_stack([self.actuated_torque, self.torque_rate])

    def copy(self) -> "VehicleState":
        return VehicleState(self.chassis_speed, self.chassis_position, self.wheel_rates.copy(),
                            self.actuated_torque.copy(), self.torque_rate.copy(),
                            self.longitudinal_accel, self.slips.copy())

    def kinetic_energy(self, params: VehicleParams) -> float:
        rot = 0.5 * float(np.sum(params.inertias * self.wheel_rates ** 2))
        return 0.5 * params.total_mass * self.chassis_speed ** 2 + rot


def wheel_slip(chassis_point_speed: float, wheel_rate: float, radius: float) -> float:
    """Longitudinal slip (v - wR) / max(v, wR); in [0, 1] while braking."""
    slip = K.slip_kernel(float(chassis_point_speed), float(wheel_rate), float(radius))
    if np.isnan(slip):
        raise DegenerateSpeedError("slip undefined at zero chassis and wheel speed")
    return slip


def pacejka_fx(slip, vertical_load: float, tire: TireParams):
    """Longitudinal tire force magnitude [N]; positive braking slip gives a
    positive value, which acts rearward on the chassis."""
    args = (tire.B, tire.C, tire.D, tire.E, tire.peak_friction_scale, tire.shape_factor_scale,
            tire.vertical_load_sensitivity, tire.nominal_load)
    if np.ndim(slip) == 0:
        return K.pacejka_kernel(float(slip), float(vertical_load), *args)
    flat = np.asarray(slip, dtype=float).ravel()
    out = np.array([K.pacejka_kernel(s, float(vertical_load), *args) for s in flat])
    return out.reshape(np.shape(slip))


def apply_mass_config(base: VehicleParams, masses: Sequence[ConcentratedMass]) -> VehicleParams:
    """Add point masses; returns params with the shifted COG and new total mass."""
    if not masses:
        return base
    total = base.total_mass + sum(m.mass for m in masses)
    shift = sum(m.mass * m.longitudinal_offset for m in masses) / total
    height = (base.total_mass * base.cog_height
              + sum(m.mass * (base.cog_height if m.height is None else m.height) for m in masses)) / total
    lf = base.cog_to_front_axle - shift
    lr = base.cog_to_rear_axle + shift
    if lf <= 0 or lr <= 0:
        raise InvalidConfigurationError(f"COG moved outside the wheelbase (l_f={lf:.3f}, l_r={lr:.3f})")
    return replace(base, total_mass=total, cog_to_front_axle=lf, cog_to_rear_axle=base.wheelbase - lf,
                   cog_height=height)


def vertical_loads(params: VehicleParams, longitudinal_accel: float, return_flag: bool = False):
    out = np.empty(4)
    clamped = K.vertical_loads_kernel(params.total_mass, params.gravity, params.cog_to_front_axle,
                                      params.cog_to_rear_axle, params.cog_height,
                                      float(longitudinal_accel), out)
    if return_flag:
        return out, bool(clamped)
    return out


@functools.lru_cache(maxsize=64)
def _actuator_zoh(wn: float, zeta: float, dt: float):
    a, b = K.actuator_matrices(wn, zeta)
    ad, bd = K.zoh_kernel(a, b, dt)
    ad.setflags(write=False)
    bd.setflags(write=False)
    return ad, bd


def actuator_step(state, commanded_torque: float, dt: float, params: VehicleParams,
                  max_torque: float | None = None, slew_limit: float | None = None):
    """Advance one (torque, rate) pair by ``dt`` with an exact ZOH update.

    ``slew_limit`` defaults to the params value; pass ``np.inf`` for the
    purely linear response.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    ad, bd = _actuator_zoh(params.actuator_natural_freq, params.actuator_damping, float(dt))
    tmax = params.max_brake_torque_front if max_torque is None else max_torque
    slew = params.actuator_slew_limit if slew_limit is None else slew_limit
    torque, rate = state
    return K.actuator_kernel(float(torque), float(rate), float(commanded_torque), ad, bd,
                             float(tmax), float(slew), float(dt))


def step_vehicle(state: VehicleState, torque_commands, driver: DriverInput, params: VehicleParams,
                 dt: float = 1e-3) -> VehicleState:
    """Advance the vehicle by one fixed step (1 ms nominal)."""
    driver.check_straight_braking()
    ad, bd = _actuator_zoh(params.actuator_natural_freq, params.actuator_damping, float(dt))
    cmds = np.asarray(torque_commands, dtype=float)
    v, pos, omega, tact, tdot, ax, slips, status = K.vehicle_step_kernel(
        state.chassis_speed, state.chassis_position, state.wheel_rates, state.actuated_torque,
        state.torque_rate, state.longitudinal_accel, state.slips, cmds, params.packed, ad, bd, float(dt))
    if status != K.STATUS_OK:
        raise NumericalDivergenceError("vehicle state became non-finite", last_state=state)
    return VehicleState(v, pos, omega, tact, tdot, ax, slips)
