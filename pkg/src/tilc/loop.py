"""Multi-rate closed loop: plant and twin at 1 ms, controllers at 5 ms.

Two architectures share the same world:

* ``til``: slip MPCs run on the noiseless twin and supply the nominal torque;
  per-wheel compensators close a second loop on the measured plant slip.
* ``mpc``: the baseline, the same MPCs fed straight from the plant sensors.
"""
from __future__ import annotations

import io
import math
import os
import tempfile
import time as _time
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels as K
from .compensator import CompensatorConfig, Mode, TilCompensator
from .errors import InvalidConfigurationError, NumericalDivergenceError
from .mpc import MpcConfig, SlipMpc, WheelModelParams
from .sensors import NoiseConfig, SensorRig
from .vehicle import (TABLE2_MASSES, WHEELS, VehicleParams, VehicleState,
                      _actuator_zoh, apply_mass_config)

DT = 1e-3
CONTROL_DIVIDER = 5  # controller period in plant steps
STOP_SPEED = 10.0 / 3.6
AXLES = ("front", "front", "rear", "rear")


@dataclass(frozen=True)
class Scenario:
    name: str = "nominal"
    initial_speed: float = 196.0 / 3.6
    brake_trigger_time: float = 1.0
    # piecewise-constant reference; times are relative to the brake trigger
    reference_times: tuple = (0.0,)
    reference_values: tuple = (0.08,)
    pulse_amplitude: float = 0.0
    pulse_period: float = 0.5
    noise: bool = False
    masses: bool = False
    mu_s: float = 1.0
    c_s: float = 1.0
    duration_cap: float = 12.0
    seed: int = 0
    # constant brake-torque disturbance on every plant wheel while braking [N m]
    torque_disturbance: float = 0.0

    def __post_init__(self):
        if not self.initial_speed > STOP_SPEED:
            raise InvalidConfigurationError("initial_speed must exceed the 10 km/h stop threshold")
        if len(self.reference_times) != len(self.reference_values) or not self.reference_times:
            raise InvalidConfigurationError("reference_times and reference_values must pair up")
        if any(b <= a for a, b in zip(self.reference_times, self.reference_times[1:])):
            raise InvalidConfigurationError("reference_times must be strictly increasing")
        lo = min(self.reference_values) - abs(self.pulse_amplitude)
        hi = max(self.reference_values) + abs(self.pulse_amplitude)
        if not (0.0 < lo and hi <= 0.3):
            raise InvalidConfigurationError("reference values must lie in (0, 0.3]")
        if self.pulse_period <= 0 or self.duration_cap <= self.brake_trigger_time:
            raise InvalidConfigurationError("bad pulse period or duration cap")

    def reference(self, t: float) -> float:
        """Slip reference at absolute time ``t`` (held at the first value before the trigger)."""
        tau = t - self.brake_trigger_time
        idx = int(np.searchsorted(self.reference_times, tau, side="right")) - 1
        value = self.reference_values[max(idx, 0)]
        if self.pulse_amplitude and tau >= 0.0:
            phase = (tau / self.pulse_period) % 1.0
            value += self.pulse_amplitude if phase < 0.5 else -self.pulse_amplitude
        return float(value)


@dataclass(frozen=True)
class Settings:
    """Everything a run needs besides the scenario."""

    vehicle: VehicleParams = field(default_factory=VehicleParams)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    compensator: CompensatorConfig = field(default_factory=CompensatorConfig)
    # prediction-model (R, J) of the baseline MPC per axle; None keeps nominal
    eol_radius_front: float | None = None
    eol_inertia_front: float | None = None
    eol_radius_rear: float | None = None
    eol_inertia_rear: float | None = None
    mpc_reference: str = "scripted"  # scripted | twin (baseline ablation)
    driver_brake_front: float = 1000.0  # N m at full pedal
    driver_brake_rear: float = 500.0
    masses: tuple = TABLE2_MASSES

    def __post_init__(self):
        if self.mpc_reference not in ("scripted", "twin"):
            raise InvalidConfigurationError("mpc_reference must be 'scripted' or 'twin'")

    def eol_wheel(self, wheel: int) -> WheelModelParams:
        base = WheelModelParams.from_vehicle(self.vehicle, wheel)
        if wheel < 2:
            r, j = self.eol_radius_front, self.eol_inertia_front
        else:
            r, j = self.eol_radius_rear, self.eol_inertia_rear
        return replace(base, radius=base.radius if r is None else r, inertia=base.inertia if j is None else j)

    def plant_params(self, scenario: Scenario) -> VehicleParams:
        params = self.vehicle
        if scenario.masses:
            params = apply_mass_config(params, list(self.masses))
        if scenario.mu_s != 1.0 or scenario.c_s != 1.0:
            params = replace(params, tire=params.tire.scaled(scenario.mu_s, scenario.c_s))
        return params

    def mpc_config(self, wheel: int) -> MpcConfig:
        tmax = self.vehicle.max_torques[wheel]
        return replace(self.mpc, torque_max=float(min(self.mpc.torque_max, tmax)))

    def compensator_config(self) -> CompensatorConfig:
        return replace(self.compensator, torque_max_front=self.vehicle.max_brake_torque_front,
                       torque_max_rear=self.vehicle.max_brake_torque_rear)


# (name, unit, columns); per-wheel signals expand to four columns
SCALAR_SIGNALS = (
    ("time", "s"), ("active", "-"), ("v", "m/s"), ("v_meas", "m/s"), ("a", "m/s^2"),
    ("a_meas", "m/s^2"), ("twin_v", "m/s"), ("twin_active", "-"),
)
WHEEL_SIGNALS = (
    ("slip_ref", "-"), ("slip_eff_ref", "-"), ("slip_twin", "-"), ("slip", "-"), ("slip_meas", "-"),
    ("slip_pred", "-"), ("torque_nominal", "N*m"), ("torque_delta", "N*m"), ("torque_cmd", "N*m"),
    ("torque_act", "N*m"), ("wheel_rate", "rad/s"), ("mode", "-"),
)


@dataclass
class RunLog:
    """Synchronized 1 ms traces of one run.

    ``slip_pred`` holds, at each controller tick, the slip the MPC predicts
    for the horizon tip (NaN elsewhere).  Wall-clock timings live in
    ``controller_time`` / ``twin_time`` and never reach the CSV.
    """

    scenario: str
    controller: str
    signals: dict
    controller_time: np.ndarray
    twin_time: np.ndarray
    activation_time: float = math.nan
    twin_stop_time: float = math.nan
    completed: bool = False
    error: str = ""
    horizon_steps: int = 5

    def __len__(self):
        return len(self.signals["time"])

    def __getattr__(self, name):
        signals = self.__dict__.get("signals")
        if signals is not None and name in signals:
            return signals[name]
        raise AttributeError(name)

    @property
    def active_mask(self) -> np.ndarray:
        return self.signals["active"].astype(bool)

    def columns(self) -> list[str]:
        cols = [f"{n} [{u}]" for n, u in SCALAR_SIGNALS]
        for n, u in WHEEL_SIGNALS:
            cols += [f"{n}_{w} [{u}]" for w in WHEELS]
        return cols

    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.columns()) + "\r\n")
        parts = [self.signals[n][:, None] for n, _ in SCALAR_SIGNALS]
        parts += [self.signals[n] for n, _ in WHEEL_SIGNALS]
        table = np.hstack([np.asarray(p, dtype=float) for p in parts])
        for row in table:
            buf.write(",".join(_fmt(x) for x in row) + "\r\n")
        return buf.getvalue()

    def to_csv(self, path):
        write_atomic(path, self.csv_text())


def _fmt(x: float) -> str:
    if math.isnan(x):
        return "nan"
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(float(f"{x:.10g}"))


def write_atomic(path, text: str):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".csv")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Body:
    """Minimal mutable wrapper around the jitted vehicle step."""

    __slots__ = ("v", "pos", "omega", "tact", "tdot", "ax", "slips", "params", "packed", "ad", "bd")

    def __init__(self, state: VehicleState, params: VehicleParams):
        self.params = params
        self.packed = params.packed
        self.ad, self.bd = _actuator_zoh(params.actuator_natural_freq, params.actuator_damping, DT)
        self.load(state)

    def load(self, s: VehicleState):
        self.v, self.pos, self.ax = s.chassis_speed, s.chassis_position, s.longitudinal_accel
        self.omega = np.array(s.wheel_rates, dtype=float)
        self.tact = np.array(s.actuated_torque, dtype=float)
        self.tdot = np.array(s.torque_rate, dtype=float)
        self.slips = np.array(s.slips, dtype=float)

    def state(self) -> VehicleState:
        return VehicleState(self.v, self.pos, self.omega.copy(), self.tact.copy(), self.tdot.copy(),
                            self.ax, self.slips.copy())

    def step(self, cmds: np.ndarray):
        v, pos, omega, tact, tdot, ax, slips, status = K.vehicle_step_kernel(
            self.v, self.pos, self.omega, self.tact, self.tdot, self.ax, self.slips, cmds,
            self.packed, self.ad, self.bd, DT)
        if status != K.STATUS_OK:
            raise NumericalDivergenceError("vehicle state became non-finite", last_state=self.state())
        self.v, self.pos, self.omega, self.tact, self.tdot, self.ax, self.slips = (
            v, pos, omega, tact, tdot, ax, slips)


def activate_twin(params: VehicleParams, measurements: dict) -> VehicleState:
    """Initialize the twin from plant measurements (speed, wheel rates,
    acceleration, actuator torques and rates)."""
    v = float(measurements["speed"])
    omega = np.asarray(measurements["wheel_rates"], dtype=float)
    accel = float(measurements.get("accel", 0.0))
    tact = np.asarray(measurements.get("torque", np.zeros(4)), dtype=float)
    tdot = np.asarray(measurements.get("torque_rate", np.zeros(4)), dtype=float)
    values = np.concatenate([[v, accel], omega, tact, tdot])
    if not np.all(np.isfinite(values)):
        raise InvalidConfigurationError("twin activation refused: non-finite measurement")
    v = max(v, 0.0)
    omega = np.maximum(omega, 0.0)
    radii = params.radii
    slips = np.array([K.slip_kernel(v, omega[i], radii[i]) for i in range(4)])
    slips = np.where(np.isnan(slips), 0.0, slips)
    return VehicleState(v, float(measurements.get("position", 0.0)), omega.copy(), tact.copy(), tdot.copy(),
                        accel, slips)


@dataclass
class World:
    scenario: Scenario
    settings: Settings
    controller: str
    plant: _Body
    twin: _Body
    rig: SensorRig
    twin_mpcs: list
    plant_mpcs: list
    compensators: list
    k: int = 0
    active: bool = False
    twin_active: bool = False
    twin_done: bool = False
    nominal_cmd: np.ndarray = field(default_factory=lambda: np.zeros(4))
    delta_cmd: np.ndarray = field(default_factory=lambda: np.zeros(4))
    plant_cmd: np.ndarray = field(default_factory=lambda: np.zeros(4))
    eff_ref: np.ndarray = field(default_factory=lambda: np.zeros(4))
    pred: np.ndarray = field(default_factory=lambda: np.full(4, np.nan))
    meas_v: float = 0.0
    meas_a: float = 0.0
    meas_slip: np.ndarray = field(default_factory=lambda: np.zeros(4))
    baseline_off: bool = False
    last_controller_time: float = math.nan
    last_twin_time: float = math.nan

    @property
    def time(self) -> float:
        return self.k * DT


def make_world(scenario: Scenario, settings: Settings, controller: str = "til") -> World:
    if controller not in ("til", "mpc"):
        raise InvalidConfigurationError(f"unknown controller {controller!r}")
    plant_params = settings.plant_params(scenario)
    plant = _Body(VehicleState.rolling(plant_params, scenario.initial_speed), plant_params)
    twin = _Body(VehicleState.rolling(settings.vehicle, scenario.initial_speed), settings.vehicle)
    noise = replace(settings.noise, seed=scenario.seed) if scenario.noise else NoiseConfig.noiseless(scenario.seed)
    twin_mpcs = [SlipMpc(WheelModelParams.from_vehicle(settings.vehicle, i), settings.mpc_config(i))
                 for i in range(4)]
    plant_mpcs = [SlipMpc(settings.eol_wheel(i), settings.mpc_config(i)) for i in range(4)]
    ccfg = settings.compensator_config()
    comps = [TilCompensator(ccfg, AXLES[i]) for i in range(4)]
    return World(scenario, settings, controller, plant, twin, SensorRig(noise), twin_mpcs, plant_mpcs, comps)


def _measure(world: World):
    plant, rig = world.plant, world.rig
    world.meas_a = rig.measure_acceleration(plant.ax)
    world.meas_v = rig.measure_chassis_speed(plant.v, DT)
    w_meas = rig.measure_wheel_rate(plant.omega, world.time)
    world.meas_slip = np.asarray(rig.measured_slip(world.meas_v, w_meas, world.settings.vehicle.radii))
    return w_meas


def _preview(scenario: Scenario, t: float, horizon: int, ts: float) -> np.ndarray:
    return np.array([scenario.reference(t + j * ts) for j in range(horizon + 1)])


def _driver_torque(world: World, brake: float) -> np.ndarray:
    s = world.settings
    return brake * np.array([s.driver_brake_front] * 2 + [s.driver_brake_rear] * 2)


def _twin_controllers(world: World, preview: np.ndarray):
    """Twin-side MPCs: full state access, no noise."""
    twin = world.twin
    if world.twin_done:
        world.nominal_cmd = np.zeros(4)
        return
    for i, mpc in enumerate(world.twin_mpcs):
        world.nominal_cmd[i] = mpc.step(twin.slips[i], twin.v, twin.ax, twin.tact[i], twin.tdot[i], preview)
        world.pred[i] = mpc.info.predicted_slip


def til_step(world: World) -> World:
    """One 1 ms tick of the twin-in-the-loop architecture."""
    sc, s = world.scenario, world.settings
    if world.k % CONTROL_DIVIDER == 0 and world.active:
        t0 = _time.perf_counter()
        world.pred[:] = np.nan
        preview = _preview(sc, world.time, s.mpc.horizon_steps, s.mpc.sample_time)
        _twin_controllers(world, preview)
        for i, comp in enumerate(world.compensators):
            world.delta_cmd[i] = comp.step(world.twin.slips[i], world.meas_slip[i], world.meas_v,
                                           world.twin_done, world.nominal_cmd[i])
            world.eff_ref[i] = comp.last_reference
        if all(c.state.mode == Mode.OFF for c in world.compensators):
            world.plant_cmd = _driver_torque(world, 1.0)
        else:
            nominal = np.where([c.state.mode == Mode.TRACK_TWIN for c in world.compensators],
                               world.nominal_cmd, 0.0)
            world.plant_cmd = np.where([c.state.mode == Mode.OFF for c in world.compensators],
                                       _driver_torque(world, 1.0), nominal + world.delta_cmd)
        world.last_controller_time = _time.perf_counter() - t0
    return world


def baseline_step(world: World) -> World:
    """One 1 ms tick of the baseline: MPC straight on the plant sensors."""
    sc, s = world.scenario, world.settings
    if world.k % CONTROL_DIVIDER == 0 and world.active:
        t0 = _time.perf_counter()
        world.pred[:] = np.nan
        preview = _preview(sc, world.time, s.mpc.horizon_steps, s.mpc.sample_time)
        if s.mpc_reference == "twin":
            _twin_controllers(world, preview)
        if world.baseline_off or world.meas_v < s.compensator.deactivation_speed:
            world.baseline_off = True
            world.plant_cmd = _driver_torque(world, 1.0)
        else:
            plant = world.plant
            for i, mpc in enumerate(world.plant_mpcs):
                ref = np.array([world.twin.slips[i]]) if s.mpc_reference == "twin" else preview
                world.plant_cmd[i] = mpc.step(world.meas_slip[i], world.meas_v, world.meas_a,
                                              plant.tact[i], plant.tdot[i], ref)
                world.eff_ref[i] = ref[0]
                if s.mpc_reference == "scripted":
                    world.pred[i] = mpc.info.predicted_slip
        world.last_controller_time = _time.perf_counter() - t0
    return world


def run_experiment(scenario: Scenario, controller: str = "til", settings: Settings | None = None) -> RunLog:
    """Simulate until the plant drops below 10 km/h or the duration cap."""
    settings = Settings() if settings is None else settings
    world = make_world(scenario, settings, controller)
    n_max = int(round(scenario.duration_cap / DT)) + 1
    sig = {n: np.zeros(n_max) for n, _ in SCALAR_SIGNALS}
    sig.update({n: np.zeros((n_max, 4)) for n, _ in WHEEL_SIGNALS})
    ctrl_time = np.full(n_max, np.nan)
    twin_time = np.full(n_max, np.nan)
    log = RunLog(scenario.name, controller, sig, ctrl_time, twin_time, horizon_steps=settings.mpc.horizon_steps)
    tick = til_step if controller == "til" else baseline_step
    uses_twin = controller == "til" or settings.mpc_reference == "twin"
    trigger_k = int(round(scenario.brake_trigger_time / DT))
    n = 0
    try:
        for k in range(n_max):
            world.k = k
            t = k * DT
            w_meas = _measure(world)
            if not world.active and k >= trigger_k:
                world.active = True
                log.activation_time = t
                world.eff_ref[:] = scenario.reference(t)
                if uses_twin:
                    plant = world.plant
                    world.twin.load(activate_twin(settings.vehicle, {
                        "speed": world.meas_v, "wheel_rates": w_meas, "accel": world.meas_a,
                        "torque": plant.tact, "torque_rate": plant.tdot, "position": plant.pos}))
                    world.twin_active = True
            world.last_controller_time = math.nan
            tick(world)
            n = k + 1
            _record(sig, k, world, scenario, t)
            ctrl_time[k] = world.last_controller_time
            if world.active and world.plant.v < STOP_SPEED:
                log.completed = True
                break
            if world.twin_active and not world.twin_done:
                t0 = _time.perf_counter()
                world.twin.step(world.nominal_cmd)
                twin_time[k] = _time.perf_counter() - t0
                if world.twin.v < STOP_SPEED:
                    world.twin_done = True
                    world.twin_active = False
                    log.twin_stop_time = t + DT
            if world.active and scenario.torque_disturbance:
                world.plant.step(world.plant_cmd + scenario.torque_disturbance)
            else:
                world.plant.step(world.plant_cmd)
    except NumericalDivergenceError as exc:
        log.error = str(exc)
    for name in sig:
        sig[name] = sig[name][:n]
    log.controller_time = ctrl_time[:n]
    log.twin_time = twin_time[:n]
    return log


def _record(sig: dict, k: int, world: World, scenario: Scenario, t: float):
    plant, twin = world.plant, world.twin
    sig["time"][k] = t
    sig["active"][k] = world.active
    sig["v"][k] = plant.v
    sig["v_meas"][k] = world.meas_v
    sig["a"][k] = plant.ax
    sig["a_meas"][k] = world.meas_a
    sig["twin_v"][k] = twin.v
    sig["twin_active"][k] = world.twin_active
    sig["slip_ref"][k] = scenario.reference(t)
    sig["slip_eff_ref"][k] = world.eff_ref if world.active else scenario.reference(t)
    sig["slip_twin"][k] = twin.slips
    sig["slip"][k] = plant.slips
    sig["slip_meas"][k] = world.meas_slip
    sig["slip_pred"][k] = world.pred if (world.active and k % CONTROL_DIVIDER == 0) else np.nan
    sig["torque_nominal"][k] = world.nominal_cmd
    sig["torque_delta"][k] = world.delta_cmd
    sig["torque_cmd"][k] = world.plant_cmd
    sig["torque_act"][k] = plant.tact
    sig["wheel_rate"][k] = plant.omega
    sig["mode"][k] = [c.state.mode for c in world.compensators] if world.controller == "til" else 0
