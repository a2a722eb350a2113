"""Per-wheel slip-tracking MPC in velocity form.

The prediction model freezes chassis speed and acceleration over the
horizon, which makes the slip dynamics LTI.  It is cascaded with the
second-order brake actuator, discretized exactly (ZOH), written over state
and input increments, and augmented with the slip tracking error so that
the controller carries integral action.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import InvalidConfigurationError, ModelInvalidError, SolverFailureError
from .vehicle import VehicleParams


@dataclass(frozen=True)
class MpcConfig:
    horizon_steps: int = 5
    tracking_weight: float = 1.0
    input_rate_weight: float = 2.0e-9  # per (N m)^2 of command increment
    torque_min: float = 0.0
    torque_max: float = 3000.0
    torque_rate_limit: float = 30000.0  # N m / s on the command
    sample_time: float = 0.005
    min_speed: float = 1.0
    max_iterations: int = 100
    tolerance: float = 1e-10
    check_kkt: bool = False

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise InvalidConfigurationError("horizon must be >= 1")
        if self.tracking_weight <= 0 or self.input_rate_weight <= 0:
            raise InvalidConfigurationError("MPC weights must be positive")
        if self.torque_min > self.torque_max:
            raise InvalidConfigurationError("torque_min > torque_max")
        if self.torque_rate_limit <= 0 or self.sample_time <= 0:
            raise InvalidConfigurationError("rate limit and sample time must be positive")

    @property
    def max_step(self) -> float:
        """Largest command increment per controller step."""
        return self.torque_rate_limit * self.sample_time


@dataclass(frozen=True)
class WheelModelParams:
    """The tunable part of the prediction model for one wheel."""

    radius: float
    inertia: float
    actuator_natural_freq: float = 70.0
    actuator_damping: float = 0.7

    @classmethod
    def from_vehicle(cls, params: VehicleParams, wheel: int) -> "WheelModelParams":
        return cls(float(params.radii[wheel]), float(params.inertias[wheel]),
                   params.actuator_natural_freq, params.actuator_damping)


@dataclass(frozen=True)
class SlipPredictionModel:
    wheel_radius: float
    wheel_inertia: float
    frozen_speed: float
    frozen_accel: float
    actuator_natural_freq: float
    actuator_damping: float
    sample_time: float
    horizon_steps: int = 5

    @property
    def slip_pole(self) -> float:
        return -self.frozen_accel / self.frozen_speed

    @property
    def input_gain(self) -> float:
        """Slip-rate gain on the signed wheel torque (drive positive).

        A brake torque T enters the wheel as -T, so its gain is the negative
        of this value.
        """
        return -self.wheel_radius / (self.wheel_inertia * self.frozen_speed)

    def continuous(self):
        """(A, B, c) of x' = A x + B T_cmd + c, x = [slip, T_act, dT_act]."""
        return K.slip_model_matrices(self.frozen_speed, self.frozen_accel, self.wheel_radius,
                                     self.wheel_inertia, self.actuator_natural_freq,
                                     self.actuator_damping)


@dataclass(frozen=True)
class VelocityFormModel:
    ad: np.ndarray  # 3x3 discrete state matrix
    bd: np.ndarray  # 3 input column
    phi: np.ndarray  # 4x4 augmented, state [dx; e]
    gamma: np.ndarray
    sample_time: float
    horizon_steps: int


@dataclass(frozen=True)
class QpProblem:
    """min 0.5 y'Hy + f'y  s.t.  lower <= G y <= upper, with dU = var_scale * y."""

    hessian: np.ndarray
    linear: np.ndarray
    constraint_matrix: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    var_scale: float = 1.0
    free_response: np.ndarray | None = None  # predicted errors with zero moves
    prediction_matrix: np.ndarray | None = None  # error sensitivity to dU

    @property
    def n(self) -> int:
        return self.hessian.shape[0]

    def objective(self, y) -> float:
        y = np.asarray(y, dtype=float)
        return float(0.5 * y @ self.hessian @ y + self.linear @ y)


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    multipliers: np.ndarray
    iterations: int


def linearize_slip_model(speed: float, accel: float, wheel: WheelModelParams,
                         config: MpcConfig) -> SlipPredictionModel:
    if not speed > config.min_speed:
        raise ModelInvalidError(f"speed {speed:.3f} m/s below model validity {config.min_speed} m/s")
    return SlipPredictionModel(wheel.radius, wheel.inertia, float(speed), float(accel),
                               wheel.actuator_natural_freq, wheel.actuator_damping,
                               config.sample_time, config.horizon_steps)


def to_velocity_form(model: SlipPredictionModel) -> VelocityFormModel:
    a, b, _ = model.continuous()
    ad, bd = K.zoh_kernel(a, b, model.sample_time)
    phi, gamma = K.velocity_form_kernel(ad, bd)
    return VelocityFormModel(ad, bd, phi, gamma, model.sample_time, model.horizon_steps)


def build_qp(model: VelocityFormModel, state, reference, u_prev: float, config: MpcConfig) -> QpProblem:
    """Condensed QP over the command increments of the horizon.

    ``state`` is [d_slip, d_torque, d_torque_rate, slip - ref(k)];
    ``reference`` holds ref(k), ..., ref(k+N) (shorter input is held).
    """
    if config.torque_min > config.torque_max:
        raise InvalidConfigurationError("infeasible torque bounds")
    horizon = model.horizon_steps
    offsets = _reference_offsets(reference, horizon)
    fmat, gmat = K.condensed_prediction(model.phi, model.gamma, horizon)
    var_scale = config.max_step
    hmat, fvec, gin, lo, hi, free, _ = K.mpc_qp_matrices(
        fmat, gmat, np.asarray(state, dtype=float), offsets, float(u_prev), config.torque_max,
        config.max_step, config.tracking_weight, config.input_rate_weight, var_scale)
    return QpProblem(hmat, fvec, gin, lo, hi, var_scale, free, gmat)


def solve_qp(problem: QpProblem, x0=None, max_iterations: int = 100, tol: float = 1e-10) -> QpSolution:
    """Active-set solve; raises SolverFailureError on iteration cap or bad start."""
    if np.any(problem.lower > problem.upper):
        raise InvalidConfigurationError("inconsistent QP bounds")
    if x0 is None:
        x0 = _feasible_start(problem)
    x, lam, iters, status = K.qp_active_set(problem.hessian, problem.linear, problem.constraint_matrix,
                                            problem.lower, problem.upper, np.asarray(x0, dtype=float),
                                            max_iterations, tol)
    if status != K.QP_OK:
        reason = {K.QP_MAX_ITER: "iteration cap exceeded", K.QP_INFEASIBLE_START: "infeasible start",
                  K.QP_SINGULAR: "singular KKT system"}[status]
        raise SolverFailureError(f"QP solver failed: {reason}", iterations=iters)
    return QpSolution(x, lam, iters)


def kkt_residuals(problem: QpProblem, x, lam) -> tuple[float, float, float]:
    """(stationarity, primal infeasibility, complementarity), all infinity norms."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    gx = problem.constraint_matrix @ x
    stat = problem.hessian @ x + problem.linear - problem.constraint_matrix.T @ lam
    feas = np.maximum(0.0, np.maximum(problem.lower - gx, gx - problem.upper))
    lo_gap = np.where(np.isfinite(problem.lower), gx - problem.lower, np.inf)
    hi_gap = np.where(np.isfinite(problem.upper), problem.upper - gx, np.inf)
    # sign convention: lam >= 0 pairs with the lower bound, lam <= 0 with the upper
    with np.errstate(invalid="ignore"):
        comp = np.where(lam > 0, lam * lo_gap, np.where(lam < 0, -lam * hi_gap, 0.0))
    return (float(np.max(np.abs(stat))), float(np.max(feas, initial=0.0)),
            float(np.max(np.abs(comp), initial=0.0)))


def _feasible_start(problem: QpProblem) -> np.ndarray:
    n = problem.n
    g = problem.constraint_matrix
    x = np.zeros(n)
    if np.all(g @ x >= problem.lower - 1e-12) and np.all(g @ x <= problem.upper + 1e-12):
        return x
    # box-only rows: project the origin
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    for i, row in enumerate(g):
        nz = np.flatnonzero(row)
        if len(nz) == 1:
            j = nz[0]
            lb[j] = max(lb[j], problem.lower[i] / row[j]) if row[j] > 0 else max(lb[j], problem.upper[i] / row[j])
            ub[j] = min(ub[j], problem.upper[i] / row[j]) if row[j] > 0 else min(ub[j], problem.lower[i] / row[j])
    return np.clip(x, lb, ub)


def _reference_offsets(reference, horizon: int) -> np.ndarray:
    ref = np.atleast_1d(np.asarray(reference, dtype=float))
    if len(ref) < horizon + 1:
        ref = np.concatenate([ref, np.full(horizon + 1 - len(ref), ref[-1])])
    return ref[1:horizon + 1] - ref[0]


@dataclass
class MpcStepInfo:
    iterations: int = 0
    status: str = "ok"  # ok | model_invalid | solver_failure
    predicted_slip: float = float("nan")  # slip predicted at the horizon tip


@dataclass
class SlipMpc:
    """Controller instance for one wheel; call ``step`` every sample_time."""

    wheel: WheelModelParams
    config: MpcConfig = field(default_factory=MpcConfig)
    u_prev: float = 0.0
    x_prev: np.ndarray | None = None
    info: MpcStepInfo = field(default_factory=MpcStepInfo)

    def reset(self, command: float = 0.0):
        self.u_prev = float(command)
        self.x_prev = None
        self.info = MpcStepInfo()

    def step(self, slip: float, speed: float, accel: float, torque: float, torque_rate: float,
             reference) -> float:
        """Return the brake torque command for the next sample period."""
        cfg = self.config
        x = np.array([slip, torque, torque_rate], dtype=float)
        if not np.all(np.isfinite(x)) or not np.isfinite(speed) or not np.isfinite(accel):
            self.info = MpcStepInfo(0, "model_invalid")
            return self.u_prev
        if not speed > cfg.min_speed:
            self.x_prev = x
            self.info = MpcStepInfo(0, "model_invalid")
            return self.u_prev
        dx = np.zeros(3) if self.x_prev is None else x - self.x_prev
        ref = np.atleast_1d(np.asarray(reference, dtype=float))
        z0 = np.array([dx[0], dx[1], dx[2], slip - ref[0]])
        offsets = _reference_offsets(ref, cfg.horizon_steps)
        w = self.wheel
        du, err_pred, iters, status = K.mpc_solve_kernel(
            float(speed), float(accel), w.radius, w.inertia, w.actuator_natural_freq,
            w.actuator_damping, cfg.sample_time, cfg.horizon_steps, z0, offsets, self.u_prev,
            cfg.torque_max, cfg.max_step, cfg.tracking_weight, cfg.input_rate_weight, cfg.max_step,
            cfg.max_iterations, cfg.tolerance)
        self.x_prev = x
        if status != K.QP_OK:
            self.info = MpcStepInfo(iters, "solver_failure")
            return self.u_prev
        if cfg.check_kkt:
            self._assert_kkt(speed, accel, z0, ref)
        u = min(max(self.u_prev + du[0], cfg.torque_min), cfg.torque_max)
        self.u_prev = u
        tip = err_pred[-1] + ref[0] + offsets[-1]
        self.info = MpcStepInfo(iters, "ok", float(tip))
        return u

    def _assert_kkt(self, speed, accel, z0, ref):
        model = linearize_slip_model(speed, accel, self.wheel, self.config)
        qp = build_qp(to_velocity_form(model), z0, ref, self.u_prev, self.config)
        sol = solve_qp(qp, max_iterations=self.config.max_iterations, tol=self.config.tolerance)
        res = kkt_residuals(qp, sol.x, sol.multipliers)
        if max(res) >= 1e-6:
            raise SolverFailureError(f"KKT residuals {res} exceed 1e-6", sol.iterations)
