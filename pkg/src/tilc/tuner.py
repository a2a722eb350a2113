"""Performance indices and Gaussian-process Bayesian optimization for
closed-loop calibration of the compensator and of the baseline MPC model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.optimize import minimize
from scipy.stats import norm, qmc

from . import kernels as K
from .errors import ConfigError, FitError, TilcError, UndefinedCostError
from .loop import CONTROL_DIVIDER, DT, STOP_SPEED, RunLog, Scenario, Settings, run_experiment

# ---------------------------------------------------------------- indices


def _window(log: RunLog) -> np.ndarray:
    mask = log.active_mask
    if not mask.any():
        raise UndefinedCostError("log has no active-control samples")
    return mask


def cost_slip(log: RunLog, channel: str = "true") -> float:
    """RMS slip tracking error over wheels and active samples (fraction, not %).

    channel ``true``: scripted reference minus true plant slip;
    ``measured``: scripted reference minus measured slip;
    ``tracking``: the controller's effective reference (twin slip for TiL)
    minus measured slip, the quantity the compensator actually sees.
    """
    mask = _window(log)
    if channel == "true":
        err = log.slip_ref[mask] - log.slip[mask]
    elif channel == "measured":
        err = log.slip_ref[mask] - log.slip_meas[mask]
    elif channel == "tracking":
        err = log.slip_eff_ref[mask] - log.slip_meas[mask]
    else:
        raise ValueError(f"unknown slip channel {channel!r}")
    return float(np.sqrt(np.mean(err ** 2)))


def cost_effort(log: RunLog) -> float:
    """RMS actuated-torque rate [N m/s] by first differences at 1 ms."""
    mask = _window(log)
    torque = log.torque_act[mask]
    if len(torque) < 2:
        raise UndefinedCostError("need two active samples for a torque rate")
    rate = np.diff(torque, axis=0) / DT
    return float(np.sqrt(np.mean(rate ** 2)))


def _realized_channel(log: RunLog, realized: str) -> np.ndarray:
    return {"measured": log.slip_meas, "true": log.slip, "twin": log.slip_twin}[realized]


# The first 100 ms after activation take the car from coasting to full
# braking; the frozen-acceleration model cannot predict that swing whatever
# (R, J) are, so prediction errors are scored after it.
PREDICTION_SETTLE = 0.1  # s


def _settled(log: RunLog, ticks: np.ndarray, settle: float) -> np.ndarray:
    if math.isnan(log.activation_time):
        return ticks
    return ticks[log.time[ticks] >= log.activation_time + settle - 1e-9]


def cost_mpc_prediction(log: RunLog, horizon: int | None = None, realized: str = "measured",
                        settle: float = PREDICTION_SETTLE) -> float:
    """RMS gap between the stored horizon-tip predictions and the slip that
    was realized ``horizon`` controller steps later."""
    horizon = log.horizon_steps if horizon is None else horizon
    pred = log.slip_pred
    ticks = np.flatnonzero(np.any(np.isfinite(pred), axis=1))
    if len(ticks) == 0:
        raise ConfigError("log carries no MPC prediction channel")
    ticks = _settled(log, ticks, settle)
    lead = horizon * CONTROL_DIVIDER
    ticks = ticks[ticks + lead < len(log)]
    if len(ticks) == 0:
        raise UndefinedCostError("no prediction matured before the end of the log")
    gap = _realized_channel(log, realized)[ticks + lead] - pred[ticks]
    return float(np.sqrt(np.nanmean(gap ** 2)))


def replay_mpc_prediction(log: RunLog, radius: Sequence[float], inertia: Sequence[float],
                          horizon: int = 5, ts: float = 0.005, wn: float = 70.0, zeta: float = 0.7,
                          realized: str = "measured", settle: float = PREDICTION_SETTLE) -> float:
    """Prediction error of a candidate (R, J) model re-run open loop on a
    recorded log, driven by the command increments that were actually applied."""
    mask = log.active_mask
    ticks = np.flatnonzero(mask)
    ticks = ticks[(ticks - ticks[0]) % CONTROL_DIVIDER == 0] if len(ticks) else ticks
    ticks = _settled(log, ticks, settle)
    if len(ticks) < horizon + 2:
        raise UndefinedCostError("log too short to replay predictions")
    slip = _realized_channel(log, realized)
    speed = log.v_meas if realized == "measured" else log.v
    accel = log.a_meas if realized == "measured" else log.a
    gaps = []
    for m in range(1, len(ticks) - horizon):
        k, kp = ticks[m], ticks[m - 1]
        for w in range(4):
            if not speed[k] > 1.0:
                continue
            a, b, _ = K.slip_model_matrices(float(speed[k]), float(accel[k]), float(radius[w]),
                                            float(inertia[w]), wn, zeta)
            ad, bd = K.zoh_kernel(a, b, ts)
            phi, gamma = K.velocity_form_kernel(ad, bd)
            z = np.array([slip[k, w] - slip[kp, w], log.torque_act[k, w] - log.torque_act[kp, w],
                          0.0, 0.0])
            lam = slip[k, w]
            for j in range(horizon):
                u_now = log.torque_cmd[ticks[m + j], w]
                u_before = log.torque_cmd[ticks[m + j - 1], w]
                z = phi @ z + gamma * (u_now - u_before)
                lam += z[0]
            gaps.append(slip[ticks[m + horizon], w] - lam)
    if not gaps:
        raise UndefinedCostError("no replayable samples")
    return float(np.sqrt(np.mean(np.square(gaps))))


def braking_time(log: RunLog) -> float:
    """Time from control activation until the plant first drops below 10 km/h."""
    if math.isnan(log.activation_time):
        raise UndefinedCostError("braking control never activated")
    idx = np.flatnonzero((log.time >= log.activation_time) & (log.v < STOP_SPEED))
    if len(idx) == 0:
        raise UndefinedCostError("speed never dropped below 10 km/h")
    return float(log.time[idx[0]] - log.activation_time)


@dataclass(frozen=True)
class PerformanceIndices:
    slip_cost: float  # fraction; multiply by 100 for percent
    effort: float  # N m / s
    braking_time: float  # s

    @classmethod
    def from_log(cls, log: RunLog, channel: str = "true") -> "PerformanceIndices":
        return cls(cost_slip(log, channel), cost_effort(log), braking_time(log))

    @property
    def slip_cost_percent(self) -> float:
        return 100.0 * self.slip_cost


# ---------------------------------------------------------------- search space


@dataclass(frozen=True)
class ParameterBox:
    names: tuple
    lower: tuple
    upper: tuple
    log_scale: tuple = ()

    def __post_init__(self):
        n = len(self.names)
        if len(self.lower) != n or len(self.upper) != n:
            raise ValueError("names, lower and upper must have equal length")
        if not all(lo < hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("every lower bound must be below its upper bound")
        if not self.log_scale:
            object.__setattr__(self, "log_scale", (False,) * n)
        if any(ls and lo <= 0 for ls, lo in zip(self.log_scale, self.lower)):
            raise ValueError("log-scaled variables need positive bounds")

    @property
    def dim(self) -> int:
        return len(self.names)

    def _ends(self):
        lo = np.array(self.lower, dtype=float)
        hi = np.array(self.upper, dtype=float)
        ls = np.array(self.log_scale, dtype=bool)
        lo = np.where(ls, np.log(np.where(ls, lo, 1.0)), lo)
        hi = np.where(ls, np.log(np.where(ls, hi, 1.0)), hi)
        return lo, hi, ls

    def to_unit(self, theta) -> np.ndarray:
        lo, hi, ls = self._ends()
        theta = np.asarray(theta, dtype=float)
        t = np.where(ls, np.log(np.where(ls, theta, 1.0)), theta)
        return (t - lo) / (hi - lo)

    def from_unit(self, u) -> np.ndarray:
        lo, hi, ls = self._ends()
        t = lo + np.clip(np.asarray(u, dtype=float), 0.0, 1.0) * (hi - lo)
        out = np.where(ls, np.exp(t), t)
        # exp/log round-off must not leave the box
        return np.clip(out, self.lower, self.upper)

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= np.array(self.lower)) and np.all(theta <= np.array(self.upper)))


TIL_BOX = ParameterBox(("compensator.kp_nominal_front", "compensator.Ti_front",
                        "compensator.kp_nominal_rear", "compensator.Ti_rear"),
                       (10.0, 0.01, 10.0, 0.01), (5000.0, 1.0, 5000.0, 1.0), (True, True, True, True))


def eol_box(settings: Settings, spread: float = 0.5) -> ParameterBox:
    v = settings.vehicle
    nominal = (v.wheel_radius_front, v.wheel_inertia_front, v.wheel_radius_rear, v.wheel_inertia_rear)
    return ParameterBox(("eol.radius_front", "eol.inertia_front", "eol.radius_rear", "eol.inertia_rear"),
                        tuple(x * (1 - spread) for x in nominal), tuple(x * (1 + spread) for x in nominal))


# ---------------------------------------------------------------- GP surrogate


def _se_kernel(xa, xb, lengthscales, signal_var):
    d = (xa[:, None, :] - xb[None, :, :]) / lengthscales
    return signal_var * np.exp(-0.5 * np.sum(d * d, axis=-1))


@dataclass
class GpSurrogate:
    """Zero-mean GP on unit-box inputs and standardized costs, SE-ARD kernel."""

    lengthscales: np.ndarray
    signal_var: float = 1.0
    noise_var: float = 1e-6
    inputs: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    y_mean: float = 0.0
    y_std: float = 1.0
    chol: np.ndarray | None = None
    alpha: np.ndarray | None = None
    jitter: float = 0.0

    def _factor(self, y_std):
        n = len(self.inputs)
        kmat = _se_kernel(self.inputs, self.inputs, self.lengthscales, self.signal_var)
        jitter = 0.0
        while True:
            try:
                chol = linalg.cholesky(kmat + (self.noise_var + jitter) * np.eye(n), lower=True)
                break
            except linalg.LinAlgError:
                jitter = 1e-12 if jitter == 0.0 else jitter * 10.0
                if jitter > 1e-6:
                    raise FitError("kernel matrix is not positive definite even with jitter") from None
        self.chol, self.jitter = chol, jitter
        self.alpha = linalg.cho_solve((chol, True), y_std)

    def predict(self, x, return_std: bool = True):
        """Posterior mean (and std) in cost units at unit-box points ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ks = _se_kernel(x, self.inputs, self.lengthscales, self.signal_var)
        mean = self.y_mean + self.y_std * (ks @ self.alpha)
        if not return_std:
            return mean
        v = linalg.solve_triangular(self.chol, ks.T, lower=True)
        var = np.maximum(self.signal_var - np.sum(v * v, axis=0), 0.0)
        return mean, self.y_std * np.sqrt(var)


def _neg_log_marginal(params, x, y, fixed_noise):
    d = x.shape[1]
    ls = np.exp(params[:d])
    sf = np.exp(params[d])
    sn = fixed_noise if fixed_noise is not None else np.exp(params[d + 1])
    kmat = _se_kernel(x, x, ls, sf) + (sn + 1e-10) * np.eye(len(x))
    try:
        chol = linalg.cholesky(kmat, lower=True)
    except linalg.LinAlgError:
        return 1e10
    alpha = linalg.cho_solve((chol, True), y)
    return float(0.5 * y @ alpha + np.sum(np.log(np.diag(chol))) + 0.5 * len(x) * math.log(2 * math.pi))


def gp_fit(inputs, costs, noise_var: float | None = None, seed: int = 0, n_starts: int = 6) -> GpSurrogate:
    """Fit an SE-ARD GP by maximum marginal likelihood (multi-start L-BFGS-B).

    ``inputs`` are unit-box coordinates.  ``noise_var`` (standardized units)
    is fitted when None, otherwise held fixed.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(costs, dtype=float).ravel()
    if len(x) != len(y):
        raise FitError("inputs and costs differ in length")
    if len(x) < 2:
        raise FitError("a GP fit needs at least two points")
    if np.all(np.ptp(x, axis=0) == 0.0):
        raise FitError("all training inputs are identical")
    if not np.all(np.isfinite(y)):
        raise FitError("costs must be finite")
    d = x.shape[1]
    y_mean = float(np.mean(y))
    y_std = float(np.std(y)) or 1.0
    ys = (y - y_mean) / y_std

    bounds = [(math.log(0.02), math.log(5.0))] * d + [(math.log(0.05), math.log(20.0))]
    if noise_var is None:
        bounds.append((math.log(1e-6), math.log(0.5)))
    rng = np.random.default_rng(seed)
    starts = [np.array([math.log(0.3)] * d + [0.0] + ([math.log(1e-3)] if noise_var is None else []))]
    for _ in range(n_starts - 1):
        starts.append(np.array([rng.uniform(lo, hi) for lo, hi in bounds]))
    best = None
    for s in starts:
        res = minimize(_neg_log_marginal, s, args=(x, ys, noise_var), method="L-BFGS-B", bounds=bounds)
        if best is None or res.fun < best.fun:
            best = res
    p = best.x
    gp = GpSurrogate(lengthscales=np.exp(p[:d]), signal_var=float(np.exp(p[d])),
                     noise_var=float(noise_var if noise_var is not None else np.exp(p[d + 1])),
                     inputs=x.copy(), y_mean=y_mean, y_std=y_std)
    gp._factor(ys)
    return gp


def expected_improvement(mean, std, best: float, xi: float = 0.0):
    """Closed-form EI for minimization; zero-variance points get max(best - mean, 0)."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    imp = best - mean - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std > 0, imp / std, 0.0)
        ei = np.where(std > 0, imp * norm.cdf(z) + std * norm.pdf(z), np.maximum(imp, 0.0))
    return np.maximum(ei, 0.0)


def acquisition_argmax(gp: GpSurrogate, box: ParameterBox, best: float, seed: int = 0,
                       n_scatter: int = 2048, n_polish: int = 4) -> np.ndarray:
    """Maximize EI by a scrambled-Sobol scatter plus L-BFGS-B polish.

    Returns the candidate in parameter units.  When EI vanishes everywhere
    (a certain surrogate) the posterior-mean minimizer is returned.
    """
    sobol = qmc.Sobol(box.dim, scramble=True, seed=seed)
    pts = sobol.random(n_scatter)
    mean, std = gp.predict(pts)
    ei = expected_improvement(mean, std, best)

    def neg_ei(u):
        m, s = gp.predict(u[None, :])
        return -float(expected_improvement(m, s, best)[0])

    def mean_at(u):
        return float(gp.predict(u[None, :], return_std=False)[0])

    if ei.max() <= 1e-12 * max(1.0, abs(best)):
        obj, order = mean_at, np.argsort(mean, kind="stable")
    else:
        obj, order = neg_ei, np.argsort(-ei, kind="stable")
    best_u, best_val = pts[order[0]], obj(pts[order[0]])
    for i in order[:n_polish]:
        res = minimize(obj, pts[i], method="L-BFGS-B", bounds=[(0.0, 1.0)] * box.dim)
        if res.fun < best_val:
            best_u, best_val = res.x, float(res.fun)
    return box.from_unit(best_u)


@dataclass
class BoRecord:
    iteration: int
    theta: np.ndarray
    cost: float  # NaN when the evaluation failed
    incumbent: float
    failed: bool = False


@dataclass
class BoResult:
    best_theta: np.ndarray
    best_cost: float
    history: list

    def history_csv(self, names: Sequence[str]) -> str:
        rows = ["iteration," + ",".join(names) + ",cost,incumbent,failed"]
        for r in self.history:
            vals = ",".join(repr(float(v)) for v in r.theta)
            rows.append(f"{r.iteration},{vals},{r.cost!r},{r.incumbent!r},{int(r.failed)}")
        return "\r\n".join(rows) + "\r\n"


def bo_optimize(objective: Callable[[np.ndarray], float], box: ParameterBox, budget: int = 40, seed: int = 0,
                n_init: int = 8, initial_points: Sequence | None = None, log_costs: bool = False,
                noise_var: float | None = None, callback=None) -> BoResult:
    """GP/EI Bayesian optimization.  Failed or non-finite evaluations are
    charged 10x the worst successful cost when fitting the surrogate."""
    if budget < n_init:
        raise ValueError(f"budget {budget} is smaller than the initial design ({n_init})")
    design = qmc.LatinHypercube(box.dim, seed=seed).random(n_init)
    thetas = [box.from_unit(u) for u in design]
    if initial_points is not None:
        extra = [np.clip(np.asarray(p, dtype=float), box.lower, box.upper) for p in initial_points]
        thetas = (extra + thetas)[:n_init]
    history: list[BoRecord] = []
    incumbent = math.inf
    best_theta = None

    def evaluate(theta):
        nonlocal incumbent, best_theta
        try:
            cost = float(objective(theta))
            failed = not math.isfinite(cost)
        except (TilcError, FloatingPointError, ValueError, ZeroDivisionError):
            cost, failed = math.nan, True
        if failed:
            cost = math.nan
        elif cost < incumbent:
            incumbent, best_theta = cost, np.array(theta, dtype=float)
        rec = BoRecord(len(history), np.array(theta, dtype=float), cost, incumbent, failed)
        history.append(rec)
        if callback is not None:
            callback(rec)

    for theta in thetas:
        evaluate(theta)
    for it in range(n_init, budget):
        ok = [r.cost for r in history if not r.failed]
        if len(ok) < 2:
            u = qmc.LatinHypercube(box.dim, seed=seed + it).random(1)[0]
            evaluate(box.from_unit(u))
            continue
        penalty = 10.0 * max(abs(c) for c in ok)
        y = np.array([penalty if r.failed else r.cost for r in history])
        if log_costs:
            y = np.log(np.maximum(y, 1e-300))
        x = np.array([box.to_unit(r.theta) for r in history])
        try:
            gp = gp_fit(x, y, noise_var=noise_var, seed=seed + it)
            best = math.log(incumbent) if log_costs else incumbent
            cand = acquisition_argmax(gp, box, best, seed=seed + it)
        except FitError:
            cand = box.from_unit(qmc.LatinHypercube(box.dim, seed=seed + it).random(1)[0])
        evaluate(cand)
    if best_theta is None:
        raise UndefinedCostError("every evaluation failed")
    return BoResult(best_theta, incumbent, history)


# ---------------------------------------------------------------- drivers


def apply_theta(settings: Settings, names: Sequence[str], theta) -> Settings:
    """Return ``settings`` with namespaced parameters replaced."""
    comp, eol = {}, {}
    for name, value in zip(names, theta):
        section, _, key = name.partition(".")
        if section == "compensator":
            comp[key] = float(value)
        elif section == "eol":
            eol[f"eol_{key}"] = float(value)
        else:
            raise ValueError(f"cannot tune {name!r}")
    out = settings
    if comp:
        out = replace(out, compensator=replace(out.compensator, **comp))
    if eol:
        out = replace(out, **eol)
    return out


def til_objective(scenario: Scenario, settings: Settings, box: ParameterBox = TIL_BOX):
    """Slip tracking cost of the compensator seen through the sensors."""
    def objective(theta):
        log = run_experiment(scenario, "til", apply_theta(settings, box.names, theta))
        if not log.completed:
            raise UndefinedCostError("run did not complete")
        return cost_slip(log, "tracking")
    return objective


def mpc_eol_objective(scenario: Scenario, settings: Settings, box: ParameterBox):
    """Prediction error of the baseline MPC running on the plant."""
    def objective(theta):
        log = run_experiment(scenario, "mpc", apply_theta(settings, box.names, theta))
        if not log.completed:
            raise UndefinedCostError("run did not complete")
        return cost_mpc_prediction(log, realized="measured")
    return objective


def tune(target: str, scenario: Scenario, settings: Settings, budget: int = 40, seed: int = 0,
         callback=None) -> tuple[ParameterBox, BoResult]:
    """Run BO for ``til`` (compensator gains) or ``mpc-eol`` (baseline model R, J)."""
    if target == "til":
        box = TIL_BOX
        c = settings.compensator
        start = [(c.kp_nominal_front, c.Ti_front, c.kp_nominal_rear, c.Ti_rear)]
        objective = til_objective(scenario, settings, box)
    elif target == "mpc-eol":
        box = eol_box(settings)
        v = settings.vehicle
        start = [(v.wheel_radius_front, v.wheel_inertia_front, v.wheel_radius_rear, v.wheel_inertia_rear)]
        objective = mpc_eol_objective(scenario, settings, box)
    else:
        raise ValueError(f"unknown tuning target {target!r}")
    result = bo_optimize(objective, box, budget, seed, initial_points=start, log_costs=True, callback=callback)
    return box, result
