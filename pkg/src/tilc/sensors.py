"""Sensor models: IMU acceleration, observer-filtered chassis speed, encoder
wheel rates with speed-scheduled periodic error, and the resulting slip.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .errors import DegenerateSpeedError, InvalidConfigurationError, UndefinedSnrError

SLIP_CLAMP = (-0.2, 1.0)


@dataclass(frozen=True)
class NoiseConfig:
    """Noise levels; the shipped defaults were calibrated for slip SNR ~ 4
    on the training maneuver (see ``calibrate_noise``)."""

    accel_noise_std: float = 0.3
    speed_noise_std: float = 1.6056
    speed_lowpass_cutoff: float = 5.0
    wheel_noise_offset: float = 1.0704
    wheel_noise_speed_gain: float = 0.016056
    seed: int = 0

    def __post_init__(self):
        for name in ("accel_noise_std", "speed_noise_std", "wheel_noise_offset", "wheel_noise_speed_gain"):
            if getattr(self, name) < 0:
                raise InvalidConfigurationError(f"{name} must be >= 0")
        if self.speed_lowpass_cutoff <= 0:
            raise InvalidConfigurationError("speed_lowpass_cutoff must be > 0")

    @classmethod
    def noiseless(cls, seed: int = 0) -> "NoiseConfig":
        return cls(0.0, 0.0, 5.0, 0.0, 0.0, seed)

    @property
    def is_noiseless(self) -> bool:
        return (self.accel_noise_std == 0 and self.speed_noise_std == 0
                and self.wheel_noise_offset == 0 and self.wheel_noise_speed_gain == 0)

    def scaled(self, factor: float) -> "NoiseConfig":
        """Scale the speed and wheel-rate noise amplitudes (acceleration untouched)."""
        return replace(self, speed_noise_std=self.speed_noise_std * factor,
                       wheel_noise_offset=self.wheel_noise_offset * factor,
                       wheel_noise_speed_gain=self.wheel_noise_speed_gain * factor)


class SensorRig:
    """Stateful measurement chain for one vehicle; use sequentially."""

    def __init__(self, config: NoiseConfig):
        self.config = config
        self.lowpass_state = 0.0
        self.rng = np.random.default_rng(config.seed)
        self.time = 0.0

    def measure_acceleration(self, true_accel: float) -> float:
        sigma = self.config.accel_noise_std
        if sigma == 0.0:
            return true_accel
        return true_accel + sigma * self.rng.standard_normal()

    def lowpass_update(self, sample: float, dt: float) -> float:
        """First-order low-pass at the configured cutoff, unity DC gain."""
        alpha = math.exp(-2.0 * math.pi * self.config.speed_lowpass_cutoff * dt)
        self.lowpass_state = alpha * self.lowpass_state + (1.0 - alpha) * sample
        return self.lowpass_state

    def measure_chassis_speed(self, true_speed: float, dt: float) -> float:
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.time += dt
        sigma = self.config.speed_noise_std
        if sigma == 0.0:
            return true_speed
        return true_speed + self.lowpass_update(sigma * self.rng.standard_normal(), dt)

    def measure_wheel_rate(self, true_rate, time: float):
        """Periodic encoder error whose amplitude grows with the rate itself."""
        cfg = self.config
        amplitude = cfg.wheel_noise_offset + cfg.wheel_noise_speed_gain * np.asarray(true_rate)
        return true_rate + amplitude * np.sin(np.asarray(true_rate) * time)

    def measured_slip(self, measured_speed, measured_rate, radius):
        """Slip from noisy inputs, clamped to tolerate noise-induced sign flips."""
        wr = np.asarray(measured_rate, dtype=float) * radius
        den = np.maximum(measured_speed, wr)
        if np.any(den <= 0.0):
            raise DegenerateSpeedError("slip undefined at zero measured speeds")
        slip = np.clip((measured_speed - wr) / den, *SLIP_CLAMP)
        return float(slip) if np.ndim(slip) == 0 else slip


def simulate_measurements(config: NoiseConfig, time, speed, wheel_rates, radii, dt: float = 1e-3):
    """Replay a noise realization over a log of true states.

    Returns (measured speed, measured wheel rates, measured slip).
    """
    rig = SensorRig(config)
    n = len(time)
    v_meas = np.empty(n)
    w_meas = np.empty((n, 4))
    slip = np.empty((n, 4))
    for k in range(n):
        rig.measure_acceleration(0.0)  # keep the draw order of the closed loop
        v_meas[k] = rig.measure_chassis_speed(speed[k], dt)
        w_meas[k] = rig.measure_wheel_rate(wheel_rates[k], time[k])
        slip[k] = rig.measured_slip(v_meas[k], w_meas[k], radii)
    return v_meas, w_meas, slip


def calibrate_snr(true_slip, measured_slip) -> float:
    """Power ratio of the true slip to the slip measurement error.

    Returns ``inf`` when the measurement is exact.
    """
    true_slip = np.asarray(true_slip, dtype=float)
    measured_slip = np.asarray(measured_slip, dtype=float)
    if true_slip.shape != measured_slip.shape:
        raise ValueError("true and measured slip logs differ in shape")
    if true_slip.size < 1000:
        raise ValueError("SNR needs at least 1000 samples")
    signal = float(np.mean(true_slip ** 2))
    if signal == 0.0:
        raise UndefinedSnrError("true slip has zero power")
    noise = float(np.mean((measured_slip - true_slip) ** 2))
    if noise == 0.0:
        return math.inf
    return signal / noise


def calibrate_noise(base: NoiseConfig, time, speed, wheel_rates, true_slip, radii,
                    target: float = 4.0, mask=None, dt: float = 1e-3,
                    bounds=(1e-2, 1e2)) -> tuple[NoiseConfig, float]:
    """Scale the speed/wheel noise of ``base`` so the slip SNR hits ``target``.

    The noise realization (seed) stays fixed, so the SNR is a deterministic
    function of the scale factor.  Returns the scaled config and its SNR.
    """
    mask = np.ones(len(time), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)

    def snr_for(factor):
        cfg = base.scaled(factor)
        _, _, slip = simulate_measurements(cfg, time, speed, wheel_rates, radii, dt)
        return calibrate_snr(true_slip[mask], slip[mask])

    def gap(log_factor):
        try:
            return math.log(snr_for(math.exp(log_factor))) - math.log(target)
        except DegenerateSpeedError:
            return -math.inf  # noise so large that measured speeds vanish

    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    log_factor = brentq(gap, lo, hi, xtol=1e-6)
    factor = math.exp(log_factor)
    cfg = base.scaled(factor)
    return cfg, snr_for(factor)
