"""Flat ``namespace.key = value`` configuration files.

Files are applied in order, then ``--override`` strings; later entries win.
Unknown keys and malformed values raise ``ConfigError`` with the line.
"""
from __future__ import annotations

import dataclasses
import hashlib
from importlib import resources
from pathlib import Path

from .compensator import CompensatorConfig
from .errors import ConfigError, InvalidConfigurationError
from .loop import Scenario, Settings
from .mpc import MpcConfig
from .sensors import NoiseConfig
from .vehicle import TireParams, VehicleParams

PRESETS = ("nominal", "noisy", "masses", "noisy+masses", "friction", "training")

_SECTIONS = {
    "scenario": Scenario,
    "vehicle": VehicleParams,
    "tire": TireParams,
    "noise": NoiseConfig,
    "mpc": MpcConfig,
    "compensator": CompensatorConfig,
}
_LOOP_KEYS = {"mpc_reference": str, "driver_brake_front": float, "driver_brake_rear": float}
_EOL_KEYS = ("radius_front", "inertia_front", "radius_rear", "inertia_rear")


def _field_types(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = type(f.default)
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = type(f.default_factory())
    return out


def _convert(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is tuple:
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if kind is str:
        return raw
    raise ValueError(f"unsupported field type {kind}")


def parse_lines(lines, source: str = "<string>") -> dict:
    """Parse ``key = value`` lines into a flat dict of typed values."""
    values = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError("expected 'key = value'", lineno, source)
        key, raw = (s.strip() for s in text.split("=", 1))
        values[key] = _typed(key, raw, lineno, source)
    return values


def _typed(key: str, raw: str, lineno=None, source=None):
    section, _, name = key.partition(".")
    if not name:
        raise ConfigError(f"key {key!r} lacks a namespace", lineno, source)
    if section in _SECTIONS:
        kinds = _field_types(_SECTIONS[section])
        kinds.pop("tire", None)
    elif section == "loop":
        kinds = _LOOP_KEYS
    elif section == "eol":
        kinds = {k: float for k in _EOL_KEYS}
    else:
        raise ConfigError(f"unknown namespace {section!r}", lineno, source)
    if name not in kinds:
        raise ConfigError(f"unknown key {key!r}", lineno, source)
    try:
        return _convert(raw, kinds[name])
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}", lineno, source) from None


def parse_overrides(items) -> dict:
    values = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        values[key] = _typed(key, raw, source="--override")
    return values


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return Path(str(resources.files("tilc") / "scenarios" / f"{name}.cfg"))


def read_file(path) -> dict:
    path = Path(path)
    if not path.exists() and str(path) in PRESETS:
        path = preset_path(str(path))
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_lines(text.splitlines(), str(path))


def build(values: dict) -> tuple[Scenario, Settings]:
    """Turn a flat mapping into a (Scenario, Settings) pair."""
    grouped = {s: {} for s in (*_SECTIONS, "loop", "eol")}
    for key, value in values.items():
        section, _, name = key.partition(".")
        grouped[section][name] = value
    try:
        tire = TireParams(**grouped["tire"])
        vehicle = VehicleParams(**grouped["vehicle"], tire=tire)
        if "wheelbase" not in grouped["vehicle"]:
            wb = vehicle.cog_to_front_axle + vehicle.cog_to_rear_axle
            vehicle = dataclasses.replace(vehicle, wheelbase=wb)
        settings = Settings(
            vehicle=vehicle,
            noise=NoiseConfig(**grouped["noise"]),
            mpc=MpcConfig(**grouped["mpc"]),
            compensator=CompensatorConfig(**grouped["compensator"]),
            **{f"eol_{k}": v for k, v in grouped["eol"].items()},
            **grouped["loop"],
        )
        scenario = Scenario(**grouped["scenario"])
    except (InvalidConfigurationError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return scenario, settings


def load(paths=(), overrides=(), seed: int | None = None) -> tuple[Scenario, Settings, dict]:
    """Load config files then overrides; returns (scenario, settings, flat values)."""
    values = {}
    for p in paths:
        values.update(read_file(p))
    values.update(parse_overrides(overrides))
    if seed is not None:
        values["scenario.seed"] = int(seed)
    scenario, settings = build(values)
    return scenario, settings, values


def dump(values: dict) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, tuple):
            text = ", ".join(repr(float(x)) for x in v)
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def config_hash(values: dict) -> str:
    return hashlib.sha256(dump(values).encode()).hexdigest()[:12]
