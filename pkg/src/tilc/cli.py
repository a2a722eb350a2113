"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from ._jit import USING_NUMBA
from .errors import ConfigError, InvalidConfigurationError, TilcError
from .loop import Scenario, run_experiment, write_atomic
from .tuner import PerformanceIndices, tune

log = logging.getLogger("tilc")

INDEX_HEADER = "scenario,controller,config_hash,J_lambda [%],J_u [N*m/s],J_time [s],completed"
BENCH_HEADER = "block,cycle [s],samples,mean [s],p95 [s],max [s],mean [% cycle],p95 [% cycle],max [% cycle]"


class UsageError(Exception):
    pass


def _load(args, extra=()):
    paths = [args.scenario, *(getattr(args, "overlay", None) or ()), *extra]
    return cfgmod.load(paths, getattr(args, "override", None) or (), getattr(args, "seed", None))


def _indices_row(scenario: Scenario, controller: str, values: dict, logrun) -> str:
    try:
        p = PerformanceIndices.from_log(logrun)
        nums = f"{p.slip_cost_percent:.6g},{p.effort:.6g},{p.braking_time:.6g}"
    except TilcError:
        nums = "nan,nan,nan"
    return f"{scenario.name},{controller},{cfgmod.config_hash(values)},{nums},{int(logrun.completed)}"


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    scenario, settings, values = _load(args)
    result = run_experiment(scenario, args.controller, settings)
    out = _out(args)
    stem = f"{scenario.name}_{args.controller}"
    result.to_csv(out / f"{stem}.csv")
    row = _indices_row(scenario, args.controller, values, result)
    write_atomic(out / f"{stem}_indices.csv", INDEX_HEADER + "\r\n" + row + "\r\n")
    print(INDEX_HEADER)
    print(row)
    if not result.completed:
        log.error("run did not reach 10 km/h before the duration cap%s",
                  f" ({result.error})" if result.error else "")
        return 1
    return 0


def _overlay_for(path: str | None, default: Path) -> list:
    candidate = Path(path) if path else default
    if candidate.exists():
        return [candidate]
    log.warning("tuning overlay %s not found; using defaults", candidate)
    return []


def cmd_compare(args) -> int:
    out = _out(args)
    rows, ok = [], True
    for controller, overlay_arg, target in (("til", args.til_overlay, "til"), ("mpc", args.mpc_overlay, "mpc-eol")):
        extra = _overlay_for(overlay_arg, out / f"tuned_{target}.cfg")
        scenario, settings, values = _load(args, extra)
        result = run_experiment(scenario, controller, settings)
        ok &= result.completed
        result.to_csv(out / f"{scenario.name}_{controller}.csv")
        rows.append(_indices_row(scenario, controller, values, result))
    text = INDEX_HEADER + "\r\n" + "\r\n".join(rows) + "\r\n"
    write_atomic(out / f"{scenario.name}_comparison.csv", text)
    sys.stdout.write(text.replace("\r\n", "\n"))
    return 0 if ok else 1


def cmd_tune(args) -> int:
    if args.budget < 8:
        raise UsageError("budget must be at least the 8-point initial design")
    scenario, settings, values = _load(args)
    out = _out(args)

    def progress(rec):
        log.info("eval %d cost=%.6g incumbent=%.6g%s", rec.iteration, rec.cost, rec.incumbent,
                 " (failed)" if rec.failed else "")

    box, result = tune(args.target, scenario, settings, args.budget, args.seed or 0, callback=progress)
    overlay = cfgmod.dump({n: float(v) for n, v in zip(box.names, result.best_theta)})
    write_atomic(out / f"tuned_{args.target}.cfg", f"# tuned on {scenario.name}, cost {result.best_cost!r}\n" + overlay)
    write_atomic(out / f"tuning_{args.target}_history.csv", result.history_csv(box.names))
    sys.stdout.write(overlay)
    return 0


def bench_rows(samples: dict) -> list[str]:
    rows = []
    for block, (cycle, data) in samples.items():
        data = np.asarray(data, dtype=float)
        data = data[np.isfinite(data)]
        if len(data) == 0:
            rows.append(f"{block},{cycle!r},0,nan,nan,nan,nan,nan,nan")
            continue
        mean, p95, mx = float(np.mean(data)), float(np.percentile(data, 95)), float(np.max(data))
        rows.append(f"{block},{cycle!r},{len(data)},{mean:.6e},{p95:.6e},{mx:.6e},"
                    f"{100 * mean / cycle:.3f},{100 * p95 / cycle:.3f},{100 * mx / cycle:.3f}")
    return rows


def cmd_bench(args) -> int:
    if not USING_NUMBA:
        log.warning("numba is disabled; timings reflect the pure-numpy fallback")
    scenario, settings, _ = _load(args)
    run_experiment(scenario, "til", settings)  # warm-up: JIT compile / cache load
    ctrl, twin = [], []
    for rep in range(args.repetitions):
        result = run_experiment(replace(scenario, seed=scenario.seed + rep), "til", settings)
        ctrl.append(result.controller_time)
        twin.append(result.twin_time)
    rows = bench_rows({"controller": (settings.mpc.sample_time, np.concatenate(ctrl)),
                       "twin": (1e-3, np.concatenate(twin))})
    text = BENCH_HEADER + "\r\n" + "\r\n".join(rows) + "\r\n"
    write_atomic(_out(args) / f"{scenario.name}_bench.csv", text)
    sys.stdout.write(text.replace("\r\n", "\n"))
    return 0


def cmd_calibrate(args) -> int:
    from .sensors import calibrate_noise

    scenario, settings, _ = _load(args)
    clean = run_experiment(replace(scenario, noise=False), "til", settings)
    mask = clean.active_mask
    noise, snr = calibrate_noise(settings.noise, clean.time, clean.v, clean.wheel_rate, clean.slip,
                                 settings.vehicle.radii, args.target_snr, mask=mask)
    overlay = cfgmod.dump({"noise.speed_noise_std": noise.speed_noise_std,
                           "noise.wheel_noise_offset": noise.wheel_noise_offset,
                           "noise.wheel_noise_speed_gain": noise.wheel_noise_speed_gain})
    write_atomic(_out(args) / "calibrated_noise.cfg", f"# open-loop slip SNR {snr!r}\n" + overlay)
    sys.stdout.write(overlay)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilc", description="Twin-in-the-loop braking control simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario_default=None):
        p.add_argument("--scenario", default=scenario_default, required=scenario_default is None,
                       help="scenario file or preset name (%s)" % ", ".join(cfgmod.PRESETS))
        p.add_argument("--overlay", action="append", help="extra config file applied after the scenario")
        p.add_argument("--override", action="append", metavar="KEY=VALUE", help="single config entry")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("run", help="simulate one scenario")
    common(p)
    p.add_argument("--controller", choices=("til", "mpc"), default="til")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="TiL against the baseline MPC on one scenario")
    common(p)
    p.add_argument("--til-overlay", help="tuned compensator overlay (default OUT/tuned_til.cfg)")
    p.add_argument("--mpc-overlay", help="tuned baseline overlay (default OUT/tuned_mpc-eol.cfg)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("tune", help="Bayesian optimization of controller parameters")
    common(p, "training")
    p.add_argument("--target", choices=("til", "mpc-eol"), default="til")
    p.add_argument("--budget", type=int, default=40)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("bench", help="per-step runtime of the controller and twin blocks")
    common(p, "nominal")
    p.add_argument("--repetitions", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("calibrate", help="scale sensor noise to a target slip SNR")
    common(p, "training")
    p.add_argument("--target-snr", type=float, default=4.0)
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidConfigurationError, UsageError) as exc:
        print(f"tilc: error: {exc}", file=sys.stderr)
        return 2
    except TilcError as exc:
        print(f"tilc: runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
