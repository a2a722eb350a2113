"""Compare the numba kernels against the pure-numpy fallback.

Each backend runs in its own interpreter because TILC_DISABLE_NUMBA is read
at import time.  Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from tilc import kernels as K
from tilc._jit import USING_NUMBA
from tilc.loop import Scenario, Settings, run_experiment
from tilc.mpc import MpcConfig, SlipMpc, WheelModelParams
from tilc.vehicle import DriverInput, VehicleParams, VehicleState, step_vehicle

repeat = int(sys.argv[1])
p = VehicleParams()


def best_of(fn, n):
    fn()  # compile or warm caches
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        out.append((time.perf_counter() - t0) / n)
    return min(out)


state = VehicleState.rolling(p, 40.0)
cmds = np.array([1500.0, 1500.0, 800.0, 800.0])
mpc = SlipMpc(WheelModelParams.from_vehicle(p, 0), MpcConfig())
rng = np.random.default_rng(0)
m = rng.standard_normal((5, 5))
h = m @ m.T + 0.1 * np.eye(5)
f = rng.standard_normal(5) * 3
box = (np.eye(5), -np.ones(5), np.ones(5), np.zeros(5))

t0 = time.perf_counter()
run_experiment(Scenario(duration_cap=2.0))
first = time.perf_counter() - t0
res = {
    "numba": USING_NUMBA,
    "vehicle_step [us]": 1e6 * best_of(lambda: step_vehicle(state, cmds, DriverInput(brake=1.0), p), 2000),
    "mpc_step [us]": 1e6 * best_of(lambda: mpc.step(0.07, 30.0, -9.0, 1500.0, 0.0, [0.08]), 500),
    "qp_5var [us]": 1e6 * best_of(lambda: K.qp_active_set(h, f, box[0], box[1], box[2], box[3], 100, 1e-10), 2000),
    "first_run_2s [s]": first,
}
t0 = time.perf_counter()
run_experiment(Scenario())
res["nominal_stop [s]"] = time.perf_counter() - t0
print(json.dumps(res))
"""


def run(disable: bool, repeat: int) -> dict:
    env = dict(os.environ, TILC_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    jit, ref = run(False, args.repeat), run(True, args.repeat)
    print(f"{'metric':<22}{'numba':>14}{'numpy':>14}{'speed-up':>10}")
    for key in jit:
        if key == "numba":
            continue
        print(f"{key:<22}{jit[key]:>14.3f}{ref[key]:>14.3f}{ref[key] / jit[key]:>10.1f}")
    if not jit["numba"]:
        print("warning: numba unavailable, both columns use the fallback")


if __name__ == "__main__":
    main()
