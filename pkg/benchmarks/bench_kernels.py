"""Compare the numba-compiled kernels with the pure-numpy fallback.

Each backend runs in its own interpreter (the backend is fixed at import time
by ``SNMAPPO_NUMBA``). Timings exclude compilation: every kernel is warmed up
before measurement.

    python benchmarks/bench_kernels.py [--steps 20000]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

CHILD = r"""
import json, sys, time
import numpy as np
from snmappo._accel import backend
from snmappo.envs import make_env
from snmappo.mappo import nstep_returns_kernel

steps = int(sys.argv[1])
out = {"backend": backend()}
for name in ("warehouse-tiny-2ag", "warehouse-small-2ag", "skirmish-5v6", "skirmish-8v9"):
    env = make_env(name)
    rng = np.random.default_rng(0)
    res = env.reset(seed=0)
    for phase in ("warmup", "timed"):
        n = 200 if phase == "warmup" else steps
        t0 = time.perf_counter()
        for _ in range(n):
            m = res.action_masks
            a = np.array([rng.choice(np.flatnonzero(row)) for row in m])
            res = env.step(a)
            if res.done:
                res = env.reset()
        elapsed = time.perf_counter() - t0
    out[name] = 1e6 * elapsed / steps

T = 1024
r = np.random.default_rng(1).standard_normal(T)
v = np.random.default_rng(2).standard_normal(T)
term = np.zeros(T, dtype=bool)
done = np.zeros(T, dtype=bool)
done[::200] = True
nstep_returns_kernel(r, v, term, done, 0.99, 10)
t0 = time.perf_counter()
reps = 200
for _ in range(reps):
    nstep_returns_kernel(r, v, term, done, 0.99, 10)
out["nstep_returns_1024"] = 1e6 * (time.perf_counter() - t0) / reps
print(json.dumps(out))
"""


def run_backend(flag: str, steps: int) -> dict:
    env = dict(os.environ, SNMAPPO_NUMBA=flag)
    proc = subprocess.run([sys.executable, "-c", CHILD, str(steps)], env=env, capture_output=True, text=True,
                          check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=20000)
    args = parser.parse_args()
    fast = run_backend("1", args.steps)
    slow = run_backend("0", args.steps)
    print(f"{'benchmark':<24}{'numba us':>12}{'numpy us':>12}{'speedup':>10}")
    for key in fast:
        if key == "backend":
            continue
        print(f"{key:<24}{fast[key]:>12.1f}{slow[key]:>12.1f}{slow[key] / fast[key]:>10.2f}")
    print(f"backends: {fast['backend']} vs {slow['backend']}")


if __name__ == "__main__":
    t0 = time.perf_counter()
    main()
    print(f"total {time.perf_counter() - t0:.1f}s")
