"""Time simulator steps with the compiled event-loop kernels and with their plain-Python originals.

    python benchmarks/bench_simkernel.py [--steps N] [--users U]

Both paths run in one process: the uncompiled versions are reached through
each kernel's ``py_func``. Telemetry from the two runs is compared so the
speedup is reported only for identical output.
"""
import argparse
import time
from contextlib import contextmanager

import numpy as np

from corealloc._jit import JIT_ENABLED
from corealloc.simenv import Simulator, default_topology, kernels

KERNELS = ("advance_step", "nearest_rank")


@contextmanager
def uncompiled():
    saved = {name: getattr(kernels, name) for name in KERNELS}
    try:
        for name, fn in saved.items():
            setattr(kernels, name, fn.py_func)
        yield
    finally:
        for name, fn in saved.items():
            setattr(kernels, name, fn)


def run(steps: int, users: int, seed: int = 0):
    topo = default_topology()
    sim = Simulator(topo, seed=seed)
    sim.set_users(users)
    alloc = 0.6 * topo.caps
    sim.step(alloc)  # first call pays any compilation cost
    p99 = []
    t0 = time.perf_counter()
    for _ in range(steps):
        p99.append(sim.step(alloc).p99_ms)
    return time.perf_counter() - t0, np.array(p99)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--users", type=int, default=400)
    args = ap.parse_args(argv)
    if not JIT_ENABLED:
        print("JIT disabled by COREALLOC_DISABLE_JIT; both paths below are uncompiled")
    fast, p_fast = run(args.steps, args.users)
    with uncompiled():
        slow, p_slow = run(args.steps, args.users)
    same = np.array_equal(p_fast, p_slow)
    print(f"compiled:   {1e3 * fast / args.steps:8.3f} ms/step")
    print(f"python:     {1e3 * slow / args.steps:8.3f} ms/step")
    print(f"speedup:    {slow / fast:8.1f}x   identical telemetry: {same}")
    return 0 if same else 1


if __name__ == "__main__":
    raise SystemExit(main())
