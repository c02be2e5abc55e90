"""Time the hot kernels with numba on and with the numpy/CPython fallback.

Each mode runs in its own interpreter because the switch is read at import.
Timings exclude the first (compiling) call.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys
import textwrap
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent

WORKER = textwrap.dedent(
    """
    import json, sys, timeit
    import numpy as np
    from precswitch import kernels
    from precswitch.config import load_config
    from precswitch.intervals import SwitchingWindows
    from precswitch.precision import FORMATS, simulate_rounded
    from precswitch.solver import brute_force_schedule_search

    repeat = int(sys.argv[1])
    cfg = load_config({cc!r})
    rng = np.random.default_rng(0)
    values = rng.normal(scale=100.0, size=200_000)
    b16 = FORMATS["binary16"].as_row()
    sw = np.r_[np.ones(210), np.zeros(591)]
    # 4 windows of width 5: 6**4 = 1296 candidate schedules over 800 samples
    windows = SwitchingWindows(((64, 68), (180, 184), (244, 248), (350, 354)))

    cases = {{
        "round_array 2e5": lambda: kernels.round_array(values, *b16),
        "rounded CC loop": lambda: simulate_rounded(cfg.system, cfg.scenario, sw),
        "brute force 1296 CC schedules": lambda: brute_force_schedule_search(
            cfg.system, cfg.scenario, windows, cfg.options),
    }}
    out = {{"jit": kernels.JIT_ENABLED}}
    for name, fn in cases.items():
        fn()
        out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
    print(json.dumps(out))
    """
).format(cc=str(ROOT / "configs" / "cc.json"))


def run(disable: bool, repeat: int) -> dict:
    env = dict(os.environ)
    env.pop("PRECSWITCH_DISABLE_JIT", None)
    if disable:
        env["PRECSWITCH_DISABLE_JIT"] = "1"
    proc = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                          capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.splitlines()[-1])


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    jit, fallback = run(False, args.repeat), run(True, args.repeat)
    print(f"{'kernel':32s} {'numba [s]':>11s} {'fallback [s]':>13s} {'speedup':>8s}")
    for name in jit:
        if name == "jit":
            continue
        a, b = jit[name], fallback[name]
        print(f"{name:32s} {a:11.4f} {b:13.4f} {b / a:7.1f}x")


if __name__ == "__main__":
    main()
