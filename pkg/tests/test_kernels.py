"""The jitted kernels and the interpreted fallback must agree bit for bit."""

import hashlib
import json
import os
import subprocess
import sys
import textwrap
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from precswitch import kernels
from precswitch.precision import FORMATS

from conftest import CC_CONFIG

TESTS = Path(__file__).resolve().parent

PROBE = textwrap.dedent(
    """
    import hashlib, json, sys
    import numpy as np
    sys.path.insert(0, {tests!r})
    from precswitch import kernels
    from precswitch.config import load_config
    from precswitch.precision import FORMATS, simulate_rounded
    from precswitch.solver import brute_force_schedule_search
    from instances import random_instance

    def digest(*arrays):
        h = hashlib.sha256()
        for a in arrays:
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    out = {{"jit": kernels.JIT_ENABLED}}
    rng = np.random.default_rng(5)
    v = np.concatenate([rng.normal(scale=10.0 ** rng.integers(-8, 8, 4000)), [0.0, -0.0, np.inf, np.nan, 7e4, 1e-9]])
    for name in ("binary16", "binary32", "bfloat16"):
        out["round_" + name] = digest(kernels.round_array(v, *FORMATS[name].as_row()))
    cfg = load_config({cc!r})
    sw = np.r_[np.ones(210), np.zeros(591)]
    t = simulate_rounded(cfg.system, cfg.scenario, sw, cfg.lo_format, cfg.hi_format)
    out["cc_rounded"] = digest(t.x, t.u, t.y)
    for seed in (3, 4, 18):
        inst = random_instance(seed, max_free=8)
        r = brute_force_schedule_search(inst.sys, inst.scen, inst.windows, inst.options)
        out["brute_%d" % seed] = [r.objective.hex() if r.feasible else None, r.feasible_count, digest(r.sw) if r.feasible else None]
    print(json.dumps(out))
    """
).format(tests=str(TESTS), cc=str(CC_CONFIG))


def _probe(disable):
    env = dict(os.environ)
    env.pop("PRECSWITCH_DISABLE_JIT", None)
    if disable:
        env["PRECSWITCH_DISABLE_JIT"] = "1"
    proc = subprocess.run([sys.executable, "-c", PROBE], env=env, capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr
    return json.loads(proc.stdout.splitlines()[-1])


@pytest.fixture(scope="module")
def probes():
    return _probe(disable=False), _probe(disable=True)


def test_flag_selects_path(probes):
    jit, interp = probes
    assert jit["jit"] is True
    assert interp["jit"] is False


@pytest.mark.parametrize("key", ["round_binary16", "round_binary32", "round_bfloat16", "cc_rounded", "brute_3", "brute_4", "brute_18"])
def test_paths_agree(probes, key):
    jit, interp = probes
    assert jit[key] == interp[key]


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(allow_nan=True, allow_infinity=True, width=64), min_size=1, max_size=50),
    st.sampled_from(["binary16", "binary32", "bfloat16", "binary64"]),
)
def test_vectorised_rounding_matches_loop(values, fmt):
    v = np.array(values, dtype=np.float64)
    p, emin, emax = FORMATS[fmt].as_row()
    a = kernels._round_array_loop(v, p, emin, emax)
    with np.errstate(all="ignore"):
        b = kernels._round_array_numpy(v, p, emin, emax)
    # compare bit patterns so NaN and signed zero count
    assert hashlib.sha256(a.tobytes()).digest() == hashlib.sha256(b.tobytes()).digest()
