import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from precswitch.lti import ConfigError, ScenarioSpec, Step, SystemSpec, reference_targets, simulate_nominal
from precswitch.precision import (
    FORMATS,
    ErrorTerm,
    RoundingSpec,
    VariableRanges,
    conservative_step_error_bound,
    get_format,
    round_array,
    round_to_format,
    simulate_rounded,
    update_op_count,
)

from instances import random_system

B16, B32, B64, BF16 = (FORMATS[k] for k in ("binary16", "binary32", "binary64", "bfloat16"))


def _wide_sample(rng, size, lo_exp, hi_exp):
    """Random signed values spread log-uniformly over a range of binary exponents."""
    mant = rng.uniform(1.0, 2.0, size)
    exps = rng.integers(lo_exp, hi_exp, size)
    signs = rng.choice([-1.0, 1.0], size)
    return signs * np.ldexp(mant, exps)


def _bfloat16_oracle(v32):
    """Round binary32 values to bfloat16 by round-to-nearest-even on the bit pattern."""
    bits = v32.view(np.uint32).astype(np.uint64)
    bias = ((bits >> 16) & 1) + 0x7FFF
    out = ((bits + bias) & 0xFFFF0000).astype(np.uint32)
    return out.view(np.float32).astype(np.float64)


class TestFormats:
    def test_unit_roundoffs(self):
        assert B16.eps_m == 2.0**-11
        assert B32.eps_m == 2.0**-24
        assert B64.eps_m == 2.0**-53

    def test_smallest_subnormals(self):
        assert B16.delta_m == float(np.finfo(np.float16).smallest_subnormal)
        assert B32.delta_m == float(np.finfo(np.float32).smallest_subnormal)
        assert B64.delta_m == float(np.finfo(np.float64).smallest_subnormal)

    def test_max_finite(self):
        assert B16.max_finite == 65504.0
        assert B32.max_finite == float(np.finfo(np.float32).max)

    def test_aliases(self):
        assert get_format("FP16") is B16
        assert get_format("single") is B32

    def test_unknown_format(self):
        with pytest.raises(ConfigError):
            get_format("binary8")

    def test_rejects_bad_spec(self):
        with pytest.raises(ValueError):
            RoundingSpec(1, -14, 15)
        with pytest.raises(ValueError):
            RoundingSpec(11, 15, 15)


class TestRoundToFormat:
    def test_representable_unchanged(self):
        assert round_to_format(1.0, B16) == 1.0

    def test_tie_rounds_to_even(self):
        assert round_to_format(1.0 + 2.0**-11, B16) == 1.0
        assert round_to_format(1.0 + 3 * 2.0**-11, B16) == 1.0 + 2.0**-9

    def test_below_half_ulp(self):
        assert round_to_format(1.0 + 2.0**-12, B16) == 1.0

    def test_overflow_to_inf(self):
        assert round_to_format(70000.0, B16) == math.inf
        assert round_to_format(-70000.0, B16) == -math.inf
        # 65520 is the midpoint between 65504 and the next (absent) value
        assert round_to_format(65519.0, B16) == 65504.0
        assert round_to_format(65520.0, B16) == math.inf

    def test_underflow(self):
        assert round_to_format(2.0**-26, B16) == 0.0
        assert round_to_format(3 * 2.0**-26, B16) == 2.0**-24

    def test_non_finite_passthrough(self):
        assert math.isnan(round_to_format(math.nan, B16))
        assert round_to_format(-math.inf, B32) == -math.inf

    def test_signed_zero(self):
        r = round_to_format(-0.0, B16)
        assert r == 0.0 and math.copysign(1.0, r) < 0

    @pytest.mark.parametrize("fmt,dtype,lo,hi", [(B16, np.float16, -30, 20), (B32, np.float32, -160, 140)])
    def test_bit_exact_against_numpy(self, fmt, dtype, lo, hi):
        rng = np.random.default_rng(7)
        v = _wide_sample(rng, 100_000, lo, hi)
        with np.errstate(over="ignore"):
            ref = v.astype(dtype).astype(np.float64)
        got = round_array(v, fmt)
        assert np.array_equal(got.view(np.int64), ref.view(np.int64))

    def test_bfloat16_against_bit_oracle(self):
        rng = np.random.default_rng(8)
        with np.errstate(over="ignore"):
            v32 = _wide_sample(rng, 100_000, -140, 129).astype(np.float32)
        ref = _bfloat16_oracle(v32)
        got = round_array(v32.astype(np.float64), BF16)
        assert np.array_equal(got.view(np.int64), ref.view(np.int64))

    @pytest.mark.parametrize("fmt", [B16, BF16, B32], ids=lambda f: f.name)
    def test_idempotent(self, fmt):
        rng = np.random.default_rng(9)
        v = _wide_sample(rng, 100_000, fmt.min_exponent - fmt.significand_bits - 2, fmt.max_exponent + 2)
        once = round_array(v, fmt)
        assert np.array_equal(round_array(once, fmt), once)

    def test_scalar_matches_array(self):
        rng = np.random.default_rng(10)
        v = _wide_sample(rng, 500, -30, 20)
        got = round_array(v, B16)
        assert all(round_to_format(a, B16) == b for a, b in zip(v, got))


@settings(max_examples=400, deadline=None)
@given(
    v=st.floats(allow_nan=False, allow_infinity=False),
    fmt=st.sampled_from([B16, BF16, B32]),
)
def test_rounding_error_model(v, fmt):
    r = round_to_format(v, fmt)
    if abs(v) > fmt.max_finite:
        return
    if math.isinf(r):
        # the round-up past max_finite band
        assert abs(v) >= fmt.max_finite
        return
    assert abs(r - v) <= fmt.eps_m * abs(v) + fmt.delta_m


def _scalar_system(a, b, c, k):
    return SystemSpec(
        np.array([[a]]), np.array([[b]]), np.array([[c]]), np.array([[k]]), 1.0,
        np.array([0.0]), np.array([0.0]), np.eye(1), np.eye(1),
    )


class TestSimulateRounded:
    def test_binary64_is_nominal(self, cc):
        N = 800
        nom = simulate_nominal(cc.system, cc.scenario)
        got = simulate_rounded(cc.system, cc.scenario, np.zeros(N + 1, dtype=int), lo=B64, hi=B16)
        for a, b in ((nom.x, got.x), (nom.u, got.u), (nom.y, got.y)):
            assert np.array_equal(a, b)

    def test_power_of_two_system_is_nominal(self):
        sys = _scalar_system(0.5, 0.5, 1.0, -0.5)
        # steady state for y=1 is x = u = 1; every iterate needs at most 8 significand bits
        scen = ScenarioSpec((Step(0.0, (1.0,)),), 2.0, 0.5, 8.0, 1.0, 2.0)
        nom = simulate_nominal(sys, scen)
        got = simulate_rounded(sys, scen, np.zeros(9, dtype=int), lo=B16, hi=B32)
        assert np.array_equal(nom.x, got.x)
        assert np.array_equal(nom.u, got.u)

    def test_schedule_length_checked(self, cc):
        with pytest.raises(ValueError):
            simulate_rounded(cc.system, cc.scenario, np.ones(10, dtype=int))

    def test_cc_all_binary16_breaks(self, cc):
        traj = simulate_rounded(cc.system, cc.scenario, np.zeros(801, dtype=int), lo=B16, hi=B32)
        assert traj.nonfinite or not np.all(np.isfinite(traj.y))

    def test_cc_all_binary32_tracks(self, cc):
        nom = simulate_nominal(cc.system, cc.scenario)
        traj = simulate_rounded(cc.system, cc.scenario, np.ones(801, dtype=int), lo=B16, hi=B32)
        assert not traj.nonfinite
        assert np.max(np.abs(traj.y - nom.y)) < 1e-2


class TestStepBound:
    def test_zero_ranges(self, cc):
        zero = VariableRanges(x=((0.0, 0.0),) * 3, u=((0.0, 0.0),))
        bound = conservative_step_error_bound(cc.system, zero, B16)
        assert 0.0 <= bound <= update_op_count(cc.system) * B16.delta_m

    @pytest.mark.parametrize("fmt", [B16, B32, B64], ids=lambda f: f.name)
    def test_single_product(self, fmt):
        prod = ErrorTerm.exact(1.0, fmt) * ErrorTerm.exact(1.0, fmt)
        assert prod.err == fmt.eps_m + fmt.delta_m

    def test_op_count_cc(self, cc):
        # controller 3 subs, 3 muls, 2 adds, 1 add; plant 3 rows of 4 muls and 3 adds; output 3 muls, 2 adds
        assert update_op_count(cc.system) == 9 + 21 + 5

    def test_monotone_in_format(self, cc):
        nom = simulate_nominal(cc.system, cc.scenario)
        ranges = VariableRanges.from_trajectory(nom)
        b = [conservative_step_error_bound(cc.system, ranges, f) for f in (B16, B32, B64)]
        assert b[0] >= b[1] >= b[2] > 0

    def test_monotone_in_ranges(self, cc):
        nom = simulate_nominal(cc.system, cc.scenario)
        narrow = VariableRanges.from_trajectory(nom, margin=0.0)
        wide = VariableRanges.from_trajectory(nom, margin=0.5)
        assert conservative_step_error_bound(cc.system, wide, B16) >= conservative_step_error_bound(
            cc.system, narrow, B16
        )

    @pytest.mark.xfail(
        strict=True,
        reason="worst-case interval propagation over the CC state ranges is ~3000x looser "
        "than a floating-point optimizer's bound; see decision ledger",
    )
    def test_cc_binary16_order_of_magnitude(self, cc):
        ranges = VariableRanges.from_trajectory(simulate_nominal(cc.system, cc.scenario))
        bound = conservative_step_error_bound(cc.system, ranges, B16)
        assert 0.146 / 10 <= bound <= 0.146 * 10

    def test_range_count_checked(self, cc):
        with pytest.raises(ConfigError):
            conservative_step_error_bound(cc.system, VariableRanges(x=((0, 1),), u=((0, 1),)), B16)

    def test_empty_range_rejected(self):
        with pytest.raises(ConfigError):
            VariableRanges(x=((1.0, 0.0),), u=((0.0, 1.0),))
        with pytest.raises(ConfigError):
            VariableRanges(x=((0.0, math.inf),), u=((0.0, 1.0),))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("fmt", [B16, B32], ids=lambda f: f.name)
def test_bound_propagation_is_sound(seed, fmt):
    """Deviation of an all-``fmt`` run stays inside the propagated per-step bound."""
    rng = np.random.default_rng(seed)
    sys = random_system(rng)
    N = 40
    scen = ScenarioSpec((Step(0.0, (float(rng.uniform(-2, 2)),)),), 1.0, 1.0, N * sys.h, 1.0, 2.0)
    nom = simulate_nominal(sys, scen)
    rounded = simulate_rounded(sys, scen, np.zeros(N + 1, dtype=int), lo=fmt, hi=fmt)
    assert not rounded.nonfinite

    # ranges covering both runs and the steady-state targets
    _, xss, uss = reference_targets(sys, scen, N)
    xs = np.vstack([nom.x, rounded.x, xss])
    us = np.vstack([nom.u, rounded.u, uss])
    ranges = VariableRanges(
        x=tuple(zip(xs.min(axis=0) - 0.1, xs.max(axis=0) + 0.1)),
        u=tuple(zip(us.min(axis=0) - 0.1, us.max(axis=0) + 0.1)),
    )
    b = conservative_step_error_bound(sys, ranges, fmt)

    n, m = sys.n, sys.m
    M = np.block([[sys.A, sys.B], [sys.K, np.zeros((m, m))]])
    reach = np.zeros(n + m)
    power = np.eye(n + m)
    dev = np.hstack([np.abs(rounded.x - nom.x), np.abs(rounded.u - nom.u)])
    for k in range(1, N + 1):
        reach = reach + np.abs(power) @ np.full(n + m, b)
        power = M @ power
        assert np.all(dev[k] <= reach * (1 + 1e-9) + 1e-300), k
