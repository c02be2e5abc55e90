import math

import numpy as np
import pytest

from precswitch.intervals import SwitchingWindows
from precswitch.miqp import ModelOptions, ReducedProblem, build_schedule_program, presolve
from precswitch.solver import (
    SearchSpaceTooLarge,
    branch_and_bound,
    brute_force_schedule_search,
    solve_qp_relaxation,
)

from instances import random_instance


def _reduced(inst):
    return presolve(build_schedule_program(inst.sys, inst.scen, inst.windows, inst.options))


def _relaxable_seeds(start, count):
    """The first ``count`` seeds from ``start`` whose root relaxation is feasible."""
    seeds = []
    seed = start
    while len(seeds) < count:
        rp = _reduced(random_instance(seed, max_free=12))
        if rp.n_free and solve_qp_relaxation(rp).status == "optimal":
            seeds.append(seed)
        seed += 1
    return seeds


def _rel(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


def _box_qp(H, g, c0=0.0, G=None, hb=None):
    F = len(g)
    G = np.zeros((0, F)) if G is None else G
    hb = np.zeros(0) if hb is None else hb
    return ReducedProblem(H=H, g=g, c0=c0, G=G, hb=hb, pairs=[], groups=[])


class TestRelaxation:
    def test_interior_minimum(self):
        # (s - 0.3)^2 written as s^2 - 0.6 s + 0.09
        res = solve_qp_relaxation(_box_qp([[2.0]], [-0.6], 0.09))
        assert res.status == "optimal"
        assert res.s[0] == pytest.approx(0.3, abs=1e-8)
        assert res.objective == pytest.approx(0.0, abs=1e-12)
        assert res.bound <= res.objective + 1e-12
        assert res.bound == pytest.approx(0.0, abs=1e-9)

    def test_minimum_outside_box_is_clipped(self):
        res = solve_qp_relaxation(_box_qp([[2.0]], [-3.0], 2.25))
        assert res.s[0] == pytest.approx(1.0, abs=1e-8)
        assert res.objective == pytest.approx(0.25, abs=1e-9)

    def test_contradictory_rows(self):
        # s <= -1 and s >= 1
        rp = _box_qp([[2.0]], [0.0], G=np.array([[1.0], [-1.0]]), hb=np.array([-1.0, -1.0]))
        assert solve_qp_relaxation(rp).status == "infeasible"
        assert branch_and_bound(rp).status == "infeasible"

    @pytest.mark.parametrize("seed", range(10))
    def test_all_fixed_matches_direct_evaluation(self, seed):
        inst = random_instance(seed, max_free=8)
        rp = _reduced(inst)
        p = rp.problem
        rng = np.random.default_rng(seed)
        s = rng.integers(0, 2, rp.n_free).astype(float)
        res = solve_qp_relaxation(rp, dict(enumerate(s)))
        if res.status == "optimal":
            direct = p.objective(p.assignment_from_sw(rp.expand(s)))
            assert _rel(res.bound, direct) <= 1e-9
            assert _rel(res.objective, direct) <= 1e-9
        else:
            assert rp.violation(s) > 0 or rp.status == "infeasible"

    @pytest.mark.parametrize("seed", _relaxable_seeds(100, 20))
    def test_kkt_and_gradient(self, seed):
        rp = _reduced(random_instance(seed, max_free=12))
        res = solve_qp_relaxation(rp)
        assert res.kkt_residual <= 1e-8
        step = 1e-6
        grad = rp.gradient(res.s)
        fd = np.empty(rp.n_free)
        for j in range(rp.n_free):
            e = np.zeros(rp.n_free)
            e[j] = step
            fd[j] = (rp.objective(res.s + e) - rp.objective(res.s - e)) / (2 * step)
        assert np.max(np.abs(grad - fd)) <= 1e-5 * max(1.0, np.max(np.abs(grad)))

    @pytest.mark.parametrize("seed", range(15))
    def test_bound_below_best_integer(self, seed):
        inst = random_instance(200 + seed, max_free=10)
        rp = _reduced(inst)
        oracle = brute_force_schedule_search(inst.sys, inst.scen, inst.windows, inst.options)
        res = solve_qp_relaxation(rp)
        if oracle.feasible:
            assert res.status == "optimal"
            assert res.bound <= oracle.objective + 1e-9 * max(1.0, abs(oracle.objective))

    @pytest.mark.parametrize("seed", _relaxable_seeds(300, 15))
    def test_child_bounds_dominate_parent(self, seed):
        rp = _reduced(random_instance(seed, max_free=12))
        root = solve_qp_relaxation(rp)
        j = int(np.argmax(np.minimum(root.s, 1 - root.s)))
        slack = 1e-9 * max(1.0, abs(root.bound))
        for val in (0.0, 1.0):
            child = solve_qp_relaxation(rp, {j: val})
            if child.status == "optimal":
                assert child.bound >= root.bound - slack
                assert child.objective >= root.objective - slack


class TestBranchAndBound:
    def test_zero_free_binaries(self):
        inst = random_instance(1)
        p = build_schedule_program(inst.sys, inst.scen, SwitchingWindows(()), inst.options)
        rp = presolve(p)
        sol = branch_and_bound(rp)
        if rp.status == "ok":
            assert sol.status == "optimal"
            assert sol.nodes == 1
            assert np.all(sol.sw == 1.0)
            assert _rel(sol.objective, p.objective(p.assignment_from_sw(np.ones(p.N + 1)))) <= 1e-12
        else:
            assert sol.status == "infeasible"

    def test_presolve_infeasible(self):
        from precswitch.lti import ScenarioSpec, Step, SystemSpec

        sys = SystemSpec([[0.9]], [[0.5]], [[1.0]], [[-0.6]], 0.1, [0.0], [0.0])
        scen = ScenarioSpec((Step(0.0, (1.0,)),), 0.1, 0.1, 1.0, 1.0, 2.0)
        sol = branch_and_bound(presolve(build_schedule_program(sys, scen, SwitchingWindows(((5, 6),)))))
        assert sol.status == "infeasible"
        assert not sol.has_schedule

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_brute_force(self, seed):
        sign = "symmetric" if seed % 3 == 0 else "positive"
        inst = random_instance(1000 + seed, max_free=12, error_sign=sign)
        rp = _reduced(inst)
        sol = branch_and_bound(rp)
        oracle = brute_force_schedule_search(inst.sys, inst.scen, inst.windows, inst.options)
        assert (sol.status == "optimal") == oracle.feasible
        if oracle.feasible:
            assert _rel(sol.objective, oracle.objective) <= 1e-6
            assert sol.lower_bound <= sol.objective
            assert sol.gap <= 1e-6
            p = rp.problem
            assert p.max_residual(sol.assignment) <= 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_deterministic(self, seed):
        rp = _reduced(random_instance(2000 + seed))
        a, b = branch_and_bound(rp), branch_and_bound(rp)
        assert a.status == b.status and a.nodes == b.nodes
        if a.has_schedule:
            assert np.array_equal(a.s, b.s)
            assert a.objective == b.objective

    @pytest.mark.parametrize("seed", range(5))
    def test_parallel_meets_gap(self, seed):
        rp = _reduced(random_instance(2100 + seed))
        serial = branch_and_bound(rp)
        parallel = branch_and_bound(rp, workers=3)
        assert serial.status == parallel.status
        if serial.has_schedule:
            assert _rel(serial.objective, parallel.objective) <= 1e-6

    def _branching_instance(self):
        for seed in range(3000, 3100):
            rp = _reduced(random_instance(seed))
            if branch_and_bound(rp).nodes > 5:
                return rp
        pytest.fail("no instance needing more than five nodes")

    def test_node_limit(self):
        rp = self._branching_instance()
        sol = branch_and_bound(rp, node_limit=3)
        assert sol.status == "node-limit"
        assert sol.lower_bound <= sol.objective

    def test_time_limit(self):
        rp = self._branching_instance()
        sol = branch_and_bound(rp, time_limit=0.0)
        assert sol.status == "gap-limit"
        assert sol.lower_bound <= sol.objective or math.isinf(sol.objective)


class TestBruteForce:
    def _small(self):
        inst = random_instance(7)
        return inst.sys, inst.scen, inst.options

    def test_no_windows_single_candidate(self):
        sys, scen, options = self._small()
        res = brute_force_schedule_search(sys, scen, SwitchingWindows(()), options)
        assert res.candidates == 1
        assert res.feasible_count in (0, 1)
        if res.feasible:
            assert np.all(res.sw == 1.0)

    def test_width_three_window(self):
        sys, scen, options = self._small()
        res = brute_force_schedule_search(sys, scen, SwitchingWindows(((3, 5),)), options)
        assert res.candidates == 4

    def test_refuses_large_space(self):
        sys, scen, options = self._small()
        with pytest.raises(SearchSpaceTooLarge) as info:
            brute_force_schedule_search(sys, scen, SwitchingWindows(((2, 4), (6, 9))), options, max_candidates=10)
        assert info.value.cardinality == 4 * 5

    def test_prefers_hi_on_ties(self):
        sys, scen, _ = self._small()
        # no runtime weight and no roundoff: every schedule costs the same
        res = brute_force_schedule_search(
            sys, scen.__class__(scen.steps, scen.settling_time, 1e6, scen.horizon, 1.0, 2.0),
            SwitchingWindows(((3, 5),)), ModelOptions(w1=0.0),
        )
        assert res.feasible
        assert np.all(res.sw == 1.0)
