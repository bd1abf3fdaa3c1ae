import dataclasses
import math

import numpy as np
import pytest

from lvdoe import nlp, oracle, phasecalc as pc, solver
from lvdoe.netmodel import slack_reference
from lvdoe.nlp import Objective, ScenarioSpec, build_custom, build_problem
from lvdoe.oracle import (
    InfeasibleAtZeroExportError,
    InjectionSet,
    PowerFlowDivergedError,
    doe_bisection,
    solve_pf,
    validate_solution,
)
from lvdoe.phasecalc import LimitKind

from conftest import two_bus_case


class TestSolvePf:
    def test_zero_injections_propagate_slack(self):
        case = two_bus_case(load=False)
        state = solve_pf(case, InjectionSet.from_case(case), 0)
        ref = slack_reference(case)
        for n in range(2):
            np.testing.assert_allclose(state.u[n, :, 0], ref, atol=1e-14)
        assert np.abs(state.i_branch).max() == 0.0

    def test_single_load_drops_voltage(self):
        case = two_bus_case(load_kw=1.0)
        state = solve_pf(case, InjectionSet.from_case(case), 0)
        # load is on phase b; that phase sags, the others stay at nominal
        assert abs(state.u[1, 1, 0]) < 1.0
        assert pc.max_kcl_residual(state) <= 1e-10
        assert pc.max_voltage_drop_residual(state) <= 1e-10

    def test_element_powers_match_injections(self):
        case = two_bus_case(load_kw=2.0)
        inj = InjectionSet.from_case(case).with_generator(case, "g1", 0.02, 0.005, 0)
        state = solve_pf(case, inj, 0)
        p, q = pc.element_power(state, case.loads[0], 1, 0)
        assert p == pytest.approx(inj.p_load[0, 1, 0], abs=1e-10)
        assert q == pytest.approx(inj.q_load[0, 1, 0], abs=1e-10)
        pg, qg = pc.element_power(state, case.generators[0], 0, 0)
        assert pg == pytest.approx(0.02, abs=1e-10)
        assert qg == pytest.approx(0.005, abs=1e-10)

    def test_nlp_solution_reproduced(self):
        case = two_bus_case()
        prob = build_problem(case, ScenarioSpec(5), 1)
        sol = solver.solve(prob)
        assert sol.status == "optimal"
        pg, qg = nlp.decode_generation(prob, sol.x)
        inj = InjectionSet.from_case(case)
        p_gen = inj.p_gen.copy()
        q_gen = inj.q_gen.copy()
        p_gen[:, :, 1] = pg
        q_gen[:, :, 1] = qg
        pf_state = solve_pf(case, dataclasses.replace(inj, p_gen=p_gen, q_gen=q_gen), 1)
        nlp_state = nlp.decode_state(prob, sol.x)
        assert np.abs(pf_state.u[:, :, 0] - nlp_state.u[:, :, 0]).max() <= 1e-6

    def test_divergence_on_absurd_injection(self):
        case = two_bus_case()
        inj = InjectionSet.from_case(case).with_generator(case, "g1", 1000.0, 0.0, 0)
        with pytest.raises(PowerFlowDivergedError):
            solve_pf(case, inj, 0)

    def test_multi_branch_tree_orientation(self, synth4):
        # synth4 stores all branches pointing away from the slack; flip one
        # by constructing a reversed copy and confirm identical physics
        state = solve_pf(synth4, InjectionSet.from_case(synth4), 12)
        assert pc.max_kcl_residual(state) <= 1e-10
        assert pc.max_voltage_drop_residual(state) <= 1e-10


class TestBisection:
    def test_unconstrained_returns_bracket_top(self):
        case = two_bus_case(vmax=2.0, vmin=0.1, vuf_max=0.5, i_max=5000.0, load=False)
        limit = doe_bisection(case, "g1", {LimitKind.VOLTAGE}, 0)
        assert limit == pytest.approx(10.0 * case.generators[0].p_cap)

    def test_voltage_limit_matches_closed_form(self):
        case = two_bus_case(load=False)
        br = case.branches[0]
        r, x = br.r[0, 0], br.x[0, 0]
        z2 = r * r + x * x
        vmax = case.buses[1].vmax
        # |U|^2 = m solves m^2 - m(1 + 2rP) + |z|^2 P^2 = 0; at the limit
        # m = vmax^2, giving the quadratic below (first positive root).
        p_closed = (r * vmax**2 - vmax * math.sqrt(r**2 * vmax**2 - z2 * (vmax**2 - 1))) / z2
        limit = doe_bisection(case, "g1", {LimitKind.VOLTAGE}, 0)
        assert limit == pytest.approx(p_closed, abs=2e-6)

    def test_current_limit_matches_closed_form(self):
        case = two_bus_case(load=False)
        br = case.branches[0]
        r, x = br.r[0, 0], br.x[0, 0]
        i = br.i_max
        p_closed = r * i * i + i * math.sqrt(1.0 - (i * x) ** 2)
        limit = doe_bisection(case, "g1", {LimitKind.CURRENT}, 0)
        assert limit == pytest.approx(p_closed, abs=2e-6)

    def test_full_set_at_most_each_individual_limit(self):
        case = two_bus_case(load=False)
        singles = [
            doe_bisection(case, "g1", {k}, 0)
            for k in (LimitKind.VOLTAGE, LimitKind.CURRENT, LimitKind.VUF)
        ]
        combined = doe_bisection(case, "g1", set(pc.ALL_LIMITS), 0)
        assert combined <= min(singles) + 1e-6

    def test_monotone_in_constraint_set(self):
        case = two_bus_case(load=False)
        l_v = doe_bisection(case, "g1", {LimitKind.VOLTAGE}, 0)
        l_vc = doe_bisection(case, "g1", {LimitKind.VOLTAGE, LimitKind.CURRENT}, 0)
        l_all = doe_bisection(case, "g1", set(pc.ALL_LIMITS), 0)
        assert l_v >= l_vc >= l_all

    def test_infeasible_at_zero_export(self):
        case = two_bus_case(load_kw=3.0, vmin=1.02, vmax=1.2)
        with pytest.raises(InfeasibleAtZeroExportError):
            doe_bisection(case, "g1", {LimitKind.VOLTAGE}, 0)


class TestValidateSolution:
    def test_clean_solution_validates(self):
        case = two_bus_case()
        spec = ScenarioSpec(5)
        prob = build_problem(case, spec, 0)
        sol = solver.solve(prob)
        report = validate_solution(case, sol, spec)
        assert report.ok
        assert report.max_voltage_deviation <= 1e-6
        assert report.violations == ()
        assert report.max_kcl_residual <= 1e-8

    def test_scenario1_solution_reports_state(self):
        case = two_bus_case()
        spec = ScenarioSpec(1)
        prob = build_problem(case, spec, 0)
        sol = solver.solve(prob)
        report = validate_solution(case, sol, spec)
        # no network limits are checked, but the re-solve still happens
        assert report.violations == ()
        assert report.max_voltage_deviation <= 1e-6

    def test_corrupted_solution_flagged(self):
        case = two_bus_case()
        spec = ScenarioSpec(5)
        prob = build_problem(case, spec, 0)
        sol = solver.solve(prob)
        xc = sol.x.copy()
        xc[prob.layout.u_re(1, 0)] += 0.2
        report = validate_solution(case, dataclasses.replace(sol, x=xc), spec)
        assert not report.ok
        assert report.max_voltage_deviation > 0.1
