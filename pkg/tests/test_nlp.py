import numpy as np
import pytest

from lvdoe import netmodel as nm
from lvdoe import nlp, phasecalc as pc
from lvdoe.nlp import Objective, ScenarioSpec, build_custom, build_problem
from lvdoe.phasecalc import LimitKind

from conftest import two_bus_case


@pytest.fixture(scope="module")
def case():
    return two_bus_case()


def random_x(problem, rng):
    x = nlp.initial_point(problem)
    free = ~(problem.lb == problem.ub)
    x[free] += 0.3 * rng.standard_normal(free.sum())
    return x


class TestScenarioSpec:
    def test_bad_scenario_rejected(self):
        with pytest.raises(ValueError, match="unknown scenario"):
            ScenarioSpec(9)

    @pytest.mark.parametrize(
        "scenario, expect",
        [
            (1, frozenset()),
            (2, {LimitKind.VOLTAGE, LimitKind.VUF}),
            (3, {LimitKind.VOLTAGE, LimitKind.CURRENT}),
            (4, {LimitKind.CURRENT, LimitKind.VUF}),
            (5, {LimitKind.VOLTAGE, LimitKind.CURRENT, LimitKind.VUF}),
        ],
    )
    def test_constraint_sets(self, scenario, expect):
        assert nlp.constraint_set_for(ScenarioSpec(scenario)) == frozenset(expect)


class TestStructure:
    def test_s5_constraint_counts_two_bus(self, case):
        # 1 branch, 1 single-phase load, 1 single-phase generator:
        # equalities: 6 voltage-drop + 2 load power + 2 generator power
        #             + 6 nodal balance at the one non-slack bus = 16
        # inequalities: 3 current + 6 voltage (non-slack only) + 1 vuf = 10
        prob = build_problem(case, ScenarioSpec(5), 0)
        assert prob.eq.n_rows == 16
        assert prob.ineq.n_rows == 10
        kinds = [lbl.split("[")[0] for lbl in prob.eq.labels]
        assert kinds.count("vdrop_re") == 3 and kinds.count("vdrop_im") == 3
        assert kinds.count("kcl_re") == 3 and kinds.count("kcl_im") == 3
        assert kinds.count("load_p") == 1 and kinds.count("gen_q") == 1

    def test_s1_has_no_network_inequalities(self, case):
        prob = build_problem(case, ScenarioSpec(1), 0)
        assert prob.ineq.n_rows == 0
        e = 0  # single generator entry
        assert prob.ub[prob.layout.pg(e)] == pytest.approx(case.generators[0].p_cap)
        assert prob.lb[prob.layout.qg(e)] == prob.ub[prob.layout.qg(e)] == 0.0

    def test_s3_rows_are_s5_minus_vuf(self, case):
        p3 = build_problem(case, ScenarioSpec(3), 0)
        p5 = build_problem(case, ScenarioSpec(5), 0)
        assert set(p5.ineq.labels) - set(p3.ineq.labels) == {"vuf[h1]"}
        assert set(p3.ineq.labels) <= set(p5.ineq.labels)

    def test_slack_voltage_fixed_by_bounds(self, case):
        prob = build_problem(case, ScenarioSpec(5), 0)
        lay = prob.layout
        s = case.slack
        for p in range(3):
            assert prob.lb[lay.u_re(s, p)] == prob.ub[lay.u_re(s, p)]
            assert prob.lb[lay.u_im(s, p)] == prob.ub[lay.u_im(s, p)]

    def test_reactive_margin_adds_split_rows(self, case):
        prob = build_problem(case, ScenarioSpec(5, Objective.REACTIVE_MARGIN), 0)
        assert "qsplit[g1,a]" in prob.eq.labels
        assert "qaux_plus[g1,a]" in prob.ineq.labels
        assert "qaux_minus[g1,a]" in prob.ineq.labels
        e = 0
        lay = prob.layout
        assert prob.ub[lay.qplus(e)] == pytest.approx(case.generators[0].q_abs_max)
        assert prob.lb[lay.qaux(e)] == 0.0

    def test_period_out_of_range(self, case):
        with pytest.raises(ValueError, match="period"):
            build_problem(case, ScenarioSpec(5), case.horizon)

    def test_physical_case_rejected(self, case):
        with pytest.raises(ValueError, match="per-unit"):
            build_problem(nm.to_physical(case), ScenarioSpec(5), 0)


class TestEvaluation:
    def test_flat_start_no_load_feasible(self):
        case = two_bus_case(load=False)
        prob = build_problem(case, ScenarioSpec(5), 0)
        x = nlp.initial_point(prob)
        res = prob.eq.value(x)
        assert np.abs(res).max() <= 1e-12

    def test_matches_phasecalc_on_decoded_state(self, case):
        # every equality row must agree with the reference evaluation
        prob = build_problem(case, ScenarioSpec(5), 3)
        rng = np.random.default_rng(42)
        x = random_x(prob, rng)
        state = nlp.decode_state(prob, x)
        vals = nlp.eval_constraints(prob, x)
        for k, label in enumerate(prob.eq.labels):
            kind, rest = label.split("[")
            args = rest.rstrip("]").split(",")
            if kind in ("vdrop_re", "vdrop_im"):
                l = case.branch_pos[args[0]]
                p = "abc".index(args[1])
                re, im = pc.voltage_drop_residual(state, l, p, 0)
                expect = re if kind == "vdrop_re" else im
            elif kind in ("kcl_re", "kcl_im"):
                n = case.bus_pos[args[0]]
                p = "abc".index(args[1])
                re, im = pc.kcl_residual(state, n, p, 0)
                expect = re if kind == "kcl_re" else im
            elif kind in ("load_p", "load_q"):
                ld = next(l for l in case.loads if l.id == args[0])
                p = "abc".index(args[1])
                pw, qw = pc.element_power(state, ld, p, 0)
                row = ld.phases.index(args[1])
                expect = (pw - ld.p[row, 3]) if kind == "load_p" else (qw - ld.q[row, 3])
            elif kind in ("gen_p", "gen_q"):
                gen = next(g for g in case.generators if g.id == args[0])
                p = "abc".index(args[1])
                pw, qw = pc.element_power(state, gen, p, 0)
                e = prob.layout.gen_entries.index((case.generators.index(gen), p))
                if kind == "gen_p":
                    expect = pw - x[prob.layout.pg(e)]
                else:
                    expect = qw - x[prob.layout.qg(e)]
            else:
                continue
            assert vals[k] == pytest.approx(expect, abs=1e-14), label

    def test_limit_rows_match_phasecalc_forms(self, case):
        prob = build_problem(case, ScenarioSpec(5), 0)
        rng = np.random.default_rng(3)
        x = random_x(prob, rng)
        state = nlp.decode_state(prob, x)
        vals = prob.ineq.value(x)
        for k, label in enumerate(prob.ineq.labels):
            kind, rest = label.split("[")
            args = rest.rstrip("]").split(",")
            if kind == "imax":
                l = case.branch_pos[args[0]]
                p = "abc".index(args[1])
                cur = state.i_branch[l, p, 0]
                expect = abs(cur) ** 2 - case.branches[l].i_max ** 2
            elif kind == "vmax":
                n = case.bus_pos[args[0]]
                p = "abc".index(args[1])
                expect = abs(state.u[n, p, 0]) ** 2 - case.buses[n].vmax ** 2
            elif kind == "vmin":
                n = case.bus_pos[args[0]]
                p = "abc".index(args[1])
                expect = case.buses[n].vmin ** 2 - abs(state.u[n, p, 0]) ** 2
            elif kind == "vuf":
                n = case.bus_pos[args[0]]
                ratio = pc.vuf(state, n, 0)
                # squared-form row: |U2|^2 - limit^2 |U1|^2, un-normalized
                ua, ub, uc = state.u[n, :, 0]
                u2sq, u1sq, _ = pc._sequence_squares(ua, ub, uc)
                expect = u2sq - case.buses[n].vuf_max ** 2 * u1sq
                assert (vals[k] > 0) == (ratio > case.buses[n].vuf_max)
            else:
                continue
            assert vals[k] == pytest.approx(expect, rel=1e-12, abs=1e-13), label

    def test_eval_constraints_shape_and_order(self, case):
        prob = build_problem(case, ScenarioSpec(5), 0)
        x = nlp.initial_point(prob)
        vals = nlp.eval_constraints(prob, x)
        assert vals.shape == (prob.eq.n_rows + prob.ineq.n_rows,)
        np.testing.assert_array_equal(vals[: prob.eq.n_rows], prob.eq.value(x))

    def test_eval_constraints_rejects_bad_shape(self, case):
        prob = build_problem(case, ScenarioSpec(5), 0)
        with pytest.raises(ValueError):
            nlp.eval_constraints(prob, np.zeros(3))


class TestDerivatives:
    def fd_jacobian(self, block, x, h=1e-6):
        out = np.zeros((block.n_rows, x.size))
        for i in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            out[:, i] = (block.value(xp) - block.value(xm)) / (2 * h)
        return out

    def test_jacobian_matches_central_differences(self, case):
        prob = build_problem(case, ScenarioSpec(5), 0)
        rng = np.random.default_rng(11)
        for _ in range(5):
            x = random_x(prob, rng)
            for block in (prob.eq, prob.ineq):
                j_an = block.jacobian(x).toarray()
                j_fd = self.fd_jacobian(block, x)
                scale = max(1.0, np.abs(j_an).max())
                assert np.abs(j_an - j_fd).max() <= 1e-6 * scale

    def test_jacobian_direction_consistency(self, case):
        # J(x) dx must predict the residual change to second order exactly
        # (rows are quadratic, so the identity is exact up to roundoff)
        prob = build_problem(case, ScenarioSpec(5), 0)
        rng = np.random.default_rng(5)
        x = random_x(prob, rng)
        dx = 1e-6 * rng.standard_normal(x.size)
        lhs = prob.eq.value(x + dx) - prob.eq.value(x - dx)
        rhs = 2.0 * (prob.eq.jacobian(x) @ dx)
        assert np.abs(lhs - rhs).max() <= 1e-12

    def test_objective_gradient(self, case):
        prob = build_problem(case, ScenarioSpec(5), 0)
        rng = np.random.default_rng(9)
        x = random_x(prob, rng)
        val, grad = nlp.eval_objective(prob, x)
        h = 1e-6
        for i in rng.choice(x.size, 8, replace=False):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd = (nlp.eval_objective(prob, xp)[0] - nlp.eval_objective(prob, xm)[0]) / (2 * h)
            assert grad[i] == pytest.approx(fd, abs=1e-8)

    def test_constant_hessian_property(self, case):
        # second differences of every row are independent of the base point
        prob = build_problem(case, ScenarioSpec(5), 0)
        rng = np.random.default_rng(13)
        d = rng.standard_normal(prob.n_vars)
        x1 = random_x(prob, rng)
        x2 = random_x(prob, rng)

        def second_difference(x):
            return prob.eq.value(x + d) - 2.0 * prob.eq.value(x) + prob.eq.value(x - d)

        np.testing.assert_allclose(second_difference(x1), second_difference(x2), atol=1e-9)


class TestObjectives:
    def test_active_export_counts_generation(self, case):
        prob = build_problem(case, ScenarioSpec(5), 0)
        x = nlp.initial_point(prob)
        x[prob.layout.pg(0)] = 0.5
        val, _ = nlp.eval_objective(prob, x)
        assert val == pytest.approx(0.5)

    def test_reactive_margin_counts_aux(self, case):
        prob = build_problem(case, ScenarioSpec(5, Objective.REACTIVE_MARGIN), 0)
        x = nlp.initial_point(prob)
        lay = prob.layout
        x[lay.qplus(0)] = 0.3
        x[lay.qminus(0)] = 0.3
        x[lay.qaux(0)] = 0.3
        val, _ = nlp.eval_objective(prob, x)
        assert val == pytest.approx(0.3)
        # the aux coupling rows hold with equality at this point
        rows = prob.ineq.value(x)
        for k, lbl in enumerate(prob.ineq.labels):
            if lbl.startswith("qaux"):
                assert rows[k] == pytest.approx(0.0, abs=1e-15)


class TestOptionsAndFixing:
    def test_fix_q_zero(self, case):
        prob = build_custom(case, {LimitKind.VOLTAGE}, Objective.ACTIVE_EXPORT, 0, fix_q_zero=True)
        assert prob.lb[prob.layout.qg(0)] == prob.ub[prob.layout.qg(0)] == 0.0

    def test_fixed_p(self, case):
        fixed = np.array([0.123])
        prob = build_custom(
            case, {LimitKind.VOLTAGE}, Objective.REACTIVE_MARGIN, 0, fixed_p=fixed
        )
        assert prob.lb[prob.layout.pg(0)] == prob.ub[prob.layout.pg(0)] == pytest.approx(0.123)

    def test_q_rating_bound(self, case):
        prob = build_custom(
            case, {LimitKind.VOLTAGE}, Objective.ACTIVE_EXPORT, 0, bound_q_by_rating=True
        )
        qmax = case.generators[0].q_abs_max
        assert prob.lb[prob.layout.qg(0)] == pytest.approx(-qmax)
        assert prob.ub[prob.layout.qg(0)] == pytest.approx(qmax)


class TestSeparability:
    def test_problem_depends_only_on_its_period(self):
        base = two_bus_case(horizon=4)
        # perturb the load at period 1; the period-0 problem must be identical
        loads = (
            nm.Load(
                "d1",
                "h1",
                ("b",),
                p=base.loads[0].p.copy() + np.array([[0.0, 5.0, 0.0, 0.0]]),
                q=base.loads[0].q.copy(),
            ),
        )
        import dataclasses

        other = dataclasses.replace(base, loads=loads)
        p0a = build_problem(base, ScenarioSpec(5), 0)
        p0b = build_problem(other, ScenarioSpec(5), 0)
        np.testing.assert_array_equal(p0a.eq.c0, p0b.eq.c0)
        p1a = build_problem(base, ScenarioSpec(5), 1)
        p1b = build_problem(other, ScenarioSpec(5), 1)
        # the case is already per-unit, so the perturbation lands unscaled
        assert np.abs(p1a.eq.c0 - p1b.eq.c0).max() == pytest.approx(5.0)
