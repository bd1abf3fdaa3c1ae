"""Scenario-dependent nonconvex program over rectangular voltages/currents.

Variables, equality physics, scenario-selected inequality limits and the
objective are assembled into a purely quadratic description: every row is
0.5 x'Ax + b'x + c with a constant A, so first derivatives are affine and
second derivatives never change between iterations.  The solver consumes
this structure directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .netmodel import NetworkCase, PHASES, TreeIndex, slack_reference
from .phasecalc import LimitKind, PhasorState, _HALF_SQRT3


class Objective(str, Enum):
    ACTIVE_EXPORT = "active_export"
    REACTIVE_MARGIN = "reactive_margin"


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: int
    objective: Objective = Objective.ACTIVE_EXPORT

    def __post_init__(self) -> None:
        if self.scenario not in (1, 2, 3, 4, 5):
            raise ValueError(f"unknown scenario {self.scenario}")


_SCENARIO_LIMITS: dict[int, frozenset[LimitKind]] = {
    1: frozenset(),
    2: frozenset({LimitKind.VOLTAGE, LimitKind.VUF}),
    3: frozenset({LimitKind.VOLTAGE, LimitKind.CURRENT}),
    4: frozenset({LimitKind.CURRENT, LimitKind.VUF}),
    5: frozenset({LimitKind.VOLTAGE, LimitKind.CURRENT, LimitKind.VUF}),
}


def constraint_set_for(spec: ScenarioSpec) -> frozenset[LimitKind]:
    return _SCENARIO_LIMITS[spec.scenario]


# ---------------------------------------------------------------------------
# Quadratic row storage
# ---------------------------------------------------------------------------

class QuadBlock:
    """Rows of the form 0.5 x'A_k x + b_k'x + c_k with constant A_k.

    Quadratic coefficients are stored as (row, i, j, v) triplets of the full
    symmetric matrices, linear ones as (row, i, v) triplets.
    """

    def __init__(self, n_vars: int):
        self.n_vars = n_vars
        self.labels: list[str] = []
        self._qk: list[int] = []
        self._qi: list[int] = []
        self._qj: list[int] = []
        self._qv: list[float] = []
        self._lk: list[int] = []
        self._li: list[int] = []
        self._lv: list[float] = []
        self._c0: list[float] = []
        self._sealed = False

    # -- construction ------------------------------------------------------
    def new_row(self, label: str, const: float = 0.0) -> int:
        self.labels.append(label)
        self._c0.append(const)
        return len(self._c0) - 1

    def lin(self, k: int, i: int, v: float) -> None:
        self._lk.append(k)
        self._li.append(i)
        self._lv.append(v)

    def quad(self, k: int, i: int, j: int, coeff: float) -> None:
        """Add coeff * x_i * x_j to row k."""
        if i == j:
            self._qk.append(k)
            self._qi.append(i)
            self._qj.append(i)
            self._qv.append(2.0 * coeff)
        else:
            self._qk.extend((k, k))
            self._qi.extend((i, j))
            self._qj.extend((j, i))
            self._qv.extend((coeff, coeff))

    def sym_matrix(self, k: int, idx: np.ndarray, m: np.ndarray) -> None:
        """Add x[idx]' M x[idx] to row k (M symmetric)."""
        d = len(idx)
        for a in range(d):
            for b in range(d):
                if m[a, b] != 0.0:
                    self._qk.append(k)
                    self._qi.append(int(idx[a]))
                    self._qj.append(int(idx[b]))
                    self._qv.append(2.0 * m[a, b])

    def seal(self) -> None:
        self.qk = np.asarray(self._qk, dtype=np.intp)
        self.qi = np.asarray(self._qi, dtype=np.intp)
        self.qj = np.asarray(self._qj, dtype=np.intp)
        self.qv = np.asarray(self._qv, dtype=float)
        self.lk = np.asarray(self._lk, dtype=np.intp)
        self.li = np.asarray(self._li, dtype=np.intp)
        self.lv = np.asarray(self._lv, dtype=float)
        self.c0 = np.asarray(self._c0, dtype=float)
        self._sealed = True

    @property
    def n_rows(self) -> int:
        return len(self.c0) if self._sealed else len(self._c0)

    # -- evaluation --------------------------------------------------------
    def value(self, x: np.ndarray) -> np.ndarray:
        out = self.c0.copy()
        if self.lk.size:
            out += np.bincount(self.lk, weights=self.lv * x[self.li], minlength=self.n_rows)
        if self.qk.size:
            out += 0.5 * np.bincount(self.qk, weights=self.qv * x[self.qi] * x[self.qj], minlength=self.n_rows)
        return out

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        rows = np.concatenate([self.lk, self.qk])
        cols = np.concatenate([self.li, self.qi])
        data = np.concatenate([self.lv, self.qv * x[self.qj]])
        return sp.coo_matrix((data, (rows, cols)), shape=(self.n_rows, self.n_vars)).tocsr()

    def weighted_hessian_triplets(self, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """COO triplets of sum_k lam_k A_k."""
        if not self.qk.size:
            z = np.zeros(0)
            return z.astype(np.intp), z.astype(np.intp), z
        return self.qi, self.qj, lam[self.qk] * self.qv


def concat_blocks(n_vars: int, blocks: list[QuadBlock]) -> QuadBlock:
    out = QuadBlock(n_vars)
    offset = 0
    for blk in blocks:
        out.labels.extend(blk.labels)
        out._c0.extend(blk.c0.tolist())
        out._qk.extend((blk.qk + offset).tolist())
        out._qi.extend(blk.qi.tolist())
        out._qj.extend(blk.qj.tolist())
        out._qv.extend(blk.qv.tolist())
        out._lk.extend((blk.lk + offset).tolist())
        out._li.extend(blk.li.tolist())
        out._lv.extend(blk.lv.tolist())
        offset += blk.n_rows
    out.seal()
    return out


# ---------------------------------------------------------------------------
# Variable layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarLayout:
    """Index map from network coordinates to positions in the vector x."""

    n_bus: int
    n_branch: int
    load_entries: tuple[tuple[int, int], ...]  # (load, phase)
    gen_entries: tuple[tuple[int, int], ...]   # (generator, phase)
    with_reactive_split: bool
    n_vars: int = field(init=False)

    def __post_init__(self) -> None:
        n = self.off_qaux + len(self.gen_entries) if self.with_reactive_split else self.off_qg + len(self.gen_entries)
        object.__setattr__(self, "n_vars", n)

    # Block offsets (computed, not stored):
    @property
    def off_u_re(self) -> int:
        return 0

    @property
    def off_u_im(self) -> int:
        return 3 * self.n_bus

    @property
    def off_ib_re(self) -> int:
        return 6 * self.n_bus

    @property
    def off_ib_im(self) -> int:
        return 6 * self.n_bus + 3 * self.n_branch

    @property
    def off_il_re(self) -> int:
        return 6 * self.n_bus + 6 * self.n_branch

    @property
    def off_il_im(self) -> int:
        return self.off_il_re + len(self.load_entries)

    @property
    def off_ig_re(self) -> int:
        return self.off_il_im + len(self.load_entries)

    @property
    def off_ig_im(self) -> int:
        return self.off_ig_re + len(self.gen_entries)

    @property
    def off_pg(self) -> int:
        return self.off_ig_im + len(self.gen_entries)

    @property
    def off_qg(self) -> int:
        return self.off_pg + len(self.gen_entries)

    @property
    def off_qplus(self) -> int:
        return self.off_qg + len(self.gen_entries)

    @property
    def off_qminus(self) -> int:
        return self.off_qplus + len(self.gen_entries)

    @property
    def off_qaux(self) -> int:
        return self.off_qminus + len(self.gen_entries)

    # Individual variables:
    def u_re(self, bus: int, ph: int) -> int:
        return self.off_u_re + 3 * bus + ph

    def u_im(self, bus: int, ph: int) -> int:
        return self.off_u_im + 3 * bus + ph

    def ib_re(self, branch: int, ph: int) -> int:
        return self.off_ib_re + 3 * branch + ph

    def ib_im(self, branch: int, ph: int) -> int:
        return self.off_ib_im + 3 * branch + ph

    def il_re(self, entry: int) -> int:
        return self.off_il_re + entry

    def il_im(self, entry: int) -> int:
        return self.off_il_im + entry

    def ig_re(self, entry: int) -> int:
        return self.off_ig_re + entry

    def ig_im(self, entry: int) -> int:
        return self.off_ig_im + entry

    def pg(self, entry: int) -> int:
        return self.off_pg + entry

    def qg(self, entry: int) -> int:
        return self.off_qg + entry

    def qplus(self, entry: int) -> int:
        return self.off_qplus + entry

    def qminus(self, entry: int) -> int:
        return self.off_qminus + entry

    def qaux(self, entry: int) -> int:
        return self.off_qaux + entry


@dataclass(frozen=True)
class NlpProblem:
    """One period's program: maximize obj_coef . x subject to eq = 0, ineq <= 0, lb <= x <= ub."""

    case: NetworkCase
    spec: ScenarioSpec | None
    period: int
    constraint_set: frozenset[LimitKind]
    layout: VarLayout
    eq: QuadBlock
    ineq: QuadBlock
    lb: np.ndarray
    ub: np.ndarray
    obj_coef: np.ndarray

    @property
    def n_vars(self) -> int:
        return self.layout.n_vars


def build_problem(case: NetworkCase, spec: ScenarioSpec, period: int, **kwargs) -> NlpProblem:
    """Assemble the program for one scenario and one period.

    Scenario 1 applies only the grid-code caps (as variable bounds); the
    other scenarios select their technical-limit subsets.  Keyword options
    are forwarded to build_custom.
    """
    return build_custom(
        case,
        constraint_set_for(spec),
        spec.objective,
        period,
        apply_caps=(spec.scenario == 1),
        spec=spec,
        **kwargs,
    )


def build_custom(
    case: NetworkCase,
    constraints: frozenset[LimitKind] | set[LimitKind],
    objective: Objective,
    period: int,
    *,
    apply_caps: bool = False,
    fix_q_zero: bool = False,
    bound_q_by_rating: bool = False,
    fixed_p: np.ndarray | None = None,
    spec: ScenarioSpec | None = None,
) -> NlpProblem:
    """Assemble a program for an arbitrary technical-constraint subset.

    fixed_p pins each generator-phase active power (used by the two-stage
    reactive-margin pipeline); fix_q_zero disables reactive support, and
    bound_q_by_rating boxes Q by the per-phase device rating.
    """
    if not case.in_per_unit:
        raise ValueError("case must be in per-unit")
    if not 0 <= period < case.horizon:
        raise ValueError(f"period {period} outside horizon {case.horizon}")
    objective = Objective(objective)
    constraints = frozenset(constraints)

    layout = VarLayout(
        n_bus=len(case.buses),
        n_branch=len(case.branches),
        load_entries=tuple(case.load_entries()),
        gen_entries=tuple(case.gen_entries()),
        with_reactive_split=(objective is Objective.REACTIVE_MARGIN),
    )

    eq = _equality_block(case, layout, period)
    ineq = _inequality_block(case, layout, constraints)
    lb, ub = _bounds(
        case,
        layout,
        apply_caps=apply_caps,
        fix_q_zero=fix_q_zero,
        bound_q_by_rating=bound_q_by_rating,
        fixed_p=fixed_p,
    )

    obj = np.zeros(layout.n_vars)
    if objective is Objective.ACTIVE_EXPORT:
        for e in range(len(layout.gen_entries)):
            obj[layout.pg(e)] = 1.0
    else:
        for e in range(len(layout.gen_entries)):
            obj[layout.qaux(e)] = 1.0

    return NlpProblem(
        case=case,
        spec=spec,
        period=period,
        constraint_set=constraints,
        layout=layout,
        eq=eq,
        ineq=ineq,
        lb=lb,
        ub=ub,
        obj_coef=obj,
    )


def _equality_block(case: NetworkCase, layout: VarLayout, period: int) -> QuadBlock:
    eq = QuadBlock(layout.n_vars)

    # Branch voltage-drop laws, real and imaginary rows per phase.
    for l, br in enumerate(case.branches):
        i = case.bus_pos[br.from_bus]
        j = case.bus_pos[br.to_bus]
        for p in range(3):
            k = eq.new_row(f"vdrop_re[{br.id},{PHASES[p]}]")
            eq.lin(k, layout.u_re(j, p), 1.0)
            eq.lin(k, layout.u_re(i, p), -1.0)
            for q in range(3):
                if br.r[p, q] != 0.0:
                    eq.lin(k, layout.ib_re(l, q), br.r[p, q])
                if br.x[p, q] != 0.0:
                    eq.lin(k, layout.ib_im(l, q), -br.x[p, q])
        for p in range(3):
            k = eq.new_row(f"vdrop_im[{br.id},{PHASES[p]}]")
            eq.lin(k, layout.u_im(j, p), 1.0)
            eq.lin(k, layout.u_im(i, p), -1.0)
            for q in range(3):
                if br.r[p, q] != 0.0:
                    eq.lin(k, layout.ib_im(l, q), br.r[p, q])
                if br.x[p, q] != 0.0:
                    eq.lin(k, layout.ib_re(l, q), br.x[p, q])

    # Power definition of each fixed load phase: U x conj(I) = P + jQ.
    for e, (d, p) in enumerate(layout.load_entries):
        ld = case.loads[d]
        n = case.bus_pos[ld.bus]
        row = ld.phases.index(PHASES[p])
        k = eq.new_row(f"load_p[{ld.id},{PHASES[p]}]", const=-float(ld.p[row, period]))
        eq.quad(k, layout.u_re(n, p), layout.il_re(e), 1.0)
        eq.quad(k, layout.u_im(n, p), layout.il_im(e), 1.0)
        k = eq.new_row(f"load_q[{ld.id},{PHASES[p]}]", const=-float(ld.q[row, period]))
        eq.quad(k, layout.u_im(n, p), layout.il_re(e), 1.0)
        eq.quad(k, layout.u_re(n, p), layout.il_im(e), -1.0)

    # Power definition of each generator phase (P, Q are variables).
    for e, (g, p) in enumerate(layout.gen_entries):
        gen = case.generators[g]
        n = case.bus_pos[gen.bus]
        k = eq.new_row(f"gen_p[{gen.id},{PHASES[p]}]")
        eq.quad(k, layout.u_re(n, p), layout.ig_re(e), 1.0)
        eq.quad(k, layout.u_im(n, p), layout.ig_im(e), 1.0)
        eq.lin(k, layout.pg(e), -1.0)
        k = eq.new_row(f"gen_q[{gen.id},{PHASES[p]}]")
        eq.quad(k, layout.u_im(n, p), layout.ig_re(e), 1.0)
        eq.quad(k, layout.u_re(n, p), layout.ig_im(e), -1.0)
        eq.lin(k, layout.qg(e), -1.0)

    # Nodal current balance at every non-slack bus:
    # demand - generation - inflow + outflow = 0.
    for n, bus in enumerate(case.buses):
        if n == case.slack:
            continue
        for p in range(3):
            for part, il_of, ig_of, ib_of in (
                ("re", layout.il_re, layout.ig_re, layout.ib_re),
                ("im", layout.il_im, layout.ig_im, layout.ib_im),
            ):
                k = eq.new_row(f"kcl_{part}[{bus.id},{PHASES[p]}]")
                for e, (d, ph) in enumerate(layout.load_entries):
                    if ph == p and case.bus_pos[case.loads[d].bus] == n:
                        eq.lin(k, il_of(e), 1.0)
                for e, (g, ph) in enumerate(layout.gen_entries):
                    if ph == p and case.bus_pos[case.generators[g].bus] == n:
                        eq.lin(k, ig_of(e), -1.0)
                for l, br in enumerate(case.branches):
                    if case.bus_pos[br.to_bus] == n:
                        eq.lin(k, ib_of(l, p), -1.0)
                    if case.bus_pos[br.from_bus] == n:
                        eq.lin(k, ib_of(l, p), 1.0)

    # Reactive import/export split for the margin objective.
    if layout.with_reactive_split:
        for e, (g, p) in enumerate(layout.gen_entries):
            gen = case.generators[g]
            k = eq.new_row(f"qsplit[{gen.id},{PHASES[p]}]")
            eq.lin(k, layout.qg(e), 1.0)
            eq.lin(k, layout.qplus(e), -1.0)
            eq.lin(k, layout.qminus(e), 1.0)

    eq.seal()
    return eq


def _inequality_block(case: NetworkCase, layout: VarLayout, constraints: frozenset[LimitKind]) -> QuadBlock:
    ineq = QuadBlock(layout.n_vars)
    h = _HALF_SQRT3

    if LimitKind.CURRENT in constraints:
        for l, br in enumerate(case.branches):
            for p in range(3):
                k = ineq.new_row(f"imax[{br.id},{PHASES[p]}]", const=-br.i_max**2)
                ineq.quad(k, layout.ib_re(l, p), layout.ib_re(l, p), 1.0)
                ineq.quad(k, layout.ib_im(l, p), layout.ib_im(l, p), 1.0)

    if LimitKind.VOLTAGE in constraints:
        for n, bus in enumerate(case.buses):
            if n == case.slack:
                continue  # held at the reference by bounds
            for p in range(3):
                k = ineq.new_row(f"vmax[{bus.id},{PHASES[p]}]", const=-bus.vmax**2)
                ineq.quad(k, layout.u_re(n, p), layout.u_re(n, p), 1.0)
                ineq.quad(k, layout.u_im(n, p), layout.u_im(n, p), 1.0)
                k = ineq.new_row(f"vmin[{bus.id},{PHASES[p]}]", const=bus.vmin**2)
                ineq.quad(k, layout.u_re(n, p), layout.u_re(n, p), -1.0)
                ineq.quad(k, layout.u_im(n, p), layout.u_im(n, p), -1.0)

    if LimitKind.VUF in constraints:
        # Squared negative-sequence magnitude bounded by (vuf_max^2) times the
        # squared positive-sequence magnitude; both as quadratic forms over
        # (re_a, re_b, re_c, im_a, im_b, im_c).
        w2_re = np.array([1.0, -0.5, -0.5, 0.0, h, -h])
        w2_im = np.array([0.0, -h, h, 1.0, -0.5, -0.5])
        w1_re = np.array([1.0, -0.5, -0.5, 0.0, -h, h])
        w1_im = np.array([0.0, h, -h, 1.0, -0.5, -0.5])
        for n, bus in enumerate(case.buses):
            if n == case.slack:
                continue
            gamma = bus.vuf_max**2
            m = (
                np.outer(w2_re, w2_re)
                + np.outer(w2_im, w2_im)
                - gamma * (np.outer(w1_re, w1_re) + np.outer(w1_im, w1_im))
            )
            idx = np.array(
                [layout.u_re(n, 0), layout.u_re(n, 1), layout.u_re(n, 2),
                 layout.u_im(n, 0), layout.u_im(n, 1), layout.u_im(n, 2)]
            )
            k = ineq.new_row(f"vuf[{bus.id}]")
            ineq.sym_matrix(k, idx, m)

    # Margin auxiliaries: q_aux bounded by both directions of the split.
    if layout.with_reactive_split:
        for e, (g, p) in enumerate(layout.gen_entries):
            gen = case.generators[g]
            k = ineq.new_row(f"qaux_plus[{gen.id},{PHASES[p]}]")
            ineq.lin(k, layout.qaux(e), 1.0)
            ineq.lin(k, layout.qplus(e), -1.0)
            k = ineq.new_row(f"qaux_minus[{gen.id},{PHASES[p]}]")
            ineq.lin(k, layout.qaux(e), 1.0)
            ineq.lin(k, layout.qminus(e), -1.0)

    ineq.seal()
    return ineq


def _bounds(
    case: NetworkCase,
    layout: VarLayout,
    *,
    apply_caps: bool,
    fix_q_zero: bool,
    bound_q_by_rating: bool,
    fixed_p: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    lb = np.full(layout.n_vars, -np.inf)
    ub = np.full(layout.n_vars, np.inf)

    ref = slack_reference(case)
    for p in range(3):
        lb[layout.u_re(case.slack, p)] = ub[layout.u_re(case.slack, p)] = ref[p].real
        lb[layout.u_im(case.slack, p)] = ub[layout.u_im(case.slack, p)] = ref[p].imag

    for e, (g, _p) in enumerate(layout.gen_entries):
        gen = case.generators[g]
        lb[layout.pg(e)] = 0.0
        if apply_caps:
            ub[layout.pg(e)] = gen.p_cap
        if fixed_p is not None:
            lb[layout.pg(e)] = ub[layout.pg(e)] = fixed_p[e]
        # Static caps assume unity power factor, so scenario 1 pins Q at zero
        # unless the reactive split is what is being optimized.
        if fix_q_zero or (apply_caps and not layout.with_reactive_split):
            lb[layout.qg(e)] = ub[layout.qg(e)] = 0.0
        elif bound_q_by_rating:
            lb[layout.qg(e)] = -gen.q_abs_max
            ub[layout.qg(e)] = gen.q_abs_max
        if layout.with_reactive_split:
            lb[layout.qplus(e)] = 0.0
            ub[layout.qplus(e)] = gen.q_abs_max
            lb[layout.qminus(e)] = 0.0
            ub[layout.qminus(e)] = gen.q_abs_max
            lb[layout.qaux(e)] = 0.0

    return lb, ub


# ---------------------------------------------------------------------------
# Evaluation and decoding
# ---------------------------------------------------------------------------

def eval_constraints(problem: NlpProblem, x: np.ndarray) -> np.ndarray:
    """Equality residuals followed by inequality values (<= 0 when satisfied)."""
    if x.shape != (problem.n_vars,):
        raise ValueError(f"x has shape {x.shape}, expected ({problem.n_vars},)")
    return np.concatenate([problem.eq.value(x), problem.ineq.value(x)])


def eval_objective(problem: NlpProblem, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Objective (maximization sense) and its exact gradient."""
    return float(problem.obj_coef @ x), problem.obj_coef.copy()


def decode_state(problem: NlpProblem, x: np.ndarray) -> PhasorState:
    """Unpack a solution vector into a single-period phasor state."""
    lay = problem.layout
    case = problem.case
    u = np.zeros((lay.n_bus, 3, 1), dtype=complex)
    for n in range(lay.n_bus):
        for p in range(3):
            u[n, p, 0] = x[lay.u_re(n, p)] + 1j * x[lay.u_im(n, p)]
    i_branch = np.zeros((lay.n_branch, 3, 1), dtype=complex)
    for l in range(lay.n_branch):
        for p in range(3):
            i_branch[l, p, 0] = x[lay.ib_re(l, p)] + 1j * x[lay.ib_im(l, p)]
    i_load = np.zeros((len(case.loads), 3, 1), dtype=complex)
    for e, (d, p) in enumerate(lay.load_entries):
        i_load[d, p, 0] = x[lay.il_re(e)] + 1j * x[lay.il_im(e)]
    i_gen = np.zeros((len(case.generators), 3, 1), dtype=complex)
    for e, (g, p) in enumerate(lay.gen_entries):
        i_gen[g, p, 0] = x[lay.ig_re(e)] + 1j * x[lay.ig_im(e)]
    return PhasorState(case=case, u=u, i_branch=i_branch, i_load=i_load, i_gen=i_gen)


def decode_generation(problem: NlpProblem, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-generator (n_gen, 3) active/reactive outputs from a solution."""
    lay = problem.layout
    pg = np.zeros((len(problem.case.generators), 3))
    qg = np.zeros_like(pg)
    for e, (g, p) in enumerate(lay.gen_entries):
        pg[g, p] = x[lay.pg(e)]
        qg[g, p] = x[lay.qg(e)]
    return pg, qg


def encode_state(problem: NlpProblem, state: PhasorState, state_period: int = 0) -> np.ndarray:
    """Pack a phasor state (plus implied generation) into a vector for tests."""
    lay = problem.layout
    case = problem.case
    x = np.zeros(lay.n_vars)
    for n in range(lay.n_bus):
        for p in range(3):
            x[lay.u_re(n, p)] = state.u[n, p, state_period].real
            x[lay.u_im(n, p)] = state.u[n, p, state_period].imag
    for l in range(lay.n_branch):
        for p in range(3):
            x[lay.ib_re(l, p)] = state.i_branch[l, p, state_period].real
            x[lay.ib_im(l, p)] = state.i_branch[l, p, state_period].imag
    for e, (d, p) in enumerate(lay.load_entries):
        x[lay.il_re(e)] = state.i_load[d, p, state_period].real
        x[lay.il_im(e)] = state.i_load[d, p, state_period].imag
    for e, (g, p) in enumerate(lay.gen_entries):
        cur = state.i_gen[g, p, state_period]
        x[lay.ig_re(e)] = cur.real
        x[lay.ig_im(e)] = cur.imag
        n = case.bus_pos[case.generators[g].bus]
        s = state.u[n, p, state_period] * np.conj(cur)
        x[lay.pg(e)] = s.real
        x[lay.qg(e)] = s.imag
        if lay.with_reactive_split:
            x[lay.qplus(e)] = max(s.imag, 0.0)
            x[lay.qminus(e)] = max(-s.imag, 0.0)
    return x


def initial_point(problem: NlpProblem, voltage_scale: float = 1.0) -> np.ndarray:
    """Flat start: balanced voltages, load currents from one backward sweep.

    Element currents are evaluated at the flat voltage and accumulated down
    the tree, which satisfies nodal balance exactly at the start; fixed
    variables sit at their pinned values.  voltage_scale shifts the initial
    magnitude away from nominal, giving a deterministic family of starting
    points for multi-start polishing.
    """
    lay = problem.layout
    case = problem.case
    x = np.zeros(lay.n_vars)
    ref = slack_reference(case, vm=voltage_scale)
    for n in range(lay.n_bus):
        for p in range(3):
            x[lay.u_re(n, p)] = ref[p].real
            x[lay.u_im(n, p)] = ref[p].imag

    i_net = np.zeros((lay.n_bus, 3), dtype=complex)
    for e, (d, p) in enumerate(lay.load_entries):
        ld = case.loads[d]
        row = ld.phases.index(PHASES[p])
        s = complex(ld.p[row, problem.period], ld.q[row, problem.period])
        cur = np.conj(s / ref[p])
        x[lay.il_re(e)] = cur.real
        x[lay.il_im(e)] = cur.imag
        i_net[case.bus_pos[ld.bus], p] += cur

    # Generation pinned by bounds (two-stage runs) joins the sweep too.
    for e, (g, p) in enumerate(lay.gen_entries):
        lo, hi = problem.lb[lay.pg(e)], problem.ub[lay.pg(e)]
        if lo == hi and lo != 0.0:
            cur = np.conj(complex(lo, 0.0) / ref[p])
            x[lay.ig_re(e)] = cur.real
            x[lay.ig_im(e)] = cur.imag
            i_net[case.bus_pos[case.generators[g].bus], p] -= cur

    tree = TreeIndex(case)
    for l in range(lay.n_branch):
        cur = tree.down_sign[l] * i_net[tree.subtree[l]].sum(axis=0)
        for p in range(3):
            x[lay.ib_re(l, p)] = cur[p].real
            x[lay.ib_im(l, p)] = cur[p].imag

    fixed = problem.lb == problem.ub
    x[fixed] = problem.lb[fixed]
    return x
