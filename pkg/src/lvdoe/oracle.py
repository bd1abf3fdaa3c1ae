"""Independent verification path for optimization results.

A fixed-injection Newton power flow over the same current-voltage physics,
plus a one-dimensional bisection search for the largest feasible export.
This code shares no assembly machinery with the optimization model; it is
the ground truth the model is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .netmodel import NetworkCase, PHASE_INDEX, TreeIndex
from . import phasecalc
from .phasecalc import LimitKind, PhasorState, Violation, check_limits


class PowerFlowDivergedError(RuntimeError):
    """Newton iteration failed; injections are outside the solvable range."""


class InfeasibleAtZeroExportError(RuntimeError):
    """The network violates limits even with the target generator off."""


@dataclass(frozen=True)
class InjectionSet:
    """Fixed (P, Q) per element, phase and period, in per-unit."""

    p_load: np.ndarray  # (n_load, 3, T)
    q_load: np.ndarray
    p_gen: np.ndarray   # (n_gen, 3, T)
    q_gen: np.ndarray

    @classmethod
    def from_case(cls, case: NetworkCase) -> "InjectionSet":
        """Loads at their profiles, generators silent."""
        T = case.horizon
        p_load = np.zeros((len(case.loads), 3, T))
        q_load = np.zeros_like(p_load)
        for d, ld in enumerate(case.loads):
            for k, ph in enumerate(ld.phases):
                p_load[d, PHASE_INDEX[ph], :] = ld.p[k]
                q_load[d, PHASE_INDEX[ph], :] = ld.q[k]
        n_g = len(case.generators)
        return cls(p_load, q_load, np.zeros((n_g, 3, T)), np.zeros((n_g, 3, T)))

    def with_generator(self, case: NetworkCase, gen_id: str, p: float, q: float, period: int) -> "InjectionSet":
        g = next(i for i, gen in enumerate(case.generators) if gen.id == gen_id)
        p_gen = self.p_gen.copy()
        q_gen = self.q_gen.copy()
        for ph in case.generators[g].phases:
            p_gen[g, PHASE_INDEX[ph], period] = p
            q_gen[g, PHASE_INDEX[ph], period] = q
        return replace(self, p_gen=p_gen, q_gen=q_gen)


def _net_injection(case: NetworkCase, inj: InjectionSet, period: int) -> np.ndarray:
    """Net complex power drawn per bus and phase: demand minus generation."""
    s_net = np.zeros((len(case.buses), 3), dtype=complex)
    for d, ld in enumerate(case.loads):
        s_net[case.bus_pos[ld.bus], :] += inj.p_load[d, :, period] + 1j * inj.q_load[d, :, period]
    for g, gen in enumerate(case.generators):
        s_net[case.bus_pos[gen.bus], :] -= inj.p_gen[g, :, period] + 1j * inj.q_gen[g, :, period]
    return s_net


def solve_pf(
    case: NetworkCase,
    injections: InjectionSet,
    period: int,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> PhasorState:
    """Newton power flow at fixed injections; returns a single-period state.

    Unknowns are the rectangular non-slack voltages.  Branch currents are
    recovered from the injection currents by accumulation down the tree, so
    nodal balance holds exactly by construction and the residual being
    driven to zero is the branch voltage-drop law.
    """
    tree = TreeIndex(case)
    n = len(case.buses)
    nb = [b for b in range(n) if b != case.slack]
    col = {b: k for k, b in enumerate(nb)}
    s_net = _net_injection(case, injections, period)

    u = np.tile(phasecalc.slack_reference(case)[None, :], (n, 1)).astype(complex)

    def injection_currents(volt: np.ndarray) -> np.ndarray:
        if np.any(np.abs(volt) < 1e-3):
            raise PowerFlowDivergedError("voltage collapsed during Newton iteration")
        return np.conj(s_net / volt)

    def branch_currents(i_net: np.ndarray) -> np.ndarray:
        i_br = np.zeros((len(case.branches), 3), dtype=complex)
        for l in range(len(case.branches)):
            i_br[l] = tree.down_sign[l] * i_net[tree.subtree[l]].sum(axis=0)
        return i_br

    for _ in range(max_iter):
        i_net = injection_currents(u)
        i_br = branch_currents(i_net)
        res = np.zeros(6 * len(nb))
        for l, br in enumerate(case.branches):
            fi, ti = case.bus_pos[br.from_bus], case.bus_pos[br.to_bus]
            r = u[ti] - u[fi] + br.z @ i_br[l]
            res[6 * l : 6 * l + 3] = r.real
            res[6 * l + 3 : 6 * l + 6] = r.imag
        if np.abs(res).max() <= tol:
            break

        jac = np.zeros((6 * len(nb), 6 * len(nb)))
        # Voltage-difference terms.
        for l, br in enumerate(case.branches):
            for end, sgn in ((case.bus_pos[br.to_bus], 1.0), (case.bus_pos[br.from_bus], -1.0)):
                if end == case.slack:
                    continue
                k = col[end]
                for p in range(3):
                    jac[6 * l + p, 6 * k + p] += sgn
                    jac[6 * l + 3 + p, 6 * k + 3 + p] += sgn
        # Impedance-drop terms through the injection currents.
        dnet = _injection_current_jacobian(s_net, u)
        for l, br in enumerate(case.branches):
            for m in tree.subtree[l]:
                if m == case.slack:
                    continue
                k = col[m]
                for p in range(3):
                    for q in range(3):
                        z = tree.down_sign[l] * br.z[p, q]
                        blk = np.array([[z.real, -z.imag], [z.imag, z.real]]) @ dnet[m, q]
                        jac[6 * l + p, 6 * k + q] += blk[0, 0]
                        jac[6 * l + p, 6 * k + 3 + q] += blk[0, 1]
                        jac[6 * l + 3 + p, 6 * k + q] += blk[1, 0]
                        jac[6 * l + 3 + p, 6 * k + 3 + q] += blk[1, 1]

        try:
            dv = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowDivergedError(f"singular Jacobian: {exc}") from None
        for b in nb:
            k = col[b]
            u[b] += dv[6 * k : 6 * k + 3] + 1j * dv[6 * k + 3 : 6 * k + 6]
    else:
        raise PowerFlowDivergedError(f"no convergence in {max_iter} iterations")

    i_net = injection_currents(u)
    i_br = branch_currents(i_net)
    i_load = np.zeros((len(case.loads), 3, 1), dtype=complex)
    for d, ld in enumerate(case.loads):
        s = injections.p_load[d, :, period] + 1j * injections.q_load[d, :, period]
        i_load[d, :, 0] = np.conj(s / u[case.bus_pos[ld.bus]])
    i_gen = np.zeros((len(case.generators), 3, 1), dtype=complex)
    for g, gen in enumerate(case.generators):
        s = injections.p_gen[g, :, period] + 1j * injections.q_gen[g, :, period]
        i_gen[g, :, 0] = np.conj(s / u[case.bus_pos[gen.bus]])
    return PhasorState(
        case=case,
        u=u[:, :, None],
        i_branch=i_br[:, :, None],
        i_load=i_load,
        i_gen=i_gen,
    )


def _injection_current_jacobian(s_net: np.ndarray, u: np.ndarray) -> np.ndarray:
    """d(net injection current)/d(voltage) as (n_bus, 3) blocks of 2x2 reals.

    The current of a constant-power element is conj(S/U); for U = a + jb,
    i_re = (P a + Q b)/(a^2+b^2) and i_im = (P b - Q a)/(a^2+b^2).
    """
    n = s_net.shape[0]
    out = np.zeros((n, 3, 2, 2))
    a, b = u.real, u.imag
    m2 = a * a + b * b
    p_, q_ = s_net.real, s_net.imag
    ire = (p_ * a + q_ * b) / m2
    iim = (p_ * b - q_ * a) / m2
    out[:, :, 0, 0] = p_ / m2 - 2.0 * a * ire / m2
    out[:, :, 0, 1] = q_ / m2 - 2.0 * b * ire / m2
    out[:, :, 1, 0] = -q_ / m2 - 2.0 * a * iim / m2
    out[:, :, 1, 1] = p_ / m2 - 2.0 * b * iim / m2
    return out


# ---------------------------------------------------------------------------
# Envelope search by bisection
# ---------------------------------------------------------------------------

def doe_bisection(
    case: NetworkCase,
    target_generator: str,
    constraint_set: frozenset[LimitKind] | set[LimitKind],
    period: int,
    injections: InjectionSet | None = None,
    hi: float | None = None,
    tol: float = 1e-6,
) -> float:
    """Largest feasible active export (Q = 0) of one generator, in per-unit.

    All other elements stay at the provided injections (other generators
    silent by default).  A candidate is feasible when the power flow
    converges and no selected limit is violated.  The default search
    bracket tops out at ten times the generator's grid-code cap.
    """
    gen = next(g for g in case.generators if g.id == target_generator)
    base = injections if injections is not None else InjectionSet.from_case(case)
    if hi is None:
        hi = 10.0 * gen.p_cap

    def feasible(p: float) -> bool:
        try:
            state = solve_pf(case, base.with_generator(case, target_generator, p, 0.0, period), period)
        except PowerFlowDivergedError:
            return False
        return not check_limits(state, constraint_set)

    if feasible(hi):
        return hi
    if not feasible(0.0):
        raise InfeasibleAtZeroExportError(
            f"limits violated with generator {target_generator} at zero export"
        )
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# Solution validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationReport:
    max_voltage_deviation: float
    max_kcl_residual: float
    max_voltage_drop_residual: float
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations and self.max_voltage_deviation <= 1e-6


def validate_solution(case: NetworkCase, solution, spec) -> ValidationReport:
    """Re-solve the power flow at a solution's injections and cross-check.

    The optimizer's voltages must be reproduced by the independent Newton
    solve, and the scenario's limits must hold at the optimum.
    """
    from . import nlp  # local import: nlp does not depend on this module

    problem = solution.problem
    state = nlp.decode_state(problem, solution.x)
    pg, qg = nlp.decode_generation(problem, solution.x)

    inj = InjectionSet.from_case(case)
    p_gen = inj.p_gen.copy()
    q_gen = inj.q_gen.copy()
    p_gen[:, :, problem.period] = pg
    q_gen[:, :, problem.period] = qg
    pf_state = solve_pf(case, replace(inj, p_gen=p_gen, q_gen=q_gen), problem.period)

    dev = float(np.abs(state.u[:, :, 0] - pf_state.u[:, :, 0]).max())
    cs = problem.constraint_set if spec is None else nlp.constraint_set_for(spec)
    violations = tuple(check_limits(state, cs, tol=1e-6)) if cs else ()
    return ValidationReport(
        max_voltage_deviation=dev,
        max_kcl_residual=phasecalc.max_kcl_residual(state),
        max_voltage_drop_residual=phasecalc.max_voltage_drop_residual(state),
        violations=violations,
    )
