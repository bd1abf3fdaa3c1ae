"""Pure evaluation of electrical quantities and constraint residuals.

Everything here is stateless algebra on a PhasorState: branch voltage-drop
laws, rectangular power products, nodal current balance, sequence unbalance
and limit checks.  Both the optimization model and the independent power
flow are validated against these functions, so they are kept free of any
solver-specific notation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .netmodel import Branch, Generator, Load, NetworkCase, PHASES, slack_reference

_HALF_SQRT3 = math.sqrt(3.0) / 2.0
# Anything below this (relative to the phasor scale) is roundoff, not unbalance.
_SEQ_ROUNDOFF = 32.0 * np.finfo(float).eps


class DegenerateStateError(ValueError):
    """Positive-sequence voltage vanished; the unbalance factor is undefined."""


class LimitKind(str, Enum):
    VOLTAGE = "voltage"
    CURRENT = "current"
    VUF = "vuf"


ALL_LIMITS = frozenset((LimitKind.VOLTAGE, LimitKind.CURRENT, LimitKind.VUF))


@dataclass(frozen=True)
class Violation:
    kind: str  # voltage_low | voltage_high | current | vuf
    location: str  # bus or branch id
    phase: str | None
    period: int
    magnitude: float  # amount beyond the limit (pu for voltage/current, ratio for vuf)


@dataclass(frozen=True)
class PhasorState:
    """Rectangular voltages and currents for one or more periods.

    Arrays are complex and indexed [element, phase, period]; the period axis
    may cover any number of periods (a single optimization or power-flow
    result is usually one).  Element counts must match the attached case.
    """

    case: NetworkCase
    u: np.ndarray        # (n_bus, 3, T)
    i_branch: np.ndarray  # (n_branch, 3, T)
    i_load: np.ndarray    # (n_load, 3, T)
    i_gen: np.ndarray     # (n_gen, 3, T)

    def __post_init__(self) -> None:
        n_per = self.u.shape[2] if self.u.ndim == 3 else -1
        expect = {
            "u": (len(self.case.buses), 3, n_per),
            "i_branch": (len(self.case.branches), 3, n_per),
            "i_load": (len(self.case.loads), 3, n_per),
            "i_gen": (len(self.case.generators), 3, n_per),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"PhasorState.{name} has shape {arr.shape}, expected {shape}")

    @property
    def n_periods(self) -> int:
        return self.u.shape[2]

    @property
    def u_re(self) -> np.ndarray:
        return self.u.real

    @property
    def u_im(self) -> np.ndarray:
        return self.u.imag


def flat_state(case: NetworkCase, n_periods: int = 1, vm: float = 1.0) -> PhasorState:
    """Balanced nominal voltages everywhere, all currents zero."""
    ref = slack_reference(case, vm)
    u = np.tile(ref[None, :, None], (len(case.buses), 1, n_periods))
    return PhasorState(
        case=case,
        u=u,
        i_branch=np.zeros((len(case.branches), 3, n_periods), dtype=complex),
        i_load=np.zeros((len(case.loads), 3, n_periods), dtype=complex),
        i_gen=np.zeros((len(case.generators), 3, n_periods), dtype=complex),
    )


# ---------------------------------------------------------------------------
# Branch / element laws
# ---------------------------------------------------------------------------

def voltage_drop_residual(state: PhasorState, branch: int, phase: int, period: int) -> tuple[float, float]:
    """Mismatch of the series voltage-drop law on one branch phase.

    Zero iff the receiving-end voltage equals the sending-end voltage minus
    the full mutual-coupled impedance drop.
    """
    br = state.case.branches[branch]
    i = state.case.bus_pos[br.from_bus]
    j = state.case.bus_pos[br.to_bus]
    drop = br.z[phase, :] @ state.i_branch[branch, :, period]
    res = state.u[j, phase, period] - state.u[i, phase, period] + drop
    return (res.real, res.imag)


def branch_power(state: PhasorState, branch: int, phase: int, period: int) -> tuple[float, float]:
    """(P, Q) carried by a branch phase, measured at the from-bus."""
    br = state.case.branches[branch]
    i = state.case.bus_pos[br.from_bus]
    s = state.u[i, phase, period] * np.conj(state.i_branch[branch, phase, period])
    return (s.real, s.imag)


def element_power(state: PhasorState, element: Load | Generator, phase: int, period: int) -> tuple[float, float]:
    """(P, Q) of a load or generator phase using its bus voltage."""
    n = state.case.bus_pos[element.bus]
    if isinstance(element, Load):
        cur = state.i_load[state.case.loads.index(element), phase, period]
    else:
        cur = state.i_gen[state.case.generators.index(element), phase, period]
    s = state.u[n, phase, period] * np.conj(cur)
    return (s.real, s.imag)


def kcl_residual(state: PhasorState, bus: int, phase: int, period: int) -> tuple[float, float]:
    """Nodal current balance: demand minus generation minus net branch inflow.

    At the slack bus the balance is absorbed by the external grid and the
    returned value is the (unconstrained) surplus handed to it.
    """
    case = state.case
    total = 0.0 + 0.0j
    for d, ld in enumerate(case.loads):
        if ld.bus == case.buses[bus].id:
            total += state.i_load[d, phase, period]
    for g, gen in enumerate(case.generators):
        if gen.bus == case.buses[bus].id:
            total -= state.i_gen[g, phase, period]
    for l, br in enumerate(case.branches):
        if case.bus_pos[br.to_bus] == bus:
            total -= state.i_branch[l, phase, period]
        if case.bus_pos[br.from_bus] == bus:
            total += state.i_branch[l, phase, period]
    return (total.real, total.imag)


# ---------------------------------------------------------------------------
# Sequence components / unbalance
# ---------------------------------------------------------------------------

def _sequence_squares(ua: complex, ub: complex, uc: complex) -> tuple[float, float, float]:
    """Un-normalized squared negative/positive sequence magnitudes.

    The common 1/3 factor of the symmetrical-component transform is dropped
    since it cancels in the unbalance ratio.  Returns (|U2|^2, |U1|^2, scale)
    where scale is the magnitude level used for roundoff classification.
    """
    u2_re = ua.real - 0.5 * (ub.real + uc.real) + _HALF_SQRT3 * (ub.imag - uc.imag)
    u2_im = ua.imag - 0.5 * (ub.imag + uc.imag) - _HALF_SQRT3 * (ub.real - uc.real)
    u1_re = ua.real - 0.5 * (ub.real + uc.real) - _HALF_SQRT3 * (ub.imag - uc.imag)
    u1_im = ua.imag - 0.5 * (ub.imag + uc.imag) + _HALF_SQRT3 * (ub.real - uc.real)
    scale = max(abs(ua), abs(ub), abs(uc), 1e-300)
    return (u2_re * u2_re + u2_im * u2_im, u1_re * u1_re + u1_im * u1_im, scale)


def vuf_from_phasors(ua: complex, ub: complex, uc: complex) -> float:
    """Negative- over positive-sequence voltage magnitude ratio.

    A negative-sequence component below the roundoff floor of the input
    scale is reported as exactly 0 (the phasors are balanced to machine
    precision, and any nonzero ratio would be noise).
    """
    u2_sq, u1_sq, scale = _sequence_squares(ua, ub, uc)
    floor = _SEQ_ROUNDOFF * scale
    if u1_sq <= floor * floor:
        raise DegenerateStateError("undefined VUF: positive-sequence voltage is zero")
    if u2_sq <= floor * floor:
        return 0.0
    return math.sqrt(u2_sq / u1_sq)


def vuf(state: PhasorState, bus: int, period: int) -> float:
    ua, ub, uc = state.u[bus, :, period]
    return vuf_from_phasors(ua, ub, uc)


# ---------------------------------------------------------------------------
# Limit checks
# ---------------------------------------------------------------------------

def check_limits(
    state: PhasorState,
    constraint_set: frozenset[LimitKind] | set[LimitKind] = ALL_LIMITS,
    tol: float = 0.0,
) -> list[Violation]:
    """Every exceedance of the selected technical limits, largest first.

    Voltage magnitude and unbalance are checked at every bus, current at
    every branch phase, over all periods held by the state.
    """
    case = state.case
    out: list[Violation] = []
    if LimitKind.VOLTAGE in constraint_set:
        vmag = np.abs(state.u)
        for n, bus in enumerate(case.buses):
            for p in range(3):
                for t in range(state.n_periods):
                    if vmag[n, p, t] > bus.vmax + tol:
                        out.append(Violation("voltage_high", bus.id, PHASES[p], t, vmag[n, p, t] - bus.vmax))
                    elif vmag[n, p, t] < bus.vmin - tol:
                        out.append(Violation("voltage_low", bus.id, PHASES[p], t, bus.vmin - vmag[n, p, t]))
    if LimitKind.CURRENT in constraint_set:
        imag = np.abs(state.i_branch)
        for l, br in enumerate(case.branches):
            for p in range(3):
                for t in range(state.n_periods):
                    if imag[l, p, t] > br.i_max + tol:
                        out.append(Violation("current", br.id, PHASES[p], t, imag[l, p, t] - br.i_max))
    if LimitKind.VUF in constraint_set:
        for n, bus in enumerate(case.buses):
            for t in range(state.n_periods):
                ratio = vuf(state, n, t)
                if ratio > bus.vuf_max + tol:
                    out.append(Violation("vuf", bus.id, None, t, ratio - bus.vuf_max))
    out.sort(key=lambda v: -v.magnitude)
    return out


# ---------------------------------------------------------------------------
# Aggregate residuals (used to certify solver output)
# ---------------------------------------------------------------------------

def max_voltage_drop_residual(state: PhasorState) -> float:
    worst = 0.0
    for l in range(len(state.case.branches)):
        for p in range(3):
            for t in range(state.n_periods):
                re, im = voltage_drop_residual(state, l, p, t)
                worst = max(worst, abs(re), abs(im))
    return worst


def max_kcl_residual(state: PhasorState) -> float:
    """Worst nodal current mismatch over all non-slack buses."""
    worst = 0.0
    for n in range(len(state.case.buses)):
        if n == state.case.slack:
            continue
        for p in range(3):
            for t in range(state.n_periods):
                re, im = kcl_residual(state, n, p, t)
                worst = max(worst, abs(re), abs(im))
    return worst
