"""Scenario runner, result files and the command-line interface.

Runs the per-period programs for a chosen scenario/objective pair,
aggregates daily envelopes, and writes deterministic result files
(envelopes.csv, summary.json, manifest.json and an SVG export plot).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, nlp, oracle, solver
from .netmodel import InputError, NetworkCase, PHASE_INDEX, PHASES, load_network
from .phasecalc import LimitKind, check_limits
from .nlp import Objective, ScenarioSpec
from .solver import SolverOptions


class ScenarioSolveError(RuntimeError):
    def __init__(self, period: int, status: str):
        super().__init__(f"solver returned status {status!r} in period {period}")
        self.period = period
        self.status = status


# Deterministic initial-voltage ladder for multi-start polishing; the first
# N entries are used.  Nonconvex problems occasionally park a generator in a
# poor local optimum from the nominal flat start alone.
START_SCALES = (1.0, 0.9, 1.05, 0.8, 0.95)


@dataclass(frozen=True)
class EnvelopeResult:
    """Per-generator export limits for every phase and period, plus totals."""

    case: NetworkCase
    spec: ScenarioSpec
    p_kw: np.ndarray   # (n_gen, 3, T)
    q_kvar: np.ndarray
    objective_pu: np.ndarray  # (T,) optimizer objective per period
    diagnostics: tuple[dict, ...]
    stage1: "EnvelopeResult | None" = None

    @property
    def total_kwh(self) -> float:
        return float(self.p_kw.sum() * self.case.period_hours)

    @property
    def total_kvarh(self) -> float:
        return float(self.q_kvar.sum() * self.case.period_hours)

    @property
    def per_period_total_kw(self) -> np.ndarray:
        return self.p_kw.sum(axis=(0, 1))


def run_scenario(
    case: NetworkCase,
    spec: ScenarioSpec,
    options: SolverOptions | None = None,
    *,
    reactive_p: str = "two_stage",
    jobs: int = 1,
    starts: int = 2,
) -> EnvelopeResult:
    """Solve every period independently and aggregate the daily envelope.

    Scenario 1 is closed form (static caps, unity power factor).  The
    reactive-margin objective runs two stages by default: an active-export
    pass with device-limited reactive power pins each generator's P, then
    the margin program optimizes the Q split around it; reactive_p="free"
    leaves P unconstrained in a single margin pass instead.  Each period is
    solved from `starts` deterministic initial points, keeping the best.
    """
    if spec.scenario == 1:
        return _run_scenario_1(case, spec)
    if spec.objective is Objective.ACTIVE_EXPORT:
        return _run_periods(case, spec, options, jobs=jobs, starts=starts)

    if reactive_p == "two_stage":
        stage1 = _run_periods(
            case,
            ScenarioSpec(spec.scenario, Objective.ACTIVE_EXPORT),
            options,
            jobs=jobs,
            starts=starts,
            bound_q_by_rating=True,
        )
        # Back the pinned P off its stage-1 optimum by a whisker: that optimum
        # sits exactly on a network limit, and the margin stage needs a
        # strictly feasible interior to search for reactive headroom.
        fixed = _entries_from_dense(case, stage1.p_kw / case.s_base) * (1.0 - 1e-4)
        result = _run_periods(case, spec, options, jobs=jobs, starts=starts, fixed_p=fixed)
        return EnvelopeResult(
            case=case,
            spec=spec,
            p_kw=result.p_kw,
            q_kvar=result.q_kvar,
            objective_pu=result.objective_pu,
            diagnostics=result.diagnostics,
            stage1=stage1,
        )
    if reactive_p == "free":
        return _run_periods(case, spec, options, jobs=jobs, starts=starts)
    raise ValueError(f"unknown reactive_p mode {reactive_p!r}")


def _run_scenario_1(case: NetworkCase, spec: ScenarioSpec) -> EnvelopeResult:
    T = case.horizon
    p_kw = np.zeros((len(case.generators), 3, T))
    for g, ph in case.gen_entries():
        p_kw[g, ph, :] = case.generators[g].p_cap * case.s_base
    total_pu = sum(case.generators[g].p_cap for g, _ in case.gen_entries())
    return EnvelopeResult(
        case=case,
        spec=spec,
        p_kw=p_kw,
        q_kvar=np.zeros_like(p_kw),
        objective_pu=np.full(T, total_pu),
        diagnostics=tuple({"period": t, "status": "closed_form", "iterations": 0} for t in range(T)),
    )


def _entries_from_dense(case: NetworkCase, dense: np.ndarray) -> np.ndarray:
    """(n_entries, T) view of a dense (n_gen, 3, T) array."""
    return np.array([dense[g, ph, :] for g, ph in case.gen_entries()])


def _run_periods(
    case: NetworkCase,
    spec: ScenarioSpec,
    options: SolverOptions | None,
    *,
    jobs: int = 1,
    starts: int = 2,
    bound_q_by_rating: bool = False,
    fixed_p: np.ndarray | None = None,
) -> EnvelopeResult:
    opts = options or SolverOptions()
    T = case.horizon
    scales = START_SCALES[: max(1, starts)]

    def solve_period(t: int):
        problem = nlp.build_problem(
            case,
            spec,
            t,
            bound_q_by_rating=bound_q_by_rating,
            fixed_p=None if fixed_p is None else fixed_p[:, t],
        )
        sol = None
        for scale in scales:
            cand = solver.solve(problem, opts, x0=nlp.initial_point(problem, voltage_scale=scale))
            if cand.status == "optimal" and (sol is None or sol.status != "optimal" or cand.objective > sol.objective + 1e-10):
                sol = cand
            elif sol is None:
                sol = cand
        if sol.status != "optimal":
            raise ScenarioSolveError(t, sol.status)
        pg, qg = nlp.decode_generation(problem, sol.x)
        diag = {
            "period": t,
            "status": sol.status,
            "iterations": sol.iterations,
            "kkt_residual": sol.max_kkt_residual,
        }
        if opts.trace:
            for rec in sol.trace:
                print(
                    f"period {t} iter {rec['iter']:3d}  mu {rec['mu']:9.2e}  "
                    f"obj {rec['objective']:12.6f}  kkt {rec['kkt_error']:9.2e}  "
                    f"theta {rec['theta']:9.2e}  alpha {rec['alpha']:6.4f}"
                )
        return pg, qg, sol.objective, diag

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(solve_period, range(T)))
    else:
        results = [solve_period(t) for t in range(T)]

    p_kw = np.zeros((len(case.generators), 3, T))
    q_kvar = np.zeros_like(p_kw)
    objective = np.zeros(T)
    diags = []
    for t, (pg, qg, obj, diag) in enumerate(results):
        p_kw[:, :, t] = pg * case.s_base
        q_kvar[:, :, t] = qg * case.s_base
        objective[t] = obj
        diags.append(diag)
    return EnvelopeResult(
        case=case,
        spec=spec,
        p_kw=p_kw,
        q_kvar=q_kvar,
        objective_pu=objective,
        diagnostics=tuple(diags),
    )


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

def _envelope_rows(result: EnvelopeResult) -> list[tuple[str, str, int, float, float]]:
    rows = []
    for g, ph in result.case.gen_entries():
        gen = result.case.generators[g]
        for t in range(result.case.horizon):
            rows.append((gen.id, PHASES[ph], t, result.p_kw[g, ph, t], result.q_kvar[g, ph, t]))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return rows


def emit_results(
    result: EnvelopeResult,
    out_dir: str | Path,
    inputs: list[Path] | None = None,
    options: SolverOptions | None = None,
) -> list[Path]:
    """Write envelopes.csv, summary.json, manifest.json and envelopes.svg.

    Daily totals in the summary are recomputed from the rounded values that
    go into the CSV, so the two files always agree exactly.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    rows = _envelope_rows(result)
    csv_path = out / "envelopes.csv"
    with open(csv_path, "w", newline="") as fh:
        fh.write("generator_id,phase,period,p_kw,q_kvar\n")
        for gid, ph, t, p, q in rows:
            fh.write(f"{gid},{ph},{t},{p:.6f},{q:.6f}\n")
    written.append(csv_path)

    h = result.case.period_hours
    total_kwh = sum(round(p, 6) for _, _, _, p, _ in rows) * h
    total_kvarh = sum(round(q, 6) for _, _, _, _, q in rows) * h
    per_period = [0.0] * result.case.horizon
    for _, _, t, p, _ in rows:
        per_period[t] += round(p, 6)

    summary = {
        "scenario": result.spec.scenario,
        "objective": result.spec.objective.value,
        "total_production_kwh": round(total_kwh, 6),
        "total_production_kvarh": round(total_kvarh, 6),
        "periods": result.case.horizon,
        "period_hours": h,
        "per_period_total_kw": [round(v, 6) for v in per_period],
        "solver": {
            "statuses": sorted({d["status"] for d in result.diagnostics}),
            "total_iterations": int(sum(d["iterations"] for d in result.diagnostics)),
        },
    }
    if result.stage1 is not None:
        summary["stage1_total_kwh"] = round(
            float(np.round(result.stage1.p_kw, 6).sum() * h), 6
        )
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    written.append(summary_path)

    manifest = {
        "tool": "lvdoe",
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "scenario": result.spec.scenario,
        "objective": result.spec.objective.value,
        "inputs": [
            {"path": str(p), "sha256": hashlib.sha256(Path(p).read_bytes()).hexdigest()}
            for p in (inputs or [])
        ],
        "solver_options": {
            "tol_kkt": (options or SolverOptions()).tol_kkt,
            "max_iter": (options or SolverOptions()).max_iter,
        },
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written.append(manifest_path)

    svg_path = out / "envelopes.svg"
    label = f"scenario {result.spec.scenario} ({result.spec.objective.value})"
    svg_path.write_text(render_svg([(label, per_period)], h))
    written.append(svg_path)
    return written


def render_svg(series: list[tuple[str, list[float]]], period_hours: float) -> str:
    """Line plot of aggregate export power versus period, one polyline per series."""
    width, height, pad = 640, 400, 48
    all_vals = [v for _, vals in series for v in vals] or [0.0]
    vmax = max(max(all_vals), 1e-9)
    vmin = min(min(all_vals), 0.0)
    span = vmax - vmin or 1.0
    n = max(len(vals) for _, vals in series) if series else 1

    def sx(t: int) -> float:
        return pad + (width - 2 * pad) * (t / max(n - 1, 1))

    def sy(v: float) -> float:
        return height - pad - (height - 2 * pad) * ((v - vmin) / span)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 12}" font-size="12" text-anchor="middle">period ({period_hours:g} h)</text>',
        f'<text x="14" y="{height // 2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {height // 2})">aggregate export (kW)</text>',
    ]
    for k, (label, vals) in enumerate(series):
        color = colors[k % len(colors)]
        pts = " ".join(f"{sx(t):.2f},{sy(v):.2f}" for t, v in enumerate(vals))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * (k + 1)}" font-size="11" text-anchor="end" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Parser whose usage errors exit with code 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _read_envelopes_csv(path: Path) -> dict[tuple[str, str, int], tuple[float, float]]:
    out = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "generator_id,phase,period,p_kw,q_kvar":
            raise InputError(f"{path}: unexpected envelopes header {header!r}")
        for line in fh:
            gid, ph, t, p, q = line.strip().split(",")
            out[(gid, ph, int(t))] = (float(p), float(q))
    return out


def _build_parser() -> _Parser:
    parser = _Parser(prog="lvdoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--network", required=True, help="network JSON file")
        p.add_argument("--loads", help="optional load-profile CSV")

    ps = sub.add_parser("solve", help="compute export envelopes for one scenario")
    common(ps)
    ps.add_argument("--scenario", type=int, choices=range(1, 6), required=True)
    ps.add_argument("--objective", choices=["active", "reactive-margin"], default="active")
    ps.add_argument("--reactive-p", choices=["two_stage", "free"], default="two_stage")
    ps.add_argument("--out", required=True, help="output directory")
    ps.add_argument("--tol", type=float, default=1e-8)
    ps.add_argument("--max-iter", type=int, default=300)
    ps.add_argument("--jobs", type=int, default=1)
    ps.add_argument("--starts", type=int, default=2, choices=range(1, len(START_SCALES) + 1),
                    help="deterministic multi-start attempts per period")
    ps.add_argument("--trace", action="store_true", help="stream per-iteration solver diagnostics")

    po = sub.add_parser("oracle", help="bisection export limit via the power-flow oracle")
    common(po)
    po.add_argument("--generator", required=True)
    po.add_argument("--constraints", default="voltage,current,vuf", help="comma list of voltage|current|vuf")
    po.add_argument("--period", type=int, default=None, help="single period (default: all)")

    pv = sub.add_parser("validate", help="re-check an envelope against the power-flow oracle")
    common(pv)
    pv.add_argument("--result", required=True, help="result directory or envelopes.csv")
    pv.add_argument("--scenario", type=int, choices=range(1, 6), required=True)

    pp = sub.add_parser("plot", help="combined SVG from one or more result directories")
    pp.add_argument("--result", nargs="+", required=True)
    pp.add_argument("--out", required=True, help="output SVG path")
    return parser


def _cmd_solve(args) -> int:
    case = load_network(args.network, args.loads)
    spec = ScenarioSpec(args.scenario, Objective.ACTIVE_EXPORT if args.objective == "active" else Objective.REACTIVE_MARGIN)
    opts = SolverOptions(tol_kkt=args.tol, max_iter=args.max_iter, trace=args.trace)
    try:
        result = run_scenario(
            case, spec, opts, reactive_p=args.reactive_p, jobs=args.jobs, starts=args.starts
        )
    except ScenarioSolveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    inputs = [Path(args.network)] + ([Path(args.loads)] if args.loads else [])
    for path in emit_results(result, args.out, inputs=inputs, options=opts):
        print(path)
    print(f"total production: {result.total_kwh:.6f} kWh, {result.total_kvarh:.6f} kVArh")
    return 0


def _parse_constraints(raw: str) -> frozenset[LimitKind]:
    names = [s.strip() for s in raw.split(",") if s.strip()]
    try:
        return frozenset(LimitKind(n) for n in names)
    except ValueError:
        raise InputError(f"bad constraint set {raw!r}: use voltage|current|vuf") from None


def _cmd_oracle(args) -> int:
    case = load_network(args.network, args.loads)
    cs = _parse_constraints(args.constraints)
    periods = [args.period] if args.period is not None else list(range(case.horizon))
    for t in periods:
        if not 0 <= t < case.horizon:
            raise InputError(f"period {t} outside horizon {case.horizon}")
        limit_pu = oracle.doe_bisection(case, args.generator, cs, t)
        print(f"period {t}: {limit_pu * case.s_base:.6f} kW")
    return 0


def _cmd_validate(args) -> int:
    case = load_network(args.network, args.loads)
    path = Path(args.result)
    if path.is_dir():
        path = path / "envelopes.csv"
    envelope = _read_envelopes_csv(path)
    cs = nlp.constraint_set_for(ScenarioSpec(args.scenario))

    inj = oracle.InjectionSet.from_case(case)
    p_gen = inj.p_gen.copy()
    q_gen = inj.q_gen.copy()
    gen_idx = {g.id: i for i, g in enumerate(case.generators)}
    for (gid, ph, t), (p, q) in envelope.items():
        if gid not in gen_idx:
            raise InputError(f"{path}: unknown generator {gid!r}")
        p_gen[gen_idx[gid], PHASE_INDEX[ph], t] = p / case.s_base
        q_gen[gen_idx[gid], PHASE_INDEX[ph], t] = q / case.s_base

    from dataclasses import replace

    worst = 0
    for t in range(case.horizon):
        try:
            state = oracle.solve_pf(case, replace(inj, p_gen=p_gen, q_gen=q_gen), t)
        except oracle.PowerFlowDivergedError as exc:
            print(f"period {t}: power flow failed: {exc}")
            worst += 1
            continue
        violations = check_limits(state, cs, tol=1e-6) if cs else []
        if violations:
            worst += len(violations)
            for v in violations:
                loc = f"{v.location}/{v.phase}" if v.phase else v.location
                print(f"period {t}: {v.kind} at {loc}: {v.magnitude:.6f} beyond limit")
    if worst:
        print(f"validation FAILED: {worst} findings")
        return 2
    print(f"validation OK: no violations in {case.horizon} periods")
    return 0


def _cmd_plot(args) -> int:
    series = []
    horizon = 0
    ph = 1.0
    for rd in args.result:
        path = Path(rd)
        csv_path = path / "envelopes.csv" if path.is_dir() else path
        envelope = _read_envelopes_csv(csv_path)
        summary_path = (csv_path.parent / "summary.json")
        label = csv_path.parent.name
        if summary_path.exists():
            meta = json.loads(summary_path.read_text())
            label = f"scenario {meta['scenario']} ({meta['objective']})"
            ph = float(meta.get("period_hours", 1.0))
        T = 1 + max((t for (_, _, t) in envelope), default=0)
        horizon = max(horizon, T)
        totals = [0.0] * T
        for (_, _, t), (p, _) in envelope.items():
            totals[t] += p
        series.append((label, totals))
    Path(args.out).write_text(render_svg(series, ph))
    print(args.out)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"solve": _cmd_solve, "oracle": _cmd_oracle, "validate": _cmd_validate, "plot": _cmd_plot}
    try:
        return handlers[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (oracle.InfeasibleAtZeroExportError, solver.KktSingularError, ScenarioSolveError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
