import hashlib
import json

import numpy as np
import pytest

from lvdoe import cli
from lvdoe.cli import EnvelopeResult, emit_results, main, render_svg, run_scenario
from lvdoe.nlp import Objective, ScenarioSpec
from lvdoe.solver import SolverOptions

from conftest import fixture_path, two_bus_case

SYNTH4 = str(fixture_path("synth4.json"))
SYNTH4_LOADS = str(fixture_path("synth4_loads.csv"))
SYNTH2 = str(fixture_path("synth2.json"))


@pytest.fixture(scope="module")
def solved_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "s5"
    rc = main(
        ["solve", "--network", SYNTH4, "--loads", SYNTH4_LOADS,
         "--scenario", "5", "--objective", "active", "--out", str(out)]
    )
    assert rc == 0
    return out


class TestSolveCommand:
    def test_outputs_exist(self, solved_dir):
        for name in ("envelopes.csv", "summary.json", "manifest.json", "envelopes.svg"):
            assert (solved_dir / name).exists()

    def test_aggregation_identity(self, solved_dir):
        total = 0.0
        with open(solved_dir / "envelopes.csv") as fh:
            assert fh.readline().strip() == "generator_id,phase,period,p_kw,q_kvar"
            for line in fh:
                total += float(line.split(",")[3])
        summary = json.loads((solved_dir / "summary.json").read_text())
        # summary totals are recomputed from the rounded CSV values
        assert total * summary["period_hours"] == pytest.approx(
            summary["total_production_kwh"], abs=1e-9
        )

    def test_manifest_hashes_inputs(self, solved_dir):
        manifest = json.loads((solved_dir / "manifest.json").read_text())
        hashes = {e["path"]: e["sha256"] for e in manifest["inputs"]}
        for path in (SYNTH4, SYNTH4_LOADS):
            digest = hashlib.sha256(open(path, "rb").read()).hexdigest()
            assert hashes[path] == digest

    def test_svg_one_polyline(self, solved_dir):
        svg = (solved_dir / "envelopes.svg").read_text()
        assert svg.count("<polyline") == 1

    def test_determinism_byte_identical(self, tmp_path):
        outs = []
        for d in ("a", "b"):
            out = tmp_path / d
            rc = main(["solve", "--network", SYNTH2, "--scenario", "5", "--out", str(out)])
            assert rc == 0
            outs.append((out / "envelopes.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_scenario1_totals(self, tmp_path):
        out = tmp_path / "s1"
        rc = main(["solve", "--network", SYNTH2, "--scenario", "1", "--out", str(out)])
        assert rc == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["total_production_kwh"] == pytest.approx(3.68 * 24, abs=1e-9)
        assert summary["total_production_kvarh"] == 0.0


class TestErrorPaths:
    def test_unknown_scenario_exits_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["solve", "--network", SYNTH2, "--scenario", "9", "--out", "x"])
        assert exc.value.code == 1

    def test_unknown_flag_exits_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["solve", "--network", SYNTH2, "--scenario", "5", "--frobnicate"])
        assert exc.value.code == 1

    def test_missing_network_file_exits_1(self, tmp_path):
        rc = main(["solve", "--network", str(tmp_path / "no.json"), "--scenario", "5", "--out", str(tmp_path / "o")])
        assert rc == 1

    def test_solver_failure_exits_2(self, tmp_path):
        # voltage floor above nominal with a fixed load is unsatisfiable
        doc = json.loads(open(SYNTH2).read())
        for b in doc["buses"]:
            b["vmin"] = 1.05
            b["vmax"] = 1.2
        doc["loads"][0]["p_profile"] = [3.0] * 24
        doc["loads"][0]["q_profile"] = [1.0] * 24
        net = tmp_path / "bad.json"
        net.write_text(json.dumps(doc))
        rc = main(["solve", "--network", str(net), "--scenario", "5", "--out", str(tmp_path / "o")])
        assert rc == 2


class TestValidateCommand:
    def test_fresh_solve_validates_clean(self, solved_dir):
        rc = main(
            ["validate", "--network", SYNTH4, "--loads", SYNTH4_LOADS,
             "--result", str(solved_dir), "--scenario", "5"]
        )
        assert rc == 0

    def test_tampered_envelope_fails(self, solved_dir, tmp_path):
        lines = (solved_dir / "envelopes.csv").read_text().splitlines()
        parts = lines[1].split(",")
        parts[3] = "500.0"  # far beyond any limit
        lines[1] = ",".join(parts)
        bad = tmp_path / "envelopes.csv"
        bad.write_text("\n".join(lines) + "\n")
        rc = main(
            ["validate", "--network", SYNTH4, "--loads", SYNTH4_LOADS,
             "--result", str(bad), "--scenario", "5"]
        )
        assert rc == 2


class TestOracleCommand:
    def test_prints_limit(self, capsys):
        rc = main(
            ["oracle", "--network", SYNTH2, "--generator", "g1",
             "--constraints", "voltage,current,vuf", "--period", "12"]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "period 12:" in out and "kW" in out

    def test_bad_constraint_name_exits_1(self):
        rc = main(
            ["oracle", "--network", SYNTH2, "--generator", "g1",
             "--constraints", "volts", "--period", "0"]
        )
        assert rc == 1


class TestPlotCommand:
    def test_two_results_two_polylines(self, solved_dir, tmp_path):
        out2 = tmp_path / "s2"
        rc = main(["solve", "--network", SYNTH4, "--scenario", "2", "--out", str(out2)])
        assert rc == 0
        svg_out = tmp_path / "combo.svg"
        rc = main(["plot", "--result", str(solved_dir), str(out2), "--out", str(svg_out)])
        assert rc == 0
        assert svg_out.read_text().count("<polyline") == 2


class TestRunScenario:
    def test_scenario1_closed_form(self, synth4):
        result = run_scenario(synth4, ScenarioSpec(1))
        per_gen = 3.68 * 24
        assert result.total_kwh == pytest.approx(3 * per_gen, abs=1e-9)
        assert result.total_kvarh == 0.0
        assert all(d["status"] == "closed_form" for d in result.diagnostics)

    def test_daily_total_is_sum_of_periods(self, synth4):
        result = run_scenario(synth4, ScenarioSpec(1))
        assert result.total_kwh == pytest.approx(
            result.per_period_total_kw.sum() * synth4.period_hours, rel=1e-12
        )

    def test_two_stage_reports_both(self):
        case = two_bus_case()
        result = run_scenario(case, ScenarioSpec(5, Objective.REACTIVE_MARGIN), starts=1)
        assert result.stage1 is not None
        assert result.stage1.spec.objective is Objective.ACTIVE_EXPORT
        # margin-stage P sits a whisker below the stage-1 export
        np.testing.assert_allclose(result.p_kw, result.stage1.p_kw * (1 - 1e-4), rtol=1e-9)

    def test_free_variant_zeroes_reactive(self):
        case = two_bus_case()
        result = run_scenario(case, ScenarioSpec(5, Objective.REACTIVE_MARGIN), reactive_p="free", starts=1)
        assert result.stage1 is None
        np.testing.assert_allclose(result.q_kvar, 0.0, atol=1e-4 * case.s_base)

    def test_unknown_reactive_mode(self):
        case = two_bus_case()
        with pytest.raises(ValueError, match="reactive_p"):
            run_scenario(case, ScenarioSpec(5, Objective.REACTIVE_MARGIN), reactive_p="both")


class TestEmitResults:
    def test_empty_network_empty_files(self, tmp_path):
        case = two_bus_case()
        import dataclasses

        no_gen = dataclasses.replace(case, generators=())
        result = run_scenario(no_gen, ScenarioSpec(1))
        files = emit_results(result, tmp_path / "empty")
        csv_text = (tmp_path / "empty" / "envelopes.csv").read_text()
        assert csv_text == "generator_id,phase,period,p_kw,q_kvar\n"
        summary = json.loads((tmp_path / "empty" / "summary.json").read_text())
        assert summary["total_production_kwh"] == 0.0
        svg = (tmp_path / "empty" / "envelopes.svg").read_text()
        assert svg.count("<polyline") == 1  # flat zero series still drawn

    def test_csv_number_format(self, solved_dir):
        lines = (solved_dir / "envelopes.csv").read_text().splitlines()[1:]
        for line in lines[:5]:
            p_field = line.split(",")[3]
            assert "." in p_field
            assert len(p_field.split(".")[1]) == 6


class TestRenderSvg:
    def test_structure(self):
        svg = render_svg([("s5", [1.0, 2.0, 3.0]), ("s2", [3.0, 1.0, 2.0])], 1.0)
        assert svg.startswith("<svg")
        assert svg.count("<polyline") == 2
        assert "aggregate export" in svg
