import csv
import io
import json

import pytest

from evbotnet import cli
from evbotnet.demand import RESIDENTIAL_FCDC, generate_parking_sessions, write_sessions_csv
from evbotnet.scenario import (
    BUNDLED_SCENARIOS,
    OUTPUT_DIR_ENV,
    REPORT_SCHEMA,
    ConfigError,
    RunReport,
    bundled_scenario,
    emit_plotdata,
    load_config,
    parse_config,
    run_scenario,
)

MINIMAL = """\
[scenario]
name = tiny
mode = distribution
case = case33bw
timestep_minutes = 60
horizon_steps = 4

[base]
shape = flat

[limits]
feeder_limit_mw = 7.91
"""


def _write(tmp_path, text, name="s.scn"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------- validation


def test_bundled_scenarios_validate():
    for name in BUNDLED_SCENARIOS:
        assert cli.main(["validate", name]) == 0


MALFORMED = [
    (MINIMAL + "colour = blue\n", "limits.colour"),
    (MINIMAL + "[extras]\nx = 1\n", "extras"),
    (MINIMAL.replace("mode = distribution", "mode = hybrid"), "scenario.mode"),
    (MINIMAL.replace("case = case33bw\n", ""), "scenario.case"),
    (MINIMAL.replace("name = tiny\n", ""), "scenario.name"),
    (MINIMAL.replace("timestep_minutes = 60", "timestep_minutes = 7"), "scenario.timestep_minutes"),
    (MINIMAL.replace("timestep_minutes = 60", "timestep_minutes = x"), "scenario.timestep_minutes"),
    (MINIMAL.replace("horizon_steps = 4", "horizon_steps = -1"), "scenario.horizon_steps"),
    (MINIMAL.replace("shape = flat", "shape = spiky"), "base.shape"),
    (MINIMAL.replace("feeder_limit_mw = 7.91", "feeder_limit_mw = 0"), "limits.feeder_limit_mw"),
    (MINIMAL + "v_min = 0.95\n", "limits.v_max"),
    (MINIMAL + "v_min = 1.05\nv_max = 0.95\n", "limits.v_min"),
    (MINIMAL + "[attack]\nkind = teleport\n", "attack.kind"),
    (MINIMAL + "[attack]\nkind = synchronized_fcdc_start\n", "attack.t_attack"),
    (MINIMAL + "[attack]\nkind = synchronized_fcdc_start\nt_attack = 07:00\n", "attack.t_attack"),
    (MINIMAL + "[attack]\nkind = synchronized_fcdc_start\nt_attack = 01:30\n", "attack.t_attack"),
    (MINIMAL + "[attack]\nkind = uniform_load_scale\nfactor = 1.1\n", "attack.kind"),
    (MINIMAL + "[attack]\nfactor = -2\n", "attack.factor"),
    (MINIMAL + "[attack]\nactor = mallory\n", "attack.actor"),
    (MINIMAL + "[attack]\ntargets = 1, x\n", "attack.targets"),
    (MINIMAL + "[lot.a]\nbus = 16\n", "lot.a.stations"),
    (MINIMAL + "[lot.a]\nbus = 16\nstations = 0\n", "lot.a.stations"),
    (MINIMAL + "[lot.a]\nbus = 16\nstations = 5\noccupancy = 2\n", "lot.a.occupancy"),
    (MINIMAL + "[lot.a]\nbus = 16\nstations = 5\narrival_model = x\n", "lot.a.arrival_model"),
    (MINIMAL + "[lot.a]\nbus = 16\nstations = 5\nwheels = 4\n", "lot.a.wheels"),
    (MINIMAL + "[heat_pumps]\ncop = abc\n", "heat_pumps.cop"),
    (MINIMAL + "[solver]\nenforce_q_limits = maybe\n", "solver.enforce_q_limits"),
    (MINIMAL + "[cascade]\nrating_basis = vibes\n", "cascade"),
    (MINIMAL + "[outputs]\nformats = json, xml\n", "outputs.formats"),
    ("[scenario\nname = x\n", "syntax"),
    ("[base]\nshape = flat\n", "scenario"),
]


@pytest.mark.parametrize("text,key", MALFORMED)
def test_malformed_config_exit_2(tmp_path, capsys, text, key):
    path = _write(tmp_path, text)
    assert cli.main(["validate", str(path)]) == 2
    assert key in capsys.readouterr().err


def test_unknown_bus_is_config_error(tmp_path, capsys):
    path = _write(tmp_path, MINIMAL + "[lot.a]\nbus = 40\nstations = 5\n")
    assert cli.main(["validate", str(path)]) == 2
    assert "lot.a.bus" in capsys.readouterr().err


def test_missing_scenario_file(capsys):
    assert cli.main(["validate", "/nonexistent/x.scn"]) == 2


def test_bad_case_exit_3(tmp_path, capsys):
    (tmp_path / "broken.m").write_text("mpc.bus = [\n 1 3 oops;\n];\n")
    path = _write(tmp_path, MINIMAL.replace("case33bw", "broken.m"))
    assert cli.main(["validate", str(path)]) == 3
    assert cli.main(["run", str(path), "--out", str(tmp_path)]) == 3
    missing = _write(tmp_path, MINIMAL.replace("case33bw", "nope.m"), "m.scn")
    assert cli.main(["validate", str(missing)]) == 3
    assert cli.main(["cascade", str(tmp_path / "nope.m"), "--scale", "1.1"]) == 3


def test_non_convergence_exit_4(tmp_path, capsys):
    huge = MINIMAL + "[lot.huge]\nbus = 17\nstations = 3000\noccupancy = 1.0\n" \
        "arrival_model = commercial_day\n"
    path = _write(tmp_path, huge)
    assert cli.main(["run", str(path), "--out", str(tmp_path)]) == 4
    assert "did not converge" in capsys.readouterr().err


# ---------------------------------------------------------------- runs and outputs


def test_baseline_no_violations(tmp_path):
    report = run_scenario(load_config("baseline"), output_dir=tmp_path)
    assert report.violations == []
    assert report.cascade is None
    assert report.summary["steps_over_feeder_limit_attack"] == []
    assert (tmp_path / "baseline.report.json").exists()
    assert (tmp_path / "baseline.series.csv").exists()


def test_transmission_at_base_load_has_no_rounds(tmp_path):
    text = "[scenario]\nname = t\nmode = transmission\ncase = case39\n"
    report = run_scenario(parse_config(text), write=False)
    assert report.cascade["rounds"] == [] and report.summary["outage_mw"] == 0


def test_report_provenance(tmp_path):
    report = run_scenario(load_config("baseline"), output_dir=tmp_path)
    d = json.loads((tmp_path / "baseline.report.json").read_text())
    assert d["schema"] == REPORT_SCHEMA
    assert set(d["provenance"]) >= {"config_sha256", "case_sha256", "seed"}
    assert RunReport.from_dict(d) == report


def test_outputs_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["run", "baseline", "--out", str(out)]) == 0
    for name in ("baseline.report.json", "baseline.series.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_output_dir_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env"))
    assert cli.main(["run", "baseline"]) == 0
    assert (tmp_path / "env" / "baseline.report.json").exists()
    # the command-line flag wins over the variable
    assert cli.main(["run", "baseline", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "baseline.report.json").exists()


def test_sessions_csv_ingestion(tmp_path):
    sessions = generate_parking_sessions(4, 12, 16, RESIDENTIAL_FCDC, horizon=24,
                                         timestep_minutes=60)
    write_sessions_csv(tmp_path / "lot.csv", sessions)
    text = MINIMAL.replace("horizon_steps = 4", "horizon_steps = 24") + \
        "[lot.csv]\nsessions_csv = lot.csv\n"
    cfg = load_config(_write(tmp_path, text))
    report = run_scenario(cfg, write=False)
    assert report.summary["n_sessions"] == 12
    assert max(report.series["ev_mw_normal"]) > 0


def test_bad_sessions_csv(tmp_path, capsys):
    (tmp_path / "lot.csv").write_text("vehicle_id,bus\nv,1\n")
    path = _write(tmp_path, MINIMAL + "[lot.csv]\nsessions_csv = lot.csv\n")
    assert cli.main(["run", str(path), "--out", str(tmp_path)]) == 2
    assert "lot.csv.sessions_csv" in capsys.readouterr().err


# ---------------------------------------------------------------- plot data


@pytest.fixture(scope="module")
def fig3_report():
    return run_scenario(load_config("fig3_attack"), write=False)


def _rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_fig3_columns(fig3_report):
    rows = _rows(emit_plotdata(fig3_report, "fig3"))
    assert rows[0] == ["time", "flow_mw_normal", "flow_mw_attack"]
    assert len(rows) == 97 and rows[29][0] == "07:00"
    # values are copied from the report, not recomputed
    assert float(rows[29][2]) == fig3_report.series["feeder_flow_mw_attack"][28]


def test_fig8_rows(tmp_path):
    assert cli.main(["run", "fig8_cascade10pct", "--out", str(tmp_path)]) == 0
    out = tmp_path / "fig8.csv"
    assert cli.main(["plotdata", str(tmp_path / "fig8_cascade10pct.report.json"),
                     "--fig", "fig8", "-o", str(out)]) == 0
    rows = _rows(out.read_text())
    assert rows[0][:3] == ["round", "deactivated_branch_from", "deactivated_branch_to"]
    report = RunReport.read(tmp_path / "fig8_cascade10pct.report.json")
    assert len(rows) - 1 == report.summary["total_deactivated"]
    assert [int(r[0]) for r in rows[1:]] == sorted(int(r[0]) for r in rows[1:])


def test_empty_series_is_header_only(tmp_path):
    report = run_scenario(load_config("cascade5pct"), write=False)
    assert emit_plotdata(report, "fig3") == "time,flow_mw_normal,flow_mw_attack\n"
    empty = RunReport("e", "transmission", {}, 15, [], {}, [], None, {})
    assert emit_plotdata(empty, "fig8").count("\n") == 1


def test_unknown_tag(tmp_path, capsys):
    run_scenario(load_config("baseline"), output_dir=tmp_path)
    with pytest.raises(KeyError):
        emit_plotdata(RunReport.read(tmp_path / "baseline.report.json"), "fig99")
    assert cli.main(["plotdata", str(tmp_path / "baseline.report.json"), "--fig", "fig99"]) == 2


def test_cascade_command(capsys):
    assert cli.main(["cascade", "case39", "--scale", "1.0"]) == 0
    assert "deactivated: 0" in capsys.readouterr().out
    assert cli.main(["cascade", "case39", "--scale", "1.05", "--rating-basis", "base_flow",
                     "--json"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["total_deactivated"] >= 1 and d["outage_mw"] == 0


def test_bundled_files_exist():
    for name in BUNDLED_SCENARIOS:
        assert bundled_scenario(name).is_file()


def test_config_error_is_value_error():
    assert issubclass(ConfigError, ValueError)
