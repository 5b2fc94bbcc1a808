import json

import pytest

from ale_minihydro.cli import (
    EXIT_CONFIG,
    EXIT_NUMERICAL,
    EXIT_OK,
    build_parser,
    build_run_config,
    main,
    read_config_file,
)
from ale_minihydro.exceptions import ConfigError
from ale_minihydro.parameters import PresetName, TmopMode
from ale_minihydro.state_io import read_state


def test_config_file_and_flag_override(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# sod tube\npreset = sod-1dx\nelements = 16x2\ncycles=5\nremap-every=2\ntmop=off\n\n")
    values = read_config_file(path)
    assert values["remap_every"] == "2"
    config = build_run_config(values, {"cycles": 2, "cfl": 0.25, "preset": None})
    assert config.preset == PresetName.SOD_1DX
    assert config.elements == [16, 2]
    assert config.cycles == 2
    assert config.remap_every == 2
    assert config.steps.cfl == 0.25
    assert config.tmop.mode == TmopMode.OFF


def test_config_file_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("preset=uniform\nwarp=9\n")
    with pytest.raises(ConfigError, match="bad.cfg:2"):
        read_config_file(path)


def test_invalid_element_counts():
    with pytest.raises(ConfigError):
        build_run_config({"elements": "4xa"}, {})


def test_run_flags_reach_run_config():
    args = build_parser().parse_args(
        [
            "run",
            "--cartesian",
            "6,3",
            "--tfinal",
            "0.4",
            "--visc",
            "0.25,1.5",
            "--tmop",
            "uniform",
            "--tmop-newton-tol",
            "1e-9",
            "--tmop-max-newton",
            "7",
            "--remap-steps",
            "12",
            "--pseudo-cfl",
            "0.1",
        ]
    )
    overrides = {key: value for key, value in vars(args).items() if key not in ("command", "config", "log_level")}
    config = build_run_config({}, overrides)
    assert config.elements == [6, 3]
    assert config.steps.t_final == 0.4
    assert (config.viscosity.q1, config.viscosity.q2) == (0.25, 1.5)
    assert config.tmop.mode == TmopMode.UNIFORM
    assert config.tmop.newton_rel_tol == 1e-9
    assert config.tmop.max_newton == 7
    assert config.remap.n_pseudo_steps == 12
    assert config.remap.pseudo_cfl == 0.1


def test_mesh_flag_names_the_mesh_file():
    args = build_parser().parse_args(["run", "--mesh", "wedge.mesh"])
    assert args.mesh_file == "wedge.mesh"
    assert build_parser().parse_args(["run", "--mesh-file", "wedge.mesh"]).mesh_file == "wedge.mesh"


def test_config_file_accepts_flag_spellings(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "cartesian = 8,4\ntfinal = 0.2\nvisc = 0.3,1.0\nremap-steps = 5\npseudo-cfl = 0.5\n"
        "tmop-newton-tol = 1e-8\ntmop-max-newton = 4\nmesh = box.mesh\n"
    )
    values = read_config_file(path)
    config = build_run_config(values, {"visc": "0.1,0.2"})
    assert config.elements == [8, 4]
    assert config.steps.t_final == 0.2
    assert (config.viscosity.q1, config.viscosity.q2) == (0.1, 0.2)
    assert config.remap.n_pseudo_steps == 5
    assert config.remap.pseudo_cfl == 0.5
    assert config.tmop.newton_rel_tol == 1e-8
    assert config.tmop.max_newton == 4
    assert config.mesh_file == "box.mesh"


@pytest.mark.parametrize("visc", ["0.5", "0.5,", "0.5,1,2"])
def test_malformed_viscosity_pair(visc):
    with pytest.raises(ConfigError, match="q1,q2"):
        build_run_config({"visc": visc}, {})


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    argv = ["run", "--preset", "uniform", "--cycles", "2", "--remap-every", "2", "--out", str(out)]
    assert main(argv + ["--mem-report", "--dump-matrix", "mass.coo"]) == EXIT_OK

    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["preset"] == "uniform"
    assert len(summary["remaps"]) == 1
    assert summary["mass_drift"] <= 1e-12
    assert (out / "cycles.csv").read_text().count("\n") == 3
    assert read_state(out / "state.bin").order == 2
    assert (out / "mass.coo").stat().st_size > 0

    report = json.loads((out / "mem_report.json").read_text())
    assert {entry["arena"] for entry in report} == {"permanent", "temporary"}
    assert "cycles, 1 remaps" in capsys.readouterr().out


def test_configuration_errors_exit_with_config_code(tmp_path):
    assert main(["run", "--order", "9", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["run", "--exec", "gpu", "--preset", "uniform", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) != EXIT_OK


def test_numerical_failure_exits_with_numerical_code(tmp_path):
    path = tmp_path / "tight.cfg"
    path.write_text("preset=uniform\ndt_min=0.09\n")
    assert main(["run", "--config", str(path), "--cycles", "2", "--out", str(tmp_path)]) == EXIT_NUMERICAL


def test_bench_complexity_command(tmp_path, capsys):
    assert main(["bench-complexity", "--max-order", "3", "--out", str(tmp_path)]) == EXIT_OK
    payload = json.loads((tmp_path / "complexity.json").read_text())
    assert len(payload["rows"]) == 6
    assert {e["convention"] for e in payload["worked_example"]} == {"order", "nodes"}
    assert "stored values" in capsys.readouterr().out
