import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from maxent_fep import cli
from maxent_fep import config as cfg
from maxent_fep.errors import ConfigError
from maxent_fep.experiments import REGISTRY

FIXTURES = Path(__file__).parent / "fixtures" / "malformed"

# fixture -> (line, field path) the message must carry
MALFORMED = {
    "01-invalid-json.json": ("5:29", "invalid JSON"),
    "02-missing-schema.json": ("1", "'schema' is a required property"),
    "03-wrong-schema-version.json": ("2", "schema:"),
    "04-missing-name.json": ("1", "'name' is a required property"),
    "05-unknown-top-level-key.json": ("1", "'grdi' was unexpected"),
    "06-unknown-experiment.json": ("8", "experiments[1].name"),
    "07-unknown-preset.json": ("6", "constraints[0].preset"),
    "08-grid-too-few-points.json": ("7", "grid.points"),
    "09-grid-inverted-bounds.json": ("5", "grid.upper"),
    "10-grid-three-dims.json": ("4", "grid.dims"),
    "11-negative-diffusion.json": ("7", "drift.D"),
    "12-q-not-antisymmetric.json": ("7", "drift.Q"),
    "13-q-wrong-shape.json": ("7", "drift.Q"),
    "14-empty-seeds.json": ("9", "experiments[0].params.seeds"),
    "15-missing-required-param.json": ("7", "experiments[0].params"),
    "16-unknown-param.json": ("7", "'tolerance' was unexpected"),
    "17-negative-dt.json": ("8", "experiments[0].params.dt"),
    "18-kappa-out-of-range.json": ("8", "experiments[0].params.kappa"),
    "19-needs-2d-grid.json": ("7", "needs a two-dimensional grid"),
    "20-wrong-type.json": ("7", "experiments[0].params.steps"),
}


def write(tmp_path, config, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config, indent=2))
    return path


def small_scenario():
    return {
        "schema": 1,
        "name": "small",
        "grid": {"lower": -8, "upper": 8, "points": 161},
        "constraints": [{"preset": "quadratic", "scale": 2}],
        "experiments": [
            {"name": "maxent-solve", "constraints": [{"preset": "quadratic", "scale": 2, "target": 0.5}]},
            {"name": "langevin-sample", "params": {"steps": 20000, "dt": 0.01, "seeds": [0, 1], "write_every": 10}},
        ],
    }


# schema rejection -----------------------------------------------------------


def test_fixture_table_is_complete():
    assert sorted(p.name for p in FIXTURES.glob("*.json")) == sorted(MALFORMED)
    assert len(MALFORMED) == 20


@pytest.mark.parametrize("fixture", sorted(MALFORMED))
def test_malformed_config_rejected_with_location(fixture, capsys):
    line, field = MALFORMED[fixture]
    path = FIXTURES / fixture
    with pytest.raises(ConfigError) as info:
        cfg.load(path)
    msg = str(info.value)
    assert f"{path}:{line}" in msg
    assert field in msg
    assert cli.main(["check", str(path)]) == cli.EXIT_CONFIG
    assert field in capsys.readouterr().err


def test_unknown_experiment_lists_valid_names():
    with pytest.raises(ConfigError) as info:
        cfg.load(FIXTURES / "06-unknown-experiment.json")
    for name in REGISTRY:
        assert name in str(info.value)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        cfg.load(tmp_path / "nope.json")
    assert cli.main(["run", str(tmp_path / "nope.json")]) == cli.EXIT_CONFIG


def test_all_errors_are_reported_together(tmp_path):
    bad = small_scenario()
    bad["grid"]["points"] = 2
    bad["drift"] = {"D": -1}
    with pytest.raises(ConfigError) as info:
        cfg.load(write(tmp_path, bad))
    assert len(str(info.value).splitlines()) == 2


# overrides ------------------------------------------------------------------


def test_overrides_apply_dotted_paths():
    c = cfg.apply_overrides(small_scenario(), ["drift.D=0.5", "experiments.1.params.seeds=[3]", "name=renamed"])
    assert c["drift"] == {"D": 0.5}
    assert c["experiments"][1]["params"]["seeds"] == [3]
    assert c["name"] == "renamed"


def test_overrides_do_not_mutate_input():
    base = small_scenario()
    cfg.apply_overrides(base, ["grid.points=81"])
    assert base["grid"]["points"] == 161


@pytest.mark.parametrize("bad", ["nokey", "experiments.9.name=x", "name.sub=1"])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        cfg.apply_overrides(small_scenario(), [bad])


def test_override_is_validated(tmp_path):
    path = write(tmp_path, small_scenario())
    with pytest.raises(ConfigError) as info:
        cfg.load(path, ["grid.points=3"])
    assert "grid.points" in str(info.value)


def test_config_hash_tracks_content():
    a = small_scenario()
    b = cfg.apply_overrides(a, ["drift.D=1.0"])
    assert cfg.config_hash(a) == cfg.config_hash(small_scenario())
    assert cfg.config_hash(a) != cfg.config_hash(b)


def test_effective_config_layers_experiment_settings():
    c = small_scenario()
    eff = cfg.effective_config(c, c["experiments"][0])
    assert eff["constraints"][0]["target"] == 0.5
    assert "experiments" not in eff


# listing --------------------------------------------------------------------


def test_list_contains_registry(capsys):
    assert cli.main(["list"]) == 0
    out = capsys.readouterr().out
    names = ["maxent-solve", "fp-relax", "langevin-sample", "ness-current", "blanket-abil",
             "maxent-fep-dual", "gauge-flows", "trapping", "diagnostics-suite"]
    for n in names:
        assert n in out
    assert len(REGISTRY) >= 9
    assert "full-suite.json" in out


def test_every_listed_experiment_is_accepted():
    for name in REGISTRY:
        assert name in cfg.EXPERIMENT_SCHEMAS


def test_bundled_scenarios_validate():
    for name in cli.bundled_scenarios():
        cfg.load(cli.resolve_config(name))


# run ------------------------------------------------------------------------


def test_run_maxent_exp(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", "maxent-exp", "--out", str(out)]) == 0
    dens = np.loadtxt(out / "00-maxent-solve" / "density.csv", delimiter=",", skiprows=1)
    assert np.max(np.abs(dens[:, 1] - np.exp(-dens[:, 0]))) < 1e-6
    lam = json.loads((out / "00-maxent-solve" / "multipliers.json").read_text())
    assert lam["multipliers"][0] == pytest.approx(1.0, abs=1e-6)
    report = json.loads((out / "report.json").read_text())
    assert report["exit_code"] == 0 and report["failed_checks"] == []
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == report["config_hash"]
    assert "00-maxent-solve/density.csv" in manifest["files"]


def test_run_empty(tmp_path):
    assert cli.main(["run", "empty", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["experiments"] == [] and report["exit_code"] == 0


def test_injected_failure_is_pinpointed(tmp_path, capsys):
    code = cli.main(["run", "full-suite", "--out", str(tmp_path), "--set", "experiments.9.params.inject_failure=true"])
    assert code == cli.EXIT_CHECK_FAILED
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["failed_checks"] == ["diagnostics-suite/lyapunov[injected-failure]"]
    assert "FAILED diagnostics-suite/lyapunov[injected-failure]" in capsys.readouterr().err


def test_crashing_experiment_does_not_stop_the_run(tmp_path):
    c = small_scenario()
    c["experiments"].insert(0, {"name": "fp-relax", "params": {"t_final": 1.0, "dt": 1.0}})
    out = tmp_path / "out"
    assert cli.run(write(tmp_path, c), out=out) == cli.EXIT_CHECK_FAILED
    report = json.loads((out / "report.json").read_text())
    assert [e["status"] for e in report["experiments"]] == ["error", "pass", "pass"]
    assert "StabilityError" in report["experiments"][0]["error"]


def test_outputs_stay_inside_output_directory(tmp_path):
    out = tmp_path / "out"
    cli.run(write(tmp_path, small_scenario()), out=out)
    written = {p for p in tmp_path.rglob("*") if p.is_file()}
    assert written - {tmp_path / "scenario.json"} <= set(out.rglob("*"))


def test_reruns_are_byte_identical(tmp_path):
    path = write(tmp_path, small_scenario())
    a, b = tmp_path / "a", tmp_path / "b"
    cli.run(path, out=a)
    cli.run(path, out=b, workers=2)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_trajectory_csv_header(tmp_path):
    out = tmp_path / "out"
    cli.run(write(tmp_path, small_scenario()), out=out)
    header = (out / "01-langevin-sample" / "trajectory_seed0.csv").read_text().splitlines()[0]
    assert header == "t,x"


def test_bad_worker_count(capsys):
    assert cli.main(["run", "empty", "--workers", "0"]) == cli.EXIT_CONFIG


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "maxent_fep.cli", "check", "maxent-exp"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "maxent-exp: ok" in proc.stdout


def test_log_level_from_environment(tmp_path):
    env = {**os.environ, "MAXENT_FEP_LOG": "info"}
    proc = subprocess.run([sys.executable, "-m", "maxent_fep.cli", "run", "maxent-exp", "--out", str(tmp_path)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert "INFO maxent_fep" in proc.stderr
