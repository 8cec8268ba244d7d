from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from zakaifilter.cli import COMPARE_SCHEMA, FAILURE_SCHEMA, main
from zakaifilter.diagnostics import REPORT_SCHEMA
from zakaifilter.grid import GridSpec
from zakaifilter.scenarios import builtin
from zakaifilter.zakai import FilterTrajectory, write_density_binary, write_stream_binary

GOLDEN = Path(__file__).parent / "data" / "heat_golden.csv"


def _run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path)])


def _bytes(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def _yaml(tmp_path, cfg, name="c.yaml"):
    p = tmp_path / name
    cfg.dump(p)
    return str(p)


def test_simulate_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(a, "simulate", "--config", "builtin:generic", "--seed", "1") == 0
    assert _run(b, "simulate", "--config", "builtin:generic", "--seed", "1") == 0
    assert _bytes(a) == _bytes(b)
    assert set(_bytes(a)) == {"path_seed1.bin", "path_seed1.csv"}


def test_non_integral_horizon_exit_2(tmp_path, capsys):
    raw = builtin("heat").to_dict()
    raw["time"]["dt"] = 0.0007
    cfg = tmp_path / "bad.yaml"
    import yaml

    cfg.write_text(yaml.safe_dump(raw))
    assert _run(tmp_path, "simulate", "--config", str(cfg)) == 2
    assert "time.dt" in capsys.readouterr().err


def test_unknown_family_exit_2(tmp_path, capsys):
    import yaml

    raw = builtin("heat").to_dict()
    raw["system"]["theta"] = {"family": "quadratic"}
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(yaml.safe_dump(raw))
    assert _run(tmp_path, "simulate", "--config", str(cfg)) == 2
    err = capsys.readouterr().err
    assert "constant, kink, linear, sinusoidal" in err


def test_bad_flags_exit_2(tmp_path):
    assert _run(tmp_path, "filter", "--config", "builtin:heat", "--snapshot-every", "0") == 2
    assert _run(tmp_path, "filter", "--config", "builtin:nope") == 2
    assert _run(tmp_path, "filter", "--config", str(tmp_path / "missing.yaml")) == 2
    with pytest.raises(SystemExit) as exc:
        main(["filter"])
    assert exc.value.code == 2


def test_filter_heat_matches_golden(tmp_path):
    # golden written by tests/data/make_heat_golden.py with a dense solver
    assert _run(tmp_path, "filter", "--config", "builtin:heat") == 0
    got = np.loadtxt(tmp_path / "density_final_seed0.csv", delimiter=",", skiprows=1)
    ref = np.loadtxt(GOLDEN, delimiter=",", skiprows=1)
    np.testing.assert_array_equal(got[:, 0], ref[:, 0])
    assert np.abs(got[:, 1] - ref[:, 1]).max() <= 1e-8


def test_filter_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert _run(d, "filter", "--config", "builtin:cross_term", "--seed", "2") == 0
    assert _bytes(a) == _bytes(b)
    assert {"density_seed2.bin", "stream_seed2.bin", "streams_seed2.csv",
            "density_final_seed2.csv", "path_seed2.bin", "path_seed2.csv"} == set(_bytes(a))


def test_filter_mass_collapse_exit_3(tmp_path):
    # filtering a B = 0 path with a huge constant B makes 1 + c dw_hat negative
    cfg = _yaml(tmp_path, builtin("heat").replace(system={"B": {"family": "constant", "value": [1000.0]}}))
    out = tmp_path / "o"
    assert _run(out, "simulate", "--config", "builtin:heat") == 0
    assert _run(out, "filter", "--config", cfg) == 3
    dump = json.loads((out / "failure_seed0.json").read_text())
    jsonschema.validate(dump, FAILURE_SCHEMA)
    assert dump["error"] == "MassCollapseError"
    assert dump["command"] == "filter"


def test_diagnose_uninformative(tmp_path):
    assert _run(tmp_path, "filter", "--config", "builtin:heat", "--snapshot-every", "1") == 0
    assert _run(tmp_path, "diagnose", "--config", "builtin:heat") == 0
    report = json.loads((tmp_path / "report_seed0.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["mass_residual_sup"] <= 1e-8
    first = (tmp_path / "report_seed0.json").read_bytes()
    assert _run(tmp_path, "diagnose", "--config", "builtin:heat") == 0
    assert (tmp_path / "report_seed0.json").read_bytes() == first


def test_diagnose_missing_inputs_exit_3(tmp_path):
    assert _run(tmp_path, "diagnose", "--config", "builtin:heat") == 3


def test_diagnose_grid_mismatch_exit_2(tmp_path):
    assert _run(tmp_path, "filter", "--config", "builtin:heat") == 0
    cfg = _yaml(tmp_path, builtin("heat").replace(grid={"h": 0.04}))
    assert _run(tmp_path, "diagnose", "--config", cfg) == 2


def test_compare_self_is_zero(tmp_path):
    assert _run(tmp_path, "filter", "--config", "builtin:heat") == 0
    ref = str(tmp_path / "density_seed0.bin")
    assert _run(tmp_path, "compare", "--config", "builtin:heat", "--reference", ref) == 0
    out = json.loads((tmp_path / "compare_seed0.json").read_text())
    jsonschema.validate(out, COMPARE_SCHEMA)
    assert out["reference"]["l1_final"] == 0.0


def _tent_traj(grid, center):
    x = grid.axes[0]
    f = np.maximum(0.0, 1.0 - np.abs(x - center))[None, :]
    K = 500
    return FilterTrajectory(grid, 1e-3, 1, 1e-3 * np.arange(K + 1), np.ones(K + 1), np.zeros(K + 1),
                            np.ones(K + 1), np.zeros((K + 1, 1)), np.zeros((K, 1)), np.array([K]), f)


def test_compare_disjoint_supports_is_two(tmp_path):
    grid = builtin("heat").grid_spec(1)
    write_density_binary(_tent_traj(grid, -3.0), tmp_path / "density_seed0.bin")
    write_stream_binary(_tent_traj(grid, -3.0), tmp_path / "stream_seed0.bin")
    write_density_binary(_tent_traj(grid, 3.0), tmp_path / "ref.bin")
    assert _run(tmp_path, "compare", "--config", "builtin:heat", "--reference",
                str(tmp_path / "ref.bin")) == 0
    out = json.loads((tmp_path / "compare_seed0.json").read_text())
    assert out["reference"]["l1_final"] == pytest.approx(2.0, abs=1e-12)


def test_compare_reference_grid_mismatch_exit_2(tmp_path):
    assert _run(tmp_path, "filter", "--config", "builtin:heat") == 0
    other = GridSpec.symmetric(6.0, 0.04, 1)
    write_density_binary(_tent_traj(other, 0.0), tmp_path / "ref.bin")
    assert _run(tmp_path, "compare", "--config", "builtin:heat", "--reference",
                str(tmp_path / "ref.bin")) == 2


def test_compare_kalman_benchmark(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert _run(d, "compare", "--config", "builtin:kalman", "--seed", "4") == 0
    assert _bytes(a) == _bytes(b)
    out = json.loads((a / "compare_seed4.json").read_text())
    jsonschema.validate(out, COMPARE_SCHEMA)
    assert out["kalman"]["max_scaled_mean_delta"] <= 0.05
    assert out["kalman"]["max_var_rel_error"] <= 0.10
    zak = (a / "moments_zakai_seed4.csv").read_text().splitlines()
    kal = (a / "moments_kalman_seed4.csv").read_text().splitlines()
    assert zak[0] == kal[0] == "t,mean_1,cov_11"
    assert len(zak) == len(kal) == 1002


def test_compare_particles(tmp_path):
    cfg = builtin("cross_term").replace(oracle={"particles": 2000}, run={"snapshot_every": 250})
    path = _yaml(tmp_path, cfg)
    assert _run(tmp_path, "compare", "--config", path) == 0
    out = json.loads((tmp_path / "compare_seed0.json").read_text())
    jsonschema.validate(out, COMPARE_SCHEMA)
    assert out["particles"]["N"] == 2000
    assert len(out["particles"]["times"]) == 5
    assert out["particles"]["l1_final"] < 0.5


def test_console_script():
    res = subprocess.run([sys.executable, "-m", "zakaifilter.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("simulate", "filter", "diagnose", "compare"):
        assert sub in res.stdout
    res = subprocess.run([sys.executable, "-m", "zakaifilter.cli", "explode"], capture_output=True)
    assert res.returncode == 2
