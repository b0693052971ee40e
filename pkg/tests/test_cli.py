import json
import subprocess
import sys

import numpy as np
import pytest

from morphmesh import cli, config
from morphmesh import kinematics as kin
from morphmesh import verify
from morphmesh.controller import ControllerConfig
from morphmesh.errors import ConfigError

FAST_GA = {"max_generations": 300, "stall_generations": 50}


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_analyze_3x3(capsys):
    assert cli.main(["analyze", "--preset", "3x3_ideal"]) == 0
    out = capsys.readouterr().out
    assert "nodes            9" in out and "joints           12" in out and "dof              12" in out


def test_analyze_1x2_flat(tmp_path, capsys):
    path = write(tmp_path, {"mesh": {"n": 1, "m": 2}})
    assert cli.main(["analyze", "--config", path, "--out", str(tmp_path / "o")]) == 0
    doc = json.loads((tmp_path / "o" / "analysis.json").read_text())
    assert doc["nodes"] == 2 and doc["joints"] == 1 and doc["state_dimension"] == 14
    assert (tmp_path / "o" / "config.resolved.json").exists()


def test_place_is_reproducible(tmp_path, capsys):
    path = write(tmp_path, {"mesh": {"init_surface": {"name": "paraboloid", "amplitude_m": 0.06,
                                                      "sx_m": 0.1, "sy_m": 0.1}}, "ga": FAST_GA})
    for out in ("a", "b"):
        assert cli.main(["place", "--config", path, "--seed", "7", "--out", str(tmp_path / out), "--quiet"]) == 0
    a = (tmp_path / "a" / "pattern.json").read_bytes()
    assert a == (tmp_path / "b" / "pattern.json").read_bytes()
    doc = json.loads(a)
    assert doc["dof"] == 12 and len(doc["rows"]) == 12 and doc["seed"] == 7
    assert "motors per joint" in capsys.readouterr().out


def test_place_dof_zero(tmp_path, capsys):
    path = write(tmp_path, {"mesh": {"n": 1, "m": 1}})
    assert cli.main(["place", "--config", path, "--out", str(tmp_path / "o")]) == 0
    assert "no motors needed" in capsys.readouterr().out


def test_simulate_short(tmp_path, capsys):
    out = tmp_path / "sim"
    path = write(tmp_path, {"ga": FAST_GA})
    assert cli.main(["simulate", "--preset", "3x3_ideal", "--config", path, "--duration-s", "0.2",
                     "--out", str(out), "--quiet"]) == 0
    for name in ("metrics.csv", "trajectory.csv", "plot_data.csv", "report.json", "pattern.json",
                 "config.resolved.json"):
        assert (out / name).exists(), name
    rep = json.loads((out / "report.json").read_text())
    assert rep["dof"] == 12 and rep["joints"] == 12
    assert rep["max_motor_rate_deg_s"] <= 5.0 + 1e-9
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert rep["config_hash"] == config.config_hash(resolved)
    # reuse the pattern file
    out2 = tmp_path / "sim2"
    assert cli.main(["simulate", "--preset", "3x3_ideal", "--pattern", str(out / "pattern.json"),
                     "--duration-s", "0.2", "--out", str(out2), "--quiet"]) == 0
    assert (out / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()


def test_config_errors_exit_2(tmp_path, capsys):
    bad = write(tmp_path, {"mesh": {"n": 3, "colour": "red"}})
    assert cli.main(["analyze", "--config", bad]) == 2
    assert "mesh.colour" in capsys.readouterr().err
    bad = write(tmp_path, {"controller": {"k_per_s": "fast"}})
    assert cli.main(["analyze", "--config", bad]) == 2
    assert cli.main(["analyze", "--preset", "nope"]) == 2
    assert cli.main(["analyze", "--config", str(tmp_path / "missing.json")]) == 2
    bad = write(tmp_path, {"shape": {"expression": "x +* y"}})
    assert cli.main(["simulate", "--config", bad, "--out", str(tmp_path / "o")]) == 2
    assert "shape" in capsys.readouterr().err


def test_threads_env(monkeypatch, capsys):
    monkeypatch.setenv("MORPHMESH_THREADS", "zero")
    assert cli.main(["presets"]) == 2
    monkeypatch.setenv("MORPHMESH_THREADS", "1")
    assert cli.main(["presets"]) == 0
    assert "20x20_short" in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "morphmesh", "presets"], capture_output=True, text=True)
    assert res.returncode == 0 and "4x8_ironcub_piecewise" in res.stdout


def test_config_hash_ignores_key_order():
    a = config.resolve({"seed": 3, "mesh": {"n": 4, "m": 2}})
    b = json.loads(json.dumps(a, sort_keys=True)[::1])
    b = dict(reversed(list(b.items())))
    assert config.config_hash(a) == config.config_hash(b)
    assert config.config_hash(a) != config.config_hash(config.resolve({"seed": 4}))


def test_presets_resolve():
    for name in config.PRESETS:
        cfg = config.resolve(preset=name)
        assert cfg["name"] == name
    with pytest.raises(ConfigError) as info:
        config.resolve({"sim": {"noise": {"kind": "loud"}}})
    assert info.value.path == "sim.noise.kind"


def test_verify_fresh_flat_mesh_passes(tmp_path, capsys):
    path = write(tmp_path, {"mesh": {"n": 3, "m": 3}})
    assert cli.main(["verify", "--config", path]) == 0
    assert json.loads(capsys.readouterr().out)["passed"] is True


def test_verify_flags_corrupted_state(tmp_path, capsys):
    topo, state = kin.build_mesh(3, 3)
    bad = state.copy()
    bad.positions[4, 2] += 0.01
    snap = tmp_path / "state.json"
    snap.write_text(json.dumps(bad.snapshot(topo)))
    path = write(tmp_path, {"mesh": {"n": 3, "m": 3}})
    assert cli.main(["verify", "--config", path, "--state", str(snap)]) == 1
    doc = json.loads(capsys.readouterr().out)
    assert "constraint_residual" in doc["failed"]
    bad = state.copy()
    bad.quaternions[2] *= 1.01
    snap.write_text(json.dumps(bad.snapshot(topo)))
    assert cli.main(["verify", "--config", path, "--state", str(snap)]) == 1
    assert "unit_quaternions" in json.loads(capsys.readouterr().out)["failed"]


def test_verify_random_chains():
    from morphmesh import shape as shp
    surf = shp.builtin("paraboloid", amplitude=0.05, sx=0.1, sy=0.1)
    topo, state = kin.build_mesh(1, 3, initial_surface=surf)
    cfg = ControllerConfig()
    for seed in range(100):
        rng = np.random.default_rng(seed)
        st = verify.random_feasible(topo, state, rng, angle=0.2)
        res = verify.run_checks(topo, st, cfg, samples=0, seed=seed)
        assert res["passed"], (seed, res["failed"])
