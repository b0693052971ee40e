import filecmp

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from morphmesh import controller as ctl
from morphmesh import kinematics as kin
from morphmesh import shape as shp
from morphmesh import sim


def target3():
    return shp.builtin("mesh3x3_target", amplitude=0.1, sx=0.1, sy=0.1, anchor=(0.0, 0.0))


def test_zero_rates_leave_state_unchanged(mesh3, pattern3):
    topo, state = mesh3
    new = sim.step(topo, state, pattern3, np.zeros(12), 0.01)
    assert np.abs(new.positions - state.positions).max() <= 1e-12
    assert np.abs(new.quaternions - state.quaternions).max() <= 1e-12


@pytest.mark.parametrize("integrator", ["rk45", "rk4"])
def test_single_joint_rotates_at_commanded_rate(integrator):
    topo, state = kin.build_mesh(1, 2)
    rows = [6, 7, 8]
    w, T = 0.3, 0.5
    cfg = sim.SimConfig(integrator=integrator, rk4_substeps=4)
    cur = state
    for _ in range(50):
        cur = sim.step(topo, cur, rows, [0.0, 0.0, w], T / 50, cfg)
    Rrel = kin.relative_rotations(topo, cur)[0]
    rv = Rotation.from_matrix(Rrel).as_rotvec()
    assert np.allclose(rv, [0, 0, w * T], atol=1e-6)
    assert np.allclose(np.linalg.norm(cur.quaternions, axis=1), 1, atol=1e-9)
    assert np.abs(kin.holonomic_residual(topo, cur)).max() < 1e-6


def test_actuation_noise_bounds():
    spec = sim.NoiseSpec(kind="actuation")
    rng = np.random.default_rng(0)
    assert not sim.apply_actuation_noise(np.zeros(5), spec, rng).any()
    pi = np.deg2rad(5.0) * np.array([1, -1, 1, -1, 0.5])
    for _ in range(200):
        out = sim.apply_actuation_noise(pi, spec, rng)
        assert np.all(np.abs(out) <= np.abs(pi))
        assert np.all(np.sign(out) == np.sign(pi))
        assert np.all(np.abs(out) >= 0.8 * np.abs(pi) - 1e-15)
    # off by default
    assert np.array_equal(sim.apply_actuation_noise(pi, sim.NoiseSpec(), rng), pi)


def test_actuation_noise_mean_matches_truncated_gaussian():
    spec = sim.NoiseSpec(kind="actuation")
    rng = np.random.default_rng(1)
    factors = sim.apply_actuation_noise(np.ones(100_000), spec, rng)
    # independent Monte-Carlo oracle: rejection-sample the truncated Gaussian
    ref_rng = np.random.default_rng(2)
    eta = ref_rng.normal(0, spec.actuation_std, size=400_000)
    eta = eta[np.abs(eta) <= spec.actuation_max][:100_000]
    reduction, ref = 1 - factors.mean(), np.abs(eta).mean()
    assert abs(reduction - ref) <= 0.01 * ref
    assert abs(factors.mean() - sim.expected_actuation_factor(spec)) <= 0.01 * (1 - factors.mean())


def test_state_noise(mesh3, pattern3):
    topo, state = mesh3
    rng = np.random.default_rng(3)
    same = sim.apply_state_noise(topo, state, pattern3, sim.NoiseSpec(kind="state", state_max=0.0), rng)
    assert np.array_equal(same.positions, state.positions)
    spec = sim.NoiseSpec(kind="state", state_max=np.deg2rad(0.05))
    noisy = sim.apply_state_noise(topo, state, pattern3, spec, rng)
    assert np.abs(kin.holonomic_residual(topo, noisy)).max() < 1e-6
    assert np.abs(noisy.positions[0] - state.positions[0]).max() == 0.0
    # a single actuated axis spreads into passive joints
    one = np.zeros(12)
    one[0] = np.deg2rad(0.05)
    nu = kin.damped_velocity_map(topo, state, pattern3, rhs=one)
    moved = kin.project_to_manifold(topo, kin.displace(state, nu.reshape(-1, 6)), tol=1e-10)
    R0, R1 = kin.relative_rotations(topo, state), kin.relative_rotations(topo, moved)
    changed = [j for j in range(topo.n_joints)
               if np.linalg.norm(Rotation.from_matrix(R0[j].T @ R1[j]).as_rotvec()) > 1e-8]
    actuated_joints = {(r - 6) // 3 for r in pattern3[:1]}
    assert len(set(changed) - actuated_joints) >= 2


def test_metrics_examples():
    f0 = shp.ShapeField("0")
    st = kin.MeshState([[0.0, 0.0, 0.01]], [[1.0, 0.0, 0.0, 0.0]])
    m = sim.metrics(st, f0, 0.0)
    assert m.e_O[0] == 0.0
    assert m.e_P[0] == pytest.approx(0.01)
    c = np.cos(np.pi / 4)
    side = kin.MeshState([[0.0, 0.0, 0.0]], [[c, c, 0.0, 0.0]])
    assert np.rad2deg(sim.metrics(side, f0, 0.0).e_O[0]) == pytest.approx(90.0)


def test_metrics_percentiles():
    st = kin.MeshState(np.column_stack([np.zeros(11), np.zeros(11), np.arange(11) * 1e-3]),
                       np.tile([1.0, 0, 0, 0], (11, 1)))
    m = sim.metrics(st, shp.ShapeField("0"), 0.0)
    assert m.e_P_summary == pytest.approx((5e-3, 1e-3, 9e-3))


def test_rng_streams_are_split_and_reproducible():
    a_ga, a_noise = sim.rng_streams(42)
    b_ga, b_noise = sim.rng_streams(42)
    assert a_ga.random() == b_ga.random() and a_noise.random() == b_noise.random()
    ga, noise = sim.rng_streams(42)
    assert ga.random() != noise.random()
    assert sim.ga_seed(42) == sim.ga_seed(42) != sim.ga_seed(43)


def short_run(mesh3, pattern3, noise="none", seed=0):
    topo, state = mesh3
    return sim.run(topo, state, pattern3, target3(), ctl.ControllerConfig(),
                   sim.SimConfig(duration=0.3, noise=sim.NoiseSpec(kind=noise), rng_seed=seed))


def test_run_invariants(mesh3, pattern3):
    topo, _ = mesh3
    res = short_run(mesh3, pattern3, noise="actuation")
    assert len(res.frames) == 31
    assert res.max_rate <= np.deg2rad(5.0) + 1e-9
    assert res.max_residual <= 1e-4
    assert np.abs(np.linalg.norm(res.quaternions, axis=2) - 1).max() <= 1e-9
    fixed = res.positions[:, 0]
    assert np.abs(fixed - fixed[0]).max() <= 1e-12
    assert res.frames[-1].e_O_mean < res.frames[0].e_O_mean


def test_run_is_bit_identical_per_seed(mesh3, pattern3, tmp_path):
    a = short_run(mesh3, pattern3, noise="actuation", seed=5)
    b = short_run(mesh3, pattern3, noise="actuation", seed=5)
    sim.write_metrics_csv(tmp_path / "a.csv", a, 12)
    sim.write_metrics_csv(tmp_path / "b.csv", b, 12)
    assert filecmp.cmp(tmp_path / "a.csv", tmp_path / "b.csv", shallow=False)
    c = short_run(mesh3, pattern3, noise="actuation", seed=6)
    assert not np.array_equal(a.series("e_O_mean"), c.series("e_O_mean"))


def test_output_files(mesh3, pattern3, tmp_path):
    topo, _ = mesh3
    res = short_run(mesh3, pattern3)
    sim.write_trajectory_csv(tmp_path / "traj.csv", topo, res)
    sim.write_metrics_csv(tmp_path / "metrics.csv", res, 12)
    sim.write_plot_data(tmp_path / "plot.csv", res, every=10)
    traj = (tmp_path / "traj.csv").read_text().splitlines()
    assert traj[0].startswith("#")
    assert traj[1].split(",")[:8] == ["t", "1_1_px", "1_1_py", "1_1_pz", "1_1_qw", "1_1_qx", "1_1_qy", "1_1_qz"]
    assert len(traj) == 2 + 31
    data = np.loadtxt(tmp_path / "metrics.csv", delimiter=",", skiprows=2)
    assert data.shape == (31, 7 + 12)
    assert np.allclose(data[:, 1], res.series("e_O_mean"))
    # shortest round-trip floats
    assert float(traj[2].split(",")[3]) == res.positions[0, 0, 2]
    assert len((tmp_path / "plot.csv").read_text().splitlines()) == 2 + 4
