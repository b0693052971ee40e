"""Closed-loop kinematic simulation, noise models and error metrics.

Motor rates are held constant over each control period. Within a period
the node poses follow ``nu = Z_v Z_act^{-1} π`` and are integrated either
with an adaptive Dormand-Prince scheme or with fixed-step RK4.
"""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.stats import truncnorm

from . import kinematics as kin
from . import se3
from .controller import MorphController
from .errors import IntegratorStepFailure, MorphMeshError

log = logging.getLogger(__name__)

NOISE_KINDS = ("none", "actuation", "state")


@dataclass
class NoiseSpec:
    kind: str = "none"
    # actuation: η ~ N(0, actuation_std) truncated to |η| ≤ actuation_max
    actuation_max: float = 0.2
    actuation_std: float = 0.1
    # state: uniform per-axis angle in [-state_max, state_max] radians
    state_max: float = np.deg2rad(0.05)

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}")
        if not 0.0 <= self.actuation_max <= 1.0:
            raise ValueError("actuation_max must lie in [0, 1]")
        if self.actuation_std <= 0 or self.state_max < 0:
            raise ValueError("noise amplitudes must be non-negative")


@dataclass
class SimConfig:
    duration: float = 8.0
    control_dt: float = 0.01
    integrator: str = "rk45"
    abs_tol: float = 1e-8
    rel_tol: float = 1e-8
    rk4_substeps: int = 1
    baumgarte_gain: float = 10.0
    projection_tol: float = 1e-6
    damping: float = 1e-6
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    rng_seed: int = 0
    record_every: int = 1

    def __post_init__(self):
        if self.duration <= 0 or self.control_dt <= 0:
            raise ValueError("duration and control_dt must be positive")
        if self.abs_tol <= 0 or self.rel_tol <= 0 or self.projection_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.integrator not in ("rk45", "rk4"):
            raise ValueError("integrator must be 'rk45' or 'rk4'")
        if self.rk4_substeps < 1 or self.record_every < 1:
            raise ValueError("rk4_substeps and record_every must be positive")


@dataclass
class MetricsFrame:
    t: float
    e_O: np.ndarray
    e_P: np.ndarray
    pi: np.ndarray

    @staticmethod
    def _summary(v):
        return float(np.mean(v)), float(np.percentile(v, 10)), float(np.percentile(v, 90))

    @property
    def e_O_summary(self):
        return self._summary(self.e_O)

    @property
    def e_P_summary(self):
        return self._summary(self.e_P)

    @property
    def e_O_mean(self):
        return float(np.mean(self.e_O))

    @property
    def e_P_mean(self):
        return float(np.mean(self.e_P))


@dataclass
class SimResult:
    times: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray
    frames: list
    max_residual: float
    min_alignment_margin: float
    max_rate: float
    final_state: kin.MeshState = None

    def series(self, name):
        return np.array([getattr(f, name) for f in self.frames])


def rng_streams(seed):
    """Independent generators for the GA and for noise, split from one seed."""
    ga, noise = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(ga), np.random.default_rng(noise)


def ga_seed(seed):
    """Integer seed of the GA stream derived from a scenario seed."""
    return int(np.random.SeedSequence(seed).spawn(2)[0].generate_state(1, dtype=np.uint64)[0])


def metrics(state, shape, t, pi=None):
    """Orientation and height errors of every node against the target surface."""
    z = state.rotations[:, :, 2]
    x, y = state.positions[:, 0], state.positions[:, 1]
    n = shape.normals(x, y, t)
    cosang = np.clip(np.sum(z * n, axis=1), -1.0, 1.0)
    e_O = np.abs(np.arccos(cosang))
    e_P = np.abs(state.positions[:, 2] - shape.value(x, y, t))
    return MetricsFrame(float(t), e_O, e_P, np.zeros(0) if pi is None else np.asarray(pi, dtype=float))


def apply_actuation_noise(pi, spec, rng):
    """Friction-like slowdown ``π (1 - |η|)``; never speeds a motor up."""
    pi = np.asarray(pi, dtype=float)
    if spec.kind != "actuation" or pi.size == 0:
        return pi.copy()
    bound = spec.actuation_max / spec.actuation_std
    eta = truncnorm.rvs(-bound, bound, scale=spec.actuation_std, size=pi.shape, random_state=rng)
    return pi * (1.0 - np.minimum(np.abs(eta), spec.actuation_max))


def expected_actuation_factor(spec):
    """Mean of ``1 - |η|`` for the truncated Gaussian."""
    bound = spec.actuation_max / spec.actuation_std
    dist = truncnorm(-bound, bound, scale=spec.actuation_std)
    return 1.0 - dist.expect(np.abs)


def apply_state_noise(topology, state, rows, spec, rng):
    """Controller's view of the state after jittering every actuated joint."""
    if spec.kind != "state" or spec.state_max == 0 or len(rows) == 0:
        return state.copy()
    dtheta = rng.uniform(-spec.state_max, spec.state_max, size=len(rows))
    nu = kin.damped_velocity_map(topology, state, rows, rhs=dtheta)
    noisy = kin.displace(state, nu.reshape(-1, 6))
    noisy = kin.project_to_manifold(topology, noisy, tol=1e-10, max_iter=50, accept=kin.DEFAULT_DRIFT_TOL)
    return _pin_fixed(topology, noisy)


def _pin_fixed(topology, state):
    for k, node in enumerate(topology.fixed_nodes):
        state.positions[node] = topology.fixed_positions[k]
        state.quaternions[node] = topology.fixed_quaternions[k]
    return state


def _rhs(topology, rows, pi, gain, damping):
    N = topology.n_nodes

    def f(_t, y):
        Y = y.reshape(N, 7)
        q = Y[:, 3:]
        st = kin.MeshState(Y[:, :3], se3.quat_normalize(q))
        nu = kin.damped_velocity_map(topology, st, rows, rhs=pi, damping=damping).reshape(N, 6)
        dY = np.empty_like(Y)
        dY[:, :3] = nu[:, :3]
        dY[:, 3:] = se3.quat_derivative(q, nu[:, 3:], gain)
        return dY.ravel()

    return f


def step(topology, state, rows, pi, dt, cfg=None):
    """Advance the poses by ``dt`` with motor rates ``pi`` held constant."""
    cfg = cfg or SimConfig()
    pi = np.asarray(pi, dtype=float)
    N = topology.n_nodes
    if len(rows) == 0 or not np.any(pi):
        return state.copy()
    f = _rhs(topology, rows, pi, cfg.baumgarte_gain, cfg.damping)
    y0 = np.hstack([state.positions, state.quaternions]).ravel()
    if cfg.integrator == "rk45":
        sol = solve_ivp(f, (0.0, dt), y0, method="RK45", rtol=cfg.rel_tol, atol=cfg.abs_tol, first_step=dt)
        if sol.status != 0 or (len(sol.t) > 1 and np.min(np.diff(sol.t)) < 1e-9):
            raise IntegratorStepFailure(f"adaptive step failed: {sol.message}")
        y = sol.y[:, -1]
    else:
        y = y0
        h = dt / cfg.rk4_substeps
        for i in range(cfg.rk4_substeps):
            k1 = f(i * h, y)
            k2 = f(i * h + h / 2, y + h / 2 * k1)
            k3 = f(i * h + h / 2, y + h / 2 * k2)
            k4 = f(i * h + h, y + h * k3)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    Y = y.reshape(N, 7)
    new = kin.MeshState(Y[:, :3].copy(), se3.quat_normalize(Y[:, 3:]))
    _pin_fixed(topology, new)
    g = kin.holonomic_residual(topology, new)
    if np.abs(g).max(initial=0.0) > cfg.projection_tol:
        new = kin.project_to_manifold(topology, new, tol=1e-10, steps=20)
        _pin_fixed(topology, new)
    return new


def alignment_margin(topology, state, alpha):
    """Smallest ``e_aᵀ R_rel e_a - cos α`` over all joints."""
    Rrel = kin.relative_rotations(topology, state)
    if len(Rrel) == 0:
        return np.inf
    axes = np.array([0 if jt.direction == kin.ROW else 1 for jt in topology.joints])
    return float(np.min(Rrel[np.arange(len(axes)), axes, axes]) - np.cos(alpha))


def run(topology, state, rows, shape, controller_cfg, sim_cfg, progress=None):
    """Closed-loop simulation; metrics are recorded at every control tick."""
    rows = tuple(rows)
    controller = MorphController(topology, rows, shape, controller_cfg)
    _, noise_rng = rng_streams(sim_cfg.rng_seed)
    n_ticks = int(round(sim_cfg.duration / sim_cfg.control_dt))
    times, pos, quat, frames = [], [], [], []
    max_res, min_margin, max_rate = 0.0, np.inf, 0.0
    cur = state.copy()
    pi = np.zeros(len(rows))
    for k in range(n_ticks + 1):
        t = k * sim_cfg.control_dt
        if k < n_ticks:
            view = apply_state_noise(topology, cur, rows, sim_cfg.noise, noise_rng)
            try:
                pi = controller(view, t)
            except MorphMeshError as exc:
                raise type(exc)(f"t={t:.2f} s: {exc}") from exc
        max_rate = max(max_rate, float(np.max(np.abs(pi), initial=0.0)))
        max_res = max(max_res, float(np.abs(kin.holonomic_residual(topology, cur)).max(initial=0.0)))
        min_margin = min(min_margin, alignment_margin(topology, cur, controller_cfg.alpha))
        if k % sim_cfg.record_every == 0 or k == n_ticks:
            times.append(t)
            pos.append(cur.positions.copy())
            quat.append(cur.quaternions.copy())
            frames.append(metrics(cur, shape, t, pi))
        if progress is not None:
            progress(k, n_ticks, frames[-1])
        if k == n_ticks:
            break
        applied = apply_actuation_noise(pi, sim_cfg.noise, noise_rng)
        try:
            cur = step(topology, cur, rows, applied, sim_cfg.control_dt, sim_cfg)
        except MorphMeshError as exc:
            raise type(exc)(f"t={t:.2f} s: {exc}") from exc
    return SimResult(np.array(times), np.array(pos), np.array(quat), frames,
                     max_res, min_margin, max_rate, cur)


# ---------------------------------------------------------------------------
# output files

def _fmt(v):
    return repr(float(v))


def write_trajectory_csv(path, topology, result):
    header = ["t"]
    for k in range(topology.n_nodes):
        i, j = topology.node_label(k)
        header += [f"{i}_{j}_{c}" for c in ("px", "py", "pz", "qw", "qx", "qy", "qz")]
    with open(path, "w", newline="") as fh:
        fh.write("# positions in m, quaternions (w, x, y, z)\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, P, Q in zip(result.times, result.positions, result.quaternions):
            row = [_fmt(t)]
            for p, q in zip(P, Q):
                row += [_fmt(v) for v in p] + [_fmt(v) for v in q]
            w.writerow(row)


def write_metrics_csv(path, result, dof):
    header = ["t", "eO_mean", "eO_p10", "eO_p90", "eP_mean", "eP_p10", "eP_p90"]
    header += [f"pi_{i + 1}" for i in range(dof)]
    with open(path, "w", newline="") as fh:
        fh.write("# eO in rad, eP in m, pi in rad/s\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for f in result.frames:
            pi = f.pi if len(f.pi) == dof else np.zeros(dof)
            w.writerow([_fmt(f.t)] + [_fmt(v) for v in f.e_O_summary + f.e_P_summary] + [_fmt(v) for v in pi])


def write_plot_data(path, result, every=10):
    """Downsampled mean and 10-90 percentile bands in degrees and millimetres."""
    with open(path, "w", newline="") as fh:
        fh.write("# eO in deg, eP in mm\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "eO_mean_deg", "eO_p10_deg", "eO_p90_deg", "eP_mean_mm", "eP_p10_mm", "eP_p90_mm"])
        for f in result.frames[::every]:
            o = np.rad2deg(f.e_O_summary)
            p = 1e3 * np.array(f.e_P_summary)
            w.writerow([_fmt(f.t)] + [_fmt(v) for v in o] + [_fmt(v) for v in p])
