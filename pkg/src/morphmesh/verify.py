"""Invariant checks run by ``morphmesh verify``.

Every check returns ``(passed, detail)``; the summary lists the failing
check names so a corrupted state is reported by the invariant it breaks.
"""
import json

import numpy as np

from . import controller as ctl
from . import kinematics as kin
from . import qp
from . import se3

FD_NODE_LIMIT = 100


def load_state(path, topology):
    """State from a snapshot file: a list of ``{i, j, position, quaternion}`` records."""
    with open(path) as fh:
        records = json.load(fh)
    pos = np.zeros((topology.n_nodes, 3))
    quat = np.tile([1.0, 0.0, 0.0, 0.0], (topology.n_nodes, 1))
    for rec in records:
        k = topology.index(rec["i"], rec["j"])
        pos[k] = rec["position"]
        quat[k] = rec["quaternion"]
    return kin.MeshState(pos, quat)


def _check_quaternions(topology, state, cfg):
    err = float(np.abs(np.linalg.norm(state.quaternions, axis=1) - 1.0).max())
    return err <= 1e-9, {"max_norm_error": err}


def _check_residual(topology, state, cfg):
    g = float(np.abs(kin.holonomic_residual(topology, state)).max(initial=0.0))
    return g < 1e-6, {"max_residual_m": g}


def _check_fixed(topology, state, cfg):
    idx = list(topology.fixed_nodes)
    dp = float(np.abs(state.positions[idx] - topology.fixed_positions).max(initial=0.0))
    # q and -q are the same rotation
    dots = np.abs(np.sum(state.quaternions[idx] * topology.fixed_quaternions, axis=1))
    dq = float(np.abs(1.0 - dots).max(initial=0.0))
    return dp <= 1e-12 and dq <= 1e-12, {"position_error_m": dp, "orientation_error": dq}


def _check_state_dimension(topology, state, cfg):
    ok = topology.state_dimension == 7 * topology.n * topology.m == state.to_vector().size
    return ok, {"state_dimension": topology.state_dimension}


def _check_jacobian(topology, state, cfg):
    if topology.n_nodes > FD_NODE_LIMIT:
        return True, {"skipped": f"more than {FD_NODE_LIMIT} nodes"}
    J = kin.constraint_jacobian(topology, state)
    h = 1e-7
    worst = 0.0
    N = topology.n_nodes
    for c in range(6 * N):
        tw = np.zeros(6 * N)
        tw[c] = 1.0
        gp = kin.holonomic_residual(topology, kin.displace(state, tw, h))
        gm = kin.holonomic_residual(topology, kin.displace(state, tw, -h))
        worst = max(worst, float(np.abs((gp - gm) / (2 * h) - J[:, c]).max()))
    return worst < 1e-5, {"max_fd_error": worst}


def _check_null_space(topology, state, cfg):
    cs = kin.analyze_constraints(topology, state)
    scale = max(1.0, float(np.abs(cs.jacobian).max(initial=0.0)))
    jz = float(np.abs(cs.jacobian @ cs.Z_v).max(initial=0.0)) / scale
    ortho = float(np.abs(cs.Z_v.T @ cs.Z_v - np.eye(cs.dof)).max(initial=0.0))
    rel = float(np.abs(cs.Z_nu - cs.T @ cs.Z_v).max(initial=0.0))
    dof_ok = cs.dof == 6 * topology.n_nodes - cs.rank
    ok = jz < 1e-9 and ortho < 1e-9 and rel < 1e-12 and dof_ok
    return ok, {"dof": cs.dof, "rank": cs.rank, "J_Zv": jz, "orthonormality": ortho, "T_map": rel}


def _check_alignment(topology, state, cfg):
    Rrel = kin.relative_rotations(topology, state)
    if len(Rrel) == 0:
        return True, {"min_alignment": None}
    axes = np.array([0 if jt.direction == kin.ROW else 1 for jt in topology.joints])
    align = Rrel[np.arange(len(axes)), axes, axes]
    worst = float(align.min())
    return worst >= np.cos(cfg.alpha) - 1e-3, {"min_alignment": worst, "cos_alpha": float(np.cos(cfg.alpha))}


def _check_reference_equivariance(topology, state, cfg, rng):
    worst = 0.0
    for _ in range(20):
        z = rng.normal(size=3)
        z /= np.linalg.norm(z)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        nd = rng.normal(size=3)
        R = se3.quat_to_rotation(se3.quat_normalize(rng.normal(size=4)))
        a = R @ ctl.reference_omega(z, n, nd, cfg)
        b = ctl.reference_omega(R @ z, R @ n, R @ nd, cfg)
        worst = max(worst, float(np.abs(a - b).max()))
    return worst < 1e-12, {"max_error": worst}


def _check_damped_inverse(topology, state, cfg, rng):
    Z = rng.normal(size=(5, 5)) + 5 * np.eye(5)
    dev = float(np.abs(ctl.damped_inverse(Z, 1e-6) @ Z - np.eye(5)).max())
    exact = float(np.abs(ctl.damped_inverse(Z, 0.0) - np.linalg.inv(Z)).max())
    return dev < 1e-5 and exact < 1e-10, {"damped_deviation": dev, "exact_error": exact}


def _check_qp_box(topology, state, cfg, rng):
    worst = 0.0
    for _ in range(10):
        n = int(rng.integers(1, 7))
        M = rng.normal(size=(n, n))
        P = M @ M.T + 1e-3 * np.eye(n)
        q = 10 * rng.normal(size=n)
        box = np.full(n, cfg.omega_max)
        x = qp.solve(P, q, lb=-box, ub=box).x
        worst = max(worst, float(np.max(np.abs(x)) - cfg.omega_max))
    return worst <= 0.0, {"max_box_excess": worst}


STATE_CHECKS = {
    "unit_quaternions": _check_quaternions,
    "constraint_residual": _check_residual,
    "fixed_nodes": _check_fixed,
    "state_dimension": _check_state_dimension,
    "jacobian_finite_difference": _check_jacobian,
    "null_space": _check_null_space,
    "range_of_motion": _check_alignment,
}

GLOBAL_CHECKS = {
    "reference_equivariance": _check_reference_equivariance,
    "damped_inverse": _check_damped_inverse,
    "qp_box": _check_qp_box,
}


def random_feasible(topology, state, rng, angle=0.05):
    """Move along a random feasible direction and re-project."""
    cs = kin.analyze_constraints(topology, state)
    if cs.dof == 0:
        return state.copy()
    nu = cs.Z_v @ rng.normal(size=cs.dof)
    nu *= angle / max(np.abs(nu.reshape(-1, 6)[:, 3:]).max(), 1e-12)
    moved = kin.displace(state, nu.reshape(-1, 6))
    moved = kin.project_to_manifold(topology, moved, tol=1e-10, max_iter=50, accept=kin.DEFAULT_DRIFT_TOL)
    for k, node in enumerate(topology.fixed_nodes):
        moved.positions[node] = topology.fixed_positions[k]
        moved.quaternions[node] = topology.fixed_quaternions[k]
    return moved


def run_checks(topology, state, cfg, samples=0, seed=0):
    """Run every invariant on ``state`` (and on ``samples`` random feasible moves)."""
    rng = np.random.default_rng(seed)
    results = {}
    states = [("state", state)]
    cur = state
    for s in range(samples):
        cur = random_feasible(topology, cur, rng)
        states.append((f"sample_{s}", cur))
    for label, st in states:
        for name, fn in STATE_CHECKS.items():
            if label != "state" and name == "jacobian_finite_difference":
                continue
            key = name if label == "state" else f"{label}.{name}"
            try:
                ok, detail = fn(topology, st, cfg)
            except Exception as exc:  # a check that cannot run has failed
                ok, detail = False, {"error": f"{type(exc).__name__}: {exc}"}
            results[key] = {"passed": bool(ok), **detail}
    for name, fn in GLOBAL_CHECKS.items():
        ok, detail = fn(topology, state, cfg, rng)
        results[name] = {"passed": bool(ok), **detail}
    failed = sorted(k for k, v in results.items() if not v["passed"])
    return {"passed": not failed, "failed": failed, "checks": results}
