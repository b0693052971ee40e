"""Normal-alignment controller: reference angular velocities plus a per-tick QP.

Every node should turn its local z-axis onto the desired surface normal.
The reference rate of a node is

    ω* = S(n) ṅ + (k + σ̇/σ) z × n + λ z

and the motor rates ``π`` come from a least-squares fit of the node angular
velocities they induce, subject to a velocity box and a linearized
range-of-motion limit on each spherical joint.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kinematics as kin
from . import qp as qpsolver
from .errors import AntipodalNormal, MaxIterations, SingularMatrix

log = logging.getLogger(__name__)


@dataclass
class ControllerConfig:
    k: float = 2.0
    lam: float = 0.0
    sigma: float = 1.0
    sigma_rate: float = 0.0
    node_weights: object = 1.0
    omega_max: float = np.deg2rad(5.0)
    alpha: float = np.deg2rad(50.0)
    control_dt: float = 0.01
    damping: float = 1e-6
    w_norm: float = 1e-4
    w_slew: float = 1e-2
    qp: qpsolver.QPSettings = field(default_factory=qpsolver.QPSettings)

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("gain k must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.omega_max <= 0:
            raise ValueError("omega_max must be positive")
        if not 0.0 < self.alpha < np.pi:
            raise ValueError("alpha must lie in (0, pi)")
        if self.control_dt <= 0:
            raise ValueError("control_dt must be positive")
        if self.damping < 0 or self.w_norm < 0 or self.w_slew < 0:
            raise ValueError("damping and regularization weights must be non-negative")

    def weights(self, n_nodes):
        w = np.broadcast_to(np.asarray(self.node_weights, dtype=float), (n_nodes,)).copy()
        if np.any(w < 0):
            raise ValueError("node weights must be non-negative")
        return w


@dataclass
class QPProblem:
    hessian: np.ndarray
    gradient: np.ndarray
    C: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    box: float
    A: np.ndarray = None


def reference_omega(z_hat, n_hat, n_dot, cfg):
    """Reference angular velocity of one node (or of a stack of nodes)."""
    z = np.asarray(z_hat, dtype=float)
    n = np.asarray(n_hat, dtype=float)
    nd = np.asarray(n_dot, dtype=float)
    if np.any(np.abs(np.linalg.norm(z, axis=-1) - 1.0) > 1e-6) or np.any(np.abs(np.linalg.norm(n, axis=-1) - 1.0) > 1e-6):
        raise ValueError("z_hat and n_hat must be unit vectors")
    if np.any(np.sum(z * n, axis=-1) < -1.0 + 1e-9):
        raise AntipodalNormal("node axis is antipodal to the desired normal")
    gain = cfg.k + cfg.sigma_rate / cfg.sigma
    return np.cross(n, nd) + gain * np.cross(z, n) + cfg.lam * z


def damped_inverse(Z, damping):
    """``(ZᵀZ + damping I)⁻¹ Zᵀ``; the exact inverse when ``damping`` is 0."""
    Z = np.asarray(Z, dtype=float)
    if damping < 0:
        raise ValueError("damping must be non-negative")
    if damping == 0:
        try:
            inv = np.linalg.inv(Z)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrix("matrix is singular") from exc
        if not np.all(np.isfinite(inv)) or np.linalg.cond(Z) > 1e15:
            raise SingularMatrix("matrix is singular")
        return inv
    G = Z.T @ Z + damping * np.eye(Z.shape[1])
    return np.linalg.solve(G, Z.T)


def _perturb_antipodal(z, n, angle=1e-3):
    """Rotate ``z`` slightly about an axis orthogonal to ``n``."""
    axis = np.cross(n, np.eye(3)[np.argmin(np.abs(n))])
    axis /= np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    return c * z + s * np.cross(axis, z) + (1 - c) * axis * axis.dot(z)


def safe_reference(z, n, n_dot, cfg):
    """Per-node references with the antipodal case nudged off the singular point."""
    z = np.array(z, dtype=float)
    bad = np.sum(z * n, axis=1) < -1.0 + 1e-9
    for k in np.flatnonzero(bad):
        z[k] = _perturb_antipodal(z[k], n[k])
    return reference_omega(z, n, n_dot, cfg)


def motor_to_velocity(topology, state, rows, damping):
    """Map ``π -> nu`` through an orthonormal null basis and a damped ``Z_act`` inverse."""
    return kin.damped_velocity_map(topology, state, rows, damping=damping)


def assemble_qp(topology, state, rows, references, pi_prev, cfg, B=None):
    """Quadratic program in the motor rates for one control tick."""
    rows = list(rows)
    dof = len(rows)
    if B is None:
        B = motor_to_velocity(topology, state, rows, cfg.damping)
    N = topology.n_nodes
    ang = (6 * np.arange(N)[:, None] + 3 + np.arange(3)[None, :]).ravel()
    A = B[ang]
    w = np.repeat(cfg.weights(N), 3)
    refs = np.asarray(references, dtype=float).ravel()
    H = A.T @ (w[:, None] * A) + (cfg.w_norm + cfg.w_slew) * np.eye(dof)
    H = 0.5 * (H + H.T)
    pi_prev = np.zeros(dof) if pi_prev is None else np.asarray(pi_prev, dtype=float)
    grad = -A.T @ (w * refs) - cfg.w_slew * pi_prev

    # range of motion, forward-Euler in the joint's parent frame
    T = kin.relative_map_sparse(topology, state)
    Vrel = T @ B
    Rrel = kin.relative_rotations(topology, state)
    C = np.zeros((topology.n_joints, dof))
    lo = np.zeros(topology.n_joints)
    hi = np.zeros(topology.n_joints)
    cos_a = np.cos(cfg.alpha)
    for j, jt in enumerate(topology.joints):
        e = np.eye(3)[0 if jt.direction == kin.ROW else 1]
        r = Rrel[j] @ e
        C[j] = cfg.control_dt * np.cross(r, e) @ Vrel[6 + 3 * j:9 + 3 * j]
        align = e.dot(r)
        # a joint already past the limit may not get worse
        lo[j] = min(cos_a - align, 0.0)
        hi[j] = 1.0 - align
    return QPProblem(H, grad, C, lo, hi, cfg.omega_max, A)


def solve_qp(problem, warm_start=None, settings=None):
    """Solve a :class:`QPProblem`; the returned rates always respect the box."""
    n = len(problem.gradient)
    box = np.full(n, problem.box)
    res = qpsolver.solve(problem.hessian, problem.gradient, problem.C, problem.lower, problem.upper,
                         -box, box, x0=warm_start, settings=settings)
    return res.x


def control_tick(state, topology, rows, shape, t, pi_prev, cfg, n_prev=None):
    """Motor rates for one tick; returns ``(pi, normals)``.

    ``n_prev`` holds the desired normals of the previous tick for the
    backward difference of ``ṅ``; without it ``ṅ`` is taken as zero.
    """
    R = state.rotations
    z = R[:, :, 2]
    xy = state.positions[:, :2]
    n = shape.normals(xy[:, 0], xy[:, 1], t)
    n_dot = np.zeros_like(n) if n_prev is None else (n - n_prev) / cfg.control_dt
    refs = safe_reference(z, n, n_dot, cfg)
    if len(rows) == 0:
        return np.zeros(0), n
    problem = assemble_qp(topology, state, rows, refs, pi_prev, cfg)
    try:
        pi = solve_qp(problem, pi_prev, cfg.qp)
    except MaxIterations:
        log.warning("QP hit the iteration cap at t=%.3f; holding the previous rates", t)
        prev = np.zeros(len(rows)) if pi_prev is None else np.asarray(pi_prev)
        pi = np.clip(prev, -cfg.omega_max, cfg.omega_max)
    return pi, n


class MorphController:
    """Stateful wrapper that remembers ``π`` and the desired normals between ticks."""

    def __init__(self, topology, rows, shape, cfg=None):
        self.topology = topology
        self.rows = tuple(rows)
        self.shape = shape
        self.cfg = cfg or ControllerConfig()
        self.pi_prev = np.zeros(len(self.rows))
        self.n_prev = None

    def __call__(self, state, t):
        pi, n = control_tick(state, self.topology, self.rows, self.shape, t, self.pi_prev, self.cfg, self.n_prev)
        self.pi_prev, self.n_prev = pi, n
        return pi
