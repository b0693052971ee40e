"""Mesh construction and maximal-coordinate constraint kinematics.

Nodes are indexed row-major: node ``(i, j)`` (1-based) has flat index
``(i - 1) * m + (j - 1)``. In the stretched configuration node ``(i, j)``
sits at ``x = 2l (j - 1)``, ``y = 2l (i - 1)``.

Joint ordering: nodes are visited row-major and for each node ``(i, j)`` the
row-direction joint ``(i, j) -> (i, j + 1)`` is emitted first (if it exists),
then the column-direction joint ``(i, j) -> (i + 1, j)``. Row joints have
the joint centre at ``+l e1`` in the parent frame, column joints at ``+l e2``.

The velocity of node ``k`` occupies columns ``6k:6k+3`` (linear, world frame)
and ``6k+3:6k+6`` (angular, world frame) of every Jacobian.
"""
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import se3
from .errors import InitFitFailure, SingularActuation

ROW, COLUMN = "row", "column"

DEFAULT_DRIFT_TOL = 1e-6
DEFAULT_COND_BOUND = 1e10


@dataclass(frozen=True)
class Joint:
    parent: int
    child: int
    direction: str


@dataclass(frozen=True, eq=False)
class MeshTopology:
    n: int
    m: int
    l: float
    L: float
    joints: tuple
    fixed_nodes: tuple
    fixed_positions: np.ndarray
    fixed_quaternions: np.ndarray

    @property
    def n_nodes(self):
        return self.n * self.m

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def n_constraints(self):
        return 3 * self.n_joints + 6 * len(self.fixed_nodes)

    @property
    def n_relative(self):
        return 6 + 3 * self.n_joints

    @property
    def state_dimension(self):
        """Size of the position + quaternion state vector (7 per node)."""
        return 7 * self.n_nodes

    def index(self, i, j):
        return (i - 1) * self.m + (j - 1)

    def node_label(self, k):
        i, j = divmod(k, self.m)
        return (i + 1, j + 1)

    def joint_arrays(self):
        parents = np.array([jt.parent for jt in self.joints], dtype=int)
        children = np.array([jt.child for jt in self.joints], dtype=int)
        offsets = np.zeros((len(self.joints), 3))
        for k, jt in enumerate(self.joints):
            offsets[k, 0 if jt.direction == ROW else 1] = self.l
        return parents, children, offsets

    def axis_labels(self):
        """Human-readable label per row of the relative-velocity vector."""
        labels = [f"base:{c}" for c in ("vx", "vy", "vz", "wx", "wy", "wz")]
        for jt in self.joints:
            (pi, pj), (ci, cj) = self.node_label(jt.parent), self.node_label(jt.child)
            for ax in "xyz":
                labels.append(f"J({pi},{pj})-({ci},{cj}):{ax}")
        return labels

    def joint_of_row(self, row):
        """Joint index actuated by a row of the relative null basis (None for base rows)."""
        return None if row < 6 else (row - 6) // 3


@dataclass
class MeshState:
    positions: np.ndarray
    quaternions: np.ndarray
    velocities: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quaternions = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        if self.velocities is None:
            self.velocities = np.zeros((len(self.positions), 6))
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(-1, 6)

    @property
    def rotations(self):
        return se3.quat_to_rotation(self.quaternions, check=False)

    def copy(self):
        return MeshState(self.positions.copy(), self.quaternions.copy(), self.velocities.copy())

    def to_vector(self):
        return np.hstack([self.positions, self.quaternions]).ravel()

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float).reshape(-1, 7)
        return cls(x[:, :3].copy(), x[:, 3:].copy())

    def snapshot(self, topology):
        """One record per node: index, position and (w, x, y, z) quaternion."""
        rows = []
        for k in range(topology.n_nodes):
            i, j = topology.node_label(k)
            rows.append({"i": i, "j": j, "position": self.positions[k].tolist(),
                         "quaternion": self.quaternions[k].tolist()})
        return rows


@dataclass(eq=False)
class ConstraintSystem:
    residual: np.ndarray
    jacobian: np.ndarray
    singular_values: np.ndarray
    rank: int
    dof: int
    Z_v: np.ndarray
    Z_nu: np.ndarray
    T: np.ndarray = field(repr=False, default=None)


def make_topology(n, m, l=0.025, L=0.025, fixed_nodes=None):
    if n < 1 or m < 1:
        raise ValueError("mesh needs at least one row and one column")
    if l <= 0:
        raise ValueError("node half side l must be positive")
    joints = []
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            k = (i - 1) * m + (j - 1)
            if j < m:
                joints.append(Joint(k, k + 1, ROW))
            if i < n:
                joints.append(Joint(k, k + m, COLUMN))
    fixed = {0}
    for f in fixed_nodes or ():
        fixed.add(_flat_index(f, n, m))
    fixed = tuple(sorted(fixed))
    return MeshTopology(n, m, float(l), float(L), tuple(joints), fixed,
                        np.zeros((len(fixed), 3)), np.tile([1.0, 0, 0, 0], (len(fixed), 1)))


def _flat_index(node, n, m):
    if isinstance(node, (tuple, list)):
        i, j = node
        if not (1 <= i <= n and 1 <= j <= m):
            raise ValueError(f"node {node} outside {n}x{m} mesh")
        return (i - 1) * m + (j - 1)
    k = int(node)
    if not 0 <= k < n * m:
        raise ValueError(f"node index {k} outside {n}x{m} mesh")
    return k


def freeze_fixed(topology, state):
    """Return a topology whose fixed-node references are the poses in ``state``."""
    idx = list(topology.fixed_nodes)
    return replace(topology, fixed_positions=state.positions[idx].copy(),
                   fixed_quaternions=state.quaternions[idx].copy())


def flat_state(topology):
    n, m, l = topology.n, topology.m, topology.l
    jj, ii = np.meshgrid(np.arange(m), np.arange(n))
    pos = np.column_stack([2 * l * jj.ravel(), 2 * l * ii.ravel(), np.zeros(n * m)])
    quat = np.tile([1.0, 0.0, 0.0, 0.0], (n * m, 1))
    return MeshState(pos, quat)


def surface_guess(topology, surface, t=0.0):
    """Nodes sampled on ``z = f(x, y)`` at grid parameters, oriented by the tangent frame."""
    base = flat_state(topology)
    x, y = base.positions[:, 0], base.positions[:, 1]
    z = np.broadcast_to(surface.value(x, y, t), x.shape)
    fx, fy = surface.gradient(x, y, t)
    fx = np.broadcast_to(fx, x.shape)
    fy = np.broadcast_to(fy, x.shape)
    ex = np.column_stack([np.ones_like(x), np.zeros_like(x), fx])
    ex /= np.linalg.norm(ex, axis=1, keepdims=True)
    ez = np.column_stack([-fx, -fy, np.ones_like(x)])
    ez /= np.linalg.norm(ez, axis=1, keepdims=True)
    ey = np.cross(ez, ex)
    R = np.stack([ex, ey, ez], axis=2)
    return MeshState(np.column_stack([x, y, z]), se3.rotation_to_quat(R))


def build_mesh(n, m, l=0.025, L=0.025, initial_surface=None, fixed_nodes=None,
               tol=1e-9, max_iter=200):
    """Create the topology and an initial configuration satisfying g = 0.

    With ``initial_surface=None`` the mesh is stretched flat. Otherwise nodes
    are sampled on the surface and projected onto the constraint manifold by
    Gauss-Newton with only the father node held; the remaining fixed nodes
    are then frozen at their projected poses.
    """
    topo = make_topology(n, m, l, L, fixed_nodes)
    if initial_surface is None:
        state = flat_state(topo)
        return freeze_fixed(topo, state), state
    guess = surface_guess(topo, initial_surface)
    father_only = freeze_fixed(make_topology(n, m, l, L), guess)
    state = project_to_manifold(father_only, guess, tol=tol, max_iter=max_iter)
    return freeze_fixed(topo, state), state


# ---------------------------------------------------------------------------
# constraints

def _fixed_residual(topology, state):
    idx = list(topology.fixed_nodes)
    dp = state.positions[idx] - topology.fixed_positions
    qn = se3.quat_normalize(state.quaternions[idx])
    conj = topology.fixed_quaternions * np.array([1.0, -1, -1, -1])
    dq = se3.quat_multiply(qn, conj)
    dq = np.where(dq[:, :1] < 0, -dq, dq)
    vec = dq[:, 1:]
    s = np.linalg.norm(vec, axis=1, keepdims=True)
    ang = 2.0 * np.arctan2(s, dq[:, :1])
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(s > 1e-15, ang / np.where(s > 1e-15, s, 1.0), 2.0)
    return np.hstack([dp, k * vec]).ravel()


def holonomic_residual(topology, state):
    """Joint-coincidence residuals followed by fixed-node pose deviations."""
    P, C, D = topology.joint_arrays()
    R = se3.quat_to_rotation(se3.quat_normalize(state.quaternions), check=False)
    parts = []
    if len(P):
        a = state.positions[P] + np.einsum("kij,kj->ki", R[P], D)
        b = state.positions[C] - np.einsum("kij,kj->ki", R[C], D)
        parts.append((a - b).ravel())
    parts.append(_fixed_residual(topology, state))
    return np.concatenate(parts)


def constraint_jacobian_sparse(topology, state):
    P, C, D = topology.joint_arrays()
    N = topology.n_nodes
    R = se3.quat_to_rotation(se3.quat_normalize(state.quaternions), check=False)
    rows, cols, vals = [], [], []
    eye_r = np.repeat(np.arange(3), 1)
    if len(P):
        base = 3 * np.arange(len(P))
        # linear parts: +I at parent, -I at child
        for s, nodes in ((1.0, P), (-1.0, C)):
            rows.append((base[:, None] + eye_r[None, :]).ravel())
            cols.append((6 * nodes[:, None] + eye_r[None, :]).ravel())
            vals.append(np.full(3 * len(P), s))
        # angular parts: -S(R_p d) at parent, -S(R_c d) at child
        for nodes in (P, C):
            S = -se3.skew(np.einsum("kij,kj->ki", R[nodes], D))
            r = base[:, None, None] + np.arange(3)[None, :, None] + np.zeros((1, 1, 3), dtype=int)
            c = 6 * nodes[:, None, None] + 3 + np.arange(3)[None, None, :] + np.zeros((1, 3, 1), dtype=int)
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(S.ravel())
    off = 3 * len(P)
    for f_i, node in enumerate(topology.fixed_nodes):
        rows.append(off + 6 * f_i + np.arange(6))
        cols.append(6 * node + np.arange(6))
        vals.append(np.ones(6))
    shape = (topology.n_constraints, 6 * N)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape)


def constraint_jacobian(topology, state):
    return constraint_jacobian_sparse(topology, state).toarray()


def relative_map_sparse(topology, state):
    P, C, _ = topology.joint_arrays()
    N = topology.n_nodes
    R = se3.quat_to_rotation(se3.quat_normalize(state.quaternions), check=False)
    father = 0
    rows = [np.arange(6)]
    cols = [6 * father + np.arange(6)]
    vals = [np.ones(6)]
    if len(P):
        Rt = np.transpose(R[P], (0, 2, 1))
        base = 6 + 3 * np.arange(len(P))
        r = base[:, None, None] + np.arange(3)[None, :, None] + np.zeros((1, 1, 3), dtype=int)
        for s, nodes in ((1.0, C), (-1.0, P)):
            c = 6 * nodes[:, None, None] + 3 + np.arange(3)[None, None, :] + np.zeros((1, 3, 1), dtype=int)
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append((s * Rt).ravel())
    shape = (topology.n_relative, 6 * N)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape)


def absolute_to_relative_map(topology, state):
    """Dense ``T`` with ``V = T nu``: base twist then parent-frame joint rates."""
    return relative_map_sparse(topology, state).toarray()


def default_rank_tolerance(singular_values, shape):
    if singular_values.size == 0:
        return 0.0
    return singular_values[0] * max(shape) * np.finfo(float).eps


def analyze_constraints(topology, state, rank_tolerance=None):
    """Numerical rank, DoF and null-space bases of the constraint Jacobian (dense SVD)."""
    g = holonomic_residual(topology, state)
    J = constraint_jacobian(topology, state)
    _, s, Vt = np.linalg.svd(J, full_matrices=True)
    tol = default_rank_tolerance(s, J.shape) if rank_tolerance is None else rank_tolerance
    rank = int(np.sum(s > tol))
    Z_v = Vt[rank:].T.copy()
    T = absolute_to_relative_map(topology, state)
    return ConstraintSystem(g, J, s, rank, J.shape[1] - rank, Z_v, T @ Z_v, T)


# ---------------------------------------------------------------------------
# actuation maps

def relative_from_actuated(system, rows, pi_act, cond_bound=DEFAULT_COND_BOUND):
    """Full relative velocity ``V`` and absolute velocity ``nu`` produced by motor rates."""
    rows = np.asarray(rows, dtype=int)
    pi_act = np.asarray(pi_act, dtype=float)
    Z_act = system.Z_nu[rows]
    if Z_act.shape[0] != Z_act.shape[1]:
        raise SingularActuation(f"pattern has {len(rows)} rows but the mesh has {system.dof} DoF")
    if system.dof and np.linalg.cond(Z_act) > cond_bound:
        raise SingularActuation("actuated rows are (numerically) linearly dependent")
    xi = np.linalg.solve(Z_act, pi_act) if system.dof else np.zeros(0)
    return system.Z_nu @ xi, system.Z_v @ xi


def _actuated_operator(topology, state, rows):
    J = constraint_jacobian_sparse(topology, state)
    T = relative_map_sparse(topology, state)
    A = sp.vstack([J, T[np.asarray(rows, dtype=int)]]).tocsc()
    N = topology.n_nodes
    # angular columns carry lever arms of size l; rescale for conditioning
    scale = np.tile(np.r_[np.ones(3), np.full(3, topology.l)], N)
    return A, J, scale


def actuated_velocity_map(topology, state, rows, rhs=None, cond_bound=DEFAULT_COND_BOUND):
    """``Z_v Z_act^{-1}`` (or its product with ``rhs``) without forming a null basis.

    Solves ``[Jc; S_h T] X = [0; I]``; the solution is unique exactly when the
    selected rows give full actuation, and then equals ``Z_v Z_act^{-1}`` for
    any choice of null basis. Small meshes use a dense least-squares solve,
    larger ones the normal equations of the column-scaled sparse system.
    Raises SingularActuation when the stacked system is singular.
    """
    rows = np.asarray(rows, dtype=int)
    A, J, scale = _actuated_operator(topology, state, rows)
    dof = len(rows)
    vector = rhs is not None and np.ndim(rhs) == 1
    width = dof if rhs is None else (1 if vector else np.shape(rhs)[1])
    if dof == 0:
        return np.zeros(A.shape[1]) if vector else np.zeros((A.shape[1], width))
    B = np.zeros((A.shape[0], dof))
    B[J.shape[0]:] = np.eye(dof)
    if rhs is not None:
        B = B @ np.asarray(rhs, dtype=float).reshape(dof, width)
    As = A @ sp.diags(scale)
    if As.shape[1] <= 600:
        Ad = As.toarray()
        Y, _, rank, _ = np.linalg.lstsq(Ad, B, rcond=None)
        if rank < Ad.shape[1]:
            raise SingularActuation("actuated rows do not determine the mesh velocity")
    else:
        K = (As.T @ As).tocsc()
        try:
            lu = spla.splu(K)
        except RuntimeError as exc:
            raise SingularActuation(str(exc)) from exc
        Y = lu.solve(As.T @ B)
        Y = Y + lu.solve(As.T @ (B - As @ Y))
    X = scale[:, None] * Y
    resid = np.abs(A @ X - B).max()
    if not np.all(np.isfinite(X)) or resid > 1e-6 * max(1.0, np.abs(X).max()):
        raise SingularActuation(f"actuated system is singular (residual {resid:.2e})")
    if rhs is None and cond_bound is not None:
        # X = Q R with Z_act = R^{-1} in the basis Q
        if np.linalg.cond(np.linalg.qr(X, mode="r")) > cond_bound:
            raise SingularActuation("actuated rows are (numerically) linearly dependent")
    return X[:, 0] if vector else X


def damped_velocity_map(topology, state, rows, rhs=None, damping=1e-6):
    """``Z_v (Z_actᵀ Z_act + damping I)⁻¹ Z_actᵀ`` for an orthonormal null basis.

    Computed as the damped least-squares velocity

        min ‖S_h T ν − π‖² + damping ‖ν‖²  subject to  Jc ν = 0,

    which coincides with the damped inverse written in any orthonormal basis
    of the null space and stays well defined at actuation singularities.
    A tiny negative diagonal in the multiplier block absorbs redundant
    constraints.
    """
    rows = np.asarray(rows, dtype=int)
    dof = len(rows)
    vector = rhs is not None and np.ndim(rhs) == 1
    n_cols = 6 * topology.n_nodes
    if dof == 0:
        return np.zeros(n_cols) if vector else np.zeros((n_cols, 0))
    J = constraint_jacobian_sparse(topology, state)
    S = relative_map_sparse(topology, state)[rows]
    scale = np.tile(np.r_[np.ones(3), np.full(3, topology.l)], topology.n_nodes)
    D = sp.diags(scale)
    Js = (J @ D).tocsc()
    Ss = (S @ D).tocsc()
    H = (Ss.T @ Ss + damping * sp.diags(scale ** 2)).tocsc()
    eps = 1e-12 * max(abs(H).max(), 1.0)
    K = sp.bmat([[H, Js.T], [Js, -eps * sp.identity(J.shape[0])]], format="csc")
    B = np.eye(dof) if rhs is None else np.asarray(rhs, dtype=float).reshape(dof, -1)
    F = np.zeros((K.shape[0], B.shape[1]))
    F[:n_cols] = Ss.T @ B
    try:
        lu = spla.splu(K)
    except RuntimeError as exc:
        raise SingularActuation(str(exc)) from exc
    Y = lu.solve(F)
    Y = Y + lu.solve(F - K @ Y)
    X = scale[:, None] * Y[:n_cols]
    if not np.all(np.isfinite(X)):
        raise SingularActuation("damped actuated system could not be solved")
    return X[:, 0] if vector else X


def actuated_null_basis(topology, state, rows):
    """Orthonormal null basis ``Z_v`` and ``Z_act`` obtained from the sparse actuated solve.

    Equivalent to the SVD basis up to an orthogonal change of coordinates,
    which leaves ``Z_v Z_act^{-1}`` and ``|det Z_act|`` unchanged.
    """
    M = actuated_velocity_map(topology, state, rows)
    Q, Rq = np.linalg.qr(M)
    Z_act = np.linalg.inv(Rq) if len(rows) else np.zeros((0, 0))
    return Q, Z_act


# ---------------------------------------------------------------------------
# configuration updates

def displace(state, twist, step=1.0):
    """Move every node along ``twist`` (N x 6, world frame) for ``step``."""
    tw = np.asarray(twist, dtype=float).reshape(-1, 6) * step
    q = se3.quat_multiply(se3.rotvec_to_quat(tw[:, 3:]), state.quaternions)
    return MeshState(state.positions + tw[:, :3], se3.quat_normalize(q))


def _min_norm_step(topology, state, g):
    """Minimum-norm Gauss-Newton step with a tiny Levenberg damping.

    The damping keeps the row system solvable when constraints are redundant
    (e.g. a joint between two fixed nodes).
    """
    J = constraint_jacobian_sparse(topology, state)
    scale = np.tile(np.r_[np.ones(3), np.full(3, topology.l)], topology.n_nodes)
    Js = (J @ sp.diags(scale)).tocsr()
    K = (Js @ Js.T).tocsc()
    eps = 1e-12 * max(K.diagonal().max(initial=0.0), 1.0)
    lu = spla.splu(K + eps * sp.identity(K.shape[0], format="csc"))
    y = lu.solve(g)
    y += lu.solve(g - Js @ (Js.T @ y))
    return -scale * (Js.T @ y)


def project_to_manifold(topology, state, tol=DEFAULT_DRIFT_TOL, max_iter=50, steps=None, accept=None):
    """Gauss-Newton projection of the pose vector onto ``g = 0``.

    ``steps`` limits the number of iterations without raising (used for the
    per-step drift correction). Otherwise iteration aims for ``tol`` and
    raises InitFitFailure if the final residual is not below ``accept``
    (default ``tol``); redundant fixed-node rows can stall convergence well
    short of a tight target.
    """
    cur = MeshState(state.positions.copy(), se3.quat_normalize(state.quaternions), state.velocities.copy())
    g = holonomic_residual(topology, cur)
    n_iter = max_iter if steps is None else steps
    for _ in range(n_iter):
        if np.abs(g).max(initial=0.0) < tol:
            break
        delta = _min_norm_step(topology, cur, g)
        new = displace(cur, delta)
        new.velocities = cur.velocities
        g_new = holonomic_residual(topology, new)
        if np.abs(g_new).max() > np.abs(g).max():
            # damped retry on divergence
            new = displace(cur, delta, 0.5)
            new.velocities = cur.velocities
            g_new = holonomic_residual(topology, new)
        cur, g = new, g_new
    if steps is None and np.abs(g).max(initial=0.0) >= (tol if accept is None else accept):
        raise InitFitFailure(f"projection stalled at |g|_inf = {np.abs(g).max():.3e} m")
    return cur


def relative_rotations(topology, state):
    """Parent-frame relative rotation ``R_p^T R_c`` of every joint."""
    P, C, _ = topology.joint_arrays()
    R = state.rotations
    return np.einsum("kji,kjl->kil", R[P], R[C])
