"""Small dense convex QP solver (operator splitting with active-set polishing).

Solves ``min ½ xᵀPx + qᵀx`` subject to ``l ≤ Cx ≤ u`` and ``lb ≤ x ≤ ub``.
The box is carried as extra rows during the iterations and enforced
exactly by clipping on return.
"""
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import MaxIterations


@dataclass
class QPSettings:
    max_iter: int = 4000
    eps_abs: float = 1e-7
    eps_rel: float = 1e-7
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    check_every: int = 10
    adapt_every: int = 50
    polish: bool = True


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool


def _stack(C, l, u, lb, ub, n):
    C = np.zeros((0, n)) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    l = np.zeros(0) if l is None else np.asarray(l, dtype=float)
    u = np.zeros(0) if u is None else np.asarray(u, dtype=float)
    if lb is None:
        return C, l, u, 0
    A = np.vstack([C, np.eye(n)])
    return A, np.concatenate([l, lb]), np.concatenate([u, ub]), n


def _residuals(P, q, A, l, u, x, y):
    Ax = A @ x
    prim = np.max(np.maximum(l - Ax, 0.0) + np.maximum(Ax - u, 0.0), initial=0.0)
    dual = np.max(np.abs(P @ x + q + A.T @ y), initial=0.0)
    return prim, dual, Ax


def _polish(P, q, A, l, u, x, y, tol):
    """Solve the equality-constrained problem on the guessed active set."""
    lower = y < -tol
    upper = y > tol
    act = lower | upper
    n = len(q)
    Aa = A[act]
    ba = np.where(lower[act], l[act], u[act])
    K = np.block([[P + 1e-10 * np.eye(n), Aa.T], [Aa, -1e-10 * np.eye(len(ba))]])
    rhs = np.concatenate([-q, ba])
    try:
        sol = linalg.solve(K, rhs, assume_a="sym")
    except (linalg.LinAlgError, ValueError):
        return None
    # two steps of iterative refinement against the unregularized system
    K0 = np.block([[P, Aa.T], [Aa, np.zeros((len(ba), len(ba)))]])
    for _ in range(2):
        sol = sol + linalg.solve(K, rhs - K0 @ sol, assume_a="sym")
    xp = sol[:n]
    yp = np.zeros_like(y)
    yp[act] = sol[n:]
    # multipliers must carry the right sign for their bound
    if np.any(yp[lower] > tol) or np.any(yp[upper] < -tol):
        return None
    return xp, yp


def solve(P, q, C=None, l=None, u=None, lb=None, ub=None, x0=None, y0=None, settings=None):
    """Return a :class:`QPResult`; raises :class:`MaxIterations` if ADMM stalls."""
    s = settings or QPSettings()
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    n = len(q)
    P = 0.5 * (P + P.T)
    A, l, u, nbox = _stack(C, l, u, lb, ub, n)
    m = A.shape[0]
    if np.any(l > u + 1e-12):
        raise ValueError("lower bound exceeds upper bound")
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    y = np.zeros(m) if y0 is None or len(y0) != m else np.asarray(y0, dtype=float).copy()
    z = np.clip(A @ x, l, u)

    # equality-like rows get a stiffer penalty, as OSQP does
    eq = np.abs(u - l) < 1e-8
    rho_bar = s.rho

    def factorize(rb):
        r = np.full(m, rb)
        r[eq] *= 1e3
        return r, linalg.cho_factor(P + s.sigma * np.eye(n) + A.T @ (r[:, None] * A))

    rho, factor = factorize(rho_bar)

    scale_q = max(np.max(np.abs(q), initial=0.0), 1.0)
    prim = dual = np.inf
    converged = False
    it = 0
    for it in range(1, s.max_iter + 1):
        xt = linalg.cho_solve(factor, s.sigma * x - q + A.T @ (rho * z - y))
        zt = A @ xt
        x = s.alpha * xt + (1.0 - s.alpha) * x
        zr = s.alpha * zt + (1.0 - s.alpha) * z
        z_new = np.clip(zr + y / rho, l, u)
        y = y + rho * (zr - z_new)
        z = z_new
        if it % s.check_every == 0 or it == s.max_iter:
            prim, dual, Ax = _residuals(P, q, A, l, u, x, y)
            eps_p = s.eps_abs + s.eps_rel * max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z), initial=0.0))
            eps_d = s.eps_abs + s.eps_rel * max(np.max(np.abs(P @ x), initial=0.0), scale_q)
            if prim <= eps_p and dual <= eps_d:
                converged = True
                break
        if it % s.adapt_every == 0 and np.isfinite(prim) and prim > 0 and dual > 0:
            # balance primal and dual progress by rescaling the penalty
            Ax = A @ x
            pn = prim / max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z), initial=0.0), 1e-12)
            dn = dual / max(np.max(np.abs(P @ x), initial=0.0), np.max(np.abs(A.T @ y), initial=0.0), scale_q, 1e-12)
            ratio = np.sqrt(pn / dn)
            if ratio > 5.0 or ratio < 0.2:
                rho_bar = float(np.clip(rho_bar * ratio, 1e-6, 1e6))
                rho, factor = factorize(rho_bar)

    polished = False
    if s.polish and m:
        out = _polish(P, q, A, l, u, x, y, tol=1e-9 * max(1.0, np.max(np.abs(y), initial=0.0)))
        if out is not None:
            xp, yp = out
            pp, dp, _ = _residuals(P, q, A, l, u, xp, yp)
            if converged:
                ok = pp <= max(prim, 1e-9) and dp <= max(dual, 1e-9)
            else:
                # a stalled run is rescued when its active set is already right
                ok = pp <= s.eps_abs and dp <= s.eps_abs * scale_q
            if ok:
                x, y, prim, dual, polished = xp, yp, pp, dp, True
    if not converged and not polished:
        raise MaxIterations(f"QP did not converge in {s.max_iter} iterations "
                            f"(primal {prim:.2e}, dual {dual:.2e})", x)

    if nbox:
        x = np.clip(x, lb, ub)
    return QPResult(x, y, it, prim, dual, polished)
