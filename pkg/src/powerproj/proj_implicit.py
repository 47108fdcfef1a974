"""Euclidean projection onto the polyhedral feasible set and its derivative.

The projection ``argmin 0.5 ||x - r||^2 s.t. M x + n <= 0`` is solved with the
dual active-set method of Goldfarb and Idnani specialised to an identity
Hessian: start from the unconstrained minimiser ``x = r`` and add violated
constraints one at a time, dropping any whose multiplier would turn negative.
Every iterate is dual feasible, so the first primal-feasible iterate is optimal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DegenerateActiveSet, Infeasible, MaxIterations
from .problem import ProblemInstance

KKT_TOL = 1e-8
_FEAS_TOL = 1e-13  # on unit-normalised rows
_ZERO_STEP = 1e-14


@dataclass
class QPSolution:
    p: np.ndarray
    duals: np.ndarray
    active_set: np.ndarray
    iterations: int
    kkt_residual: float
    weakly_active: int = 0


def _normalised_rows(M, n):
    norms = np.linalg.norm(M, axis=1)
    norms = np.where(norms > 0, norms, 1.0)
    # a^T x >= b  <=>  M x + n <= 0
    return -M / norms[:, None], n / norms, norms


def _solve_dual_active_set(r, a, b, max_iter):
    x = np.array(r, dtype=float)
    active: list[int] = []
    u = np.zeros(0)
    it = 0
    while True:
        s = a @ x - b
        # active rows hold with equality; their rounding residue must not re-enter
        s[active] = np.inf
        p = int(np.argmin(s))
        if s[p] >= -_FEAS_TOL * max(1.0, abs(b[p])):
            return x, active, u, it
        n_p = a[p]
        u_plus = 0.0
        while True:
            it += 1
            if it > max_iter:
                raise MaxIterations(f"dual active-set QP did not converge in {max_iter} steps")
            if active:
                N = a[active].T
                y = np.linalg.solve(N.T @ N, N.T @ n_p)
                z = n_p - N @ y
            else:
                y = np.zeros(0)
                z = n_p
            pos = np.flatnonzero(y > 1e-12)
            if pos.size:
                ratios = u[pos] / y[pos]
                k = int(np.argmin(ratios))
                t1, drop = float(ratios[k]), int(pos[k])
            else:
                t1, drop = np.inf, -1
            zz = float(z @ z)
            if zz > _ZERO_STEP ** 2:
                t2 = -(float(n_p @ x) - b[p]) / zz
            else:
                t2 = np.inf
            if np.isinf(t1) and np.isinf(t2):
                raise Infeasible("EmptyFeasibleSet", p)
            if np.isinf(t2):
                u = u - t1 * y
                u_plus += t1
                del active[drop]
                u = np.delete(u, drop)
                continue
            t = min(t1, t2)
            x = x + t * z
            u = u - t * y
            u_plus += t
            if t2 <= t1:
                active.append(p)
                u = np.append(u, u_plus)
                break
            del active[drop]
            u = np.delete(u, drop)


def _polish(r, a, b, active, x, u):
    """Recompute the iterate directly from its active set to shed drift."""
    if not active:
        return x, u
    N = a[active].T
    Qf, R = np.linalg.qr(N)
    if np.abs(np.diag(R)).min() <= 1e-14 * np.abs(np.diag(R)).max():
        return x, u
    # with N = Q R, x = r + Q w and R^T w = b - N^T r; w has the size of x - r, not of the
    # (possibly huge) multipliers, so x keeps full accuracy on the active rows
    w = np.zeros(len(active))
    x2 = np.array(r, dtype=float)
    for _ in range(2):
        w = w + scipy.linalg.solve_triangular(R, b[active] - N.T @ x2, trans="T")
        x2 = r + Qf @ w
    u2 = scipy.linalg.solve_triangular(R, w)
    if np.all(u2 >= -1e-12) and np.all(a @ x2 - b >= -_FEAS_TOL * np.maximum(1.0, np.abs(b))):
        return x2, np.maximum(u2, 0.0)
    return x, u


def kkt_residuals(p, r, duals, inst: ProblemInstance):
    g = inst.M @ p + inst.n
    primal = float(max(g.max(), 0.0))
    stat = float(np.abs(p - r + inst.M.T @ duals).max())
    comp = float(np.abs(duals * g).max())
    dual = float(max(-duals.min(), 0.0))
    return primal, stat, comp, dual


def qp_project(r, inst: ProblemInstance, max_iter: int | None = None) -> QPSolution:
    r = np.asarray(r, dtype=float)
    a, b, norms = _normalised_rows(inst.M, inst.n)
    max_iter = max_iter or 20 * (inst.G + inst.U)
    x, active, u, it = _solve_dual_active_set(r, a, b, max_iter)
    x, u = _polish(r, a, b, active, x, u)
    duals = np.zeros(inst.G)
    duals[active] = u / norms[active]
    g = inst.M @ x + inst.n
    strong = duals > KKT_TOL
    weak = int(np.sum((np.abs(g) <= KKT_TOL) & ~strong))
    res = max(kkt_residuals(x, r, duals, inst))
    return QPSolution(x, duals, strong, it, res, weak)


def qp_vjp(sol: QPSolution, inst: ProblemInstance, upstream) -> np.ndarray:
    """``(dp/dr)^T upstream`` by differentiating the KKT system on the active set."""
    v = np.asarray(upstream, dtype=float)
    idx = np.flatnonzero(sol.active_set)
    if idx.size == 0:
        return v.copy()
    Ma = inst.M[idx] / np.linalg.norm(inst.M[idx], axis=1)[:, None]
    k, U = Ma.shape
    K = np.zeros((U + k, U + k))
    K[:U, :U] = np.eye(U)
    K[:U, U:] = Ma.T
    K[U:, :U] = Ma
    rhs = np.concatenate([v, np.zeros(k)])
    try:
        lu = scipy.linalg.lu_factor(K, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise DegenerateActiveSet(str(exc)) from exc
    if np.min(np.abs(np.diag(lu[0]))) < 1e-12:
        raise DegenerateActiveSet("active constraint normals are linearly dependent")
    return scipy.linalg.lu_solve(lu, rhs)[:U]


def project_batch(R, instances) -> list[QPSolution]:
    return [qp_project(r, inst) for r, inst in zip(R, instances)]
