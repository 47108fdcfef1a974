"""Frank-Wolfe refinement of a feasible power vector.

Each iteration solves a linear program over the polyhedron
``{x >= 0, A x <= budget, C x >= d}`` with a small bounded-variable simplex
and moves along the segment toward the returned vertex.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, Infeasible, InfeasibleStart, NumericalStall, Unbounded
from .problem import ProblemInstance, violation

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
_TOL = 1e-11


# ---------------------------------------------------------------------------
# bounded-variable primal simplex

@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    iterations: int
    basis: list = field(default_factory=list)


def _simplex(c, A, b, upper, basis, at_upper, max_iter):
    """Revised simplex on ``min c^T z, A z = b, 0 <= z <= upper`` from a feasible basis.

    Nonbasic variables sit at 0 or at their upper bound (``at_upper``).
    Bland's rule on both the entering and the leaving choice rules out cycling.
    """
    m, n = A.shape
    basis = list(basis)
    it = 0
    while True:
        Bm = A[:, basis]
        nonbasic = np.ones(n, dtype=bool)
        nonbasic[basis] = False
        fixed = np.where(nonbasic & at_upper, upper, 0.0)
        fixed[~np.isfinite(fixed)] = 0.0
        xB = np.linalg.solve(Bm, b - A @ fixed)
        y = np.linalg.solve(Bm.T, c[basis])
        red = c - A.T @ y
        enter = -1
        for j in np.flatnonzero(nonbasic):
            if (not at_upper[j] and red[j] < -_TOL) or (at_upper[j] and red[j] > _TOL):
                enter = int(j)
                break
        if enter < 0:
            z = fixed.copy()
            z[basis] = xB
            return z, basis, at_upper, it
        it += 1
        if it > max_iter:
            raise NumericalStall(f"simplex exceeded {max_iter} pivots")
        col = np.linalg.solve(Bm, A[:, enter])
        sgn = 1.0 if not at_upper[enter] else -1.0
        # basic values move by -sgn * theta * col
        move = sgn * col
        theta, leave, leave_to_upper = upper[enter], -1, False
        for i in range(m):
            k = basis[i]
            if move[i] > _TOL:
                t = max(xB[i], 0.0) / move[i]
                to_up = False
            elif move[i] < -_TOL and np.isfinite(upper[k]):
                t = max(upper[k] - xB[i], 0.0) / -move[i]
                to_up = True
            else:
                continue
            if t < theta - 1e-14 or (abs(t - theta) <= 1e-14 and leave >= 0 and k < basis[leave]):
                theta, leave, leave_to_upper = t, i, to_up
        if not np.isfinite(theta):
            raise Unbounded("linear program is unbounded below")
        if leave < 0:
            at_upper[enter] = not at_upper[enter]  # bound flip, basis unchanged
            continue
        out = basis[leave]
        basis[leave] = enter
        at_upper[enter] = False
        at_upper[out] = leave_to_upper


def solve_lp(c, inst: ProblemInstance, max_iter: int | None = None) -> LPResult:
    """Vertex minimising ``c^T x`` over the affine feasible set of ``inst``.

    Standard form uses budget slacks and rate surpluses; phase one drives
    artificial variables to zero, after which they are pinned at zero.
    """
    c = np.asarray(c, dtype=float)
    U, B = inst.U, inst.B
    if c.shape != (U,):
        raise ConfigError(f"cost vector must have length {U}")
    budget = inst.budget
    # [x (U) | s budget slack (B) | t rate surplus (U)]
    A = np.zeros((B + U, 2 * U + B))
    A[:B, :U] = inst.A
    A[:B, U:U + B] = np.eye(B)
    A[B:, :U] = inst.C
    A[B:, U + B:] = -np.eye(U)
    b = np.concatenate([np.full(B, budget), inst.d])
    upper = np.concatenate([np.full(U, budget), np.full(B, budget), np.full(U, np.inf)])
    m, n = A.shape
    sign = np.where(b < 0, -1.0, 1.0)
    A1 = np.hstack([A * sign[:, None], np.eye(m)])
    b1 = b * sign
    up1 = np.concatenate([upper, np.full(m, np.inf)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    max_iter = max_iter or 50 * (m + n)
    z, basis, at_upper, it1 = _simplex(c1, A1, b1, up1, list(range(n, n + m)),
                                       np.zeros(n + m, dtype=bool), max_iter)
    if z[n:].sum() > 1e-9 * max(1.0, np.abs(b1).max()):
        raise Infeasible("EmptyFeasibleSet", None)
    up1[n:] = 0.0
    c2 = np.concatenate([c, np.zeros(n - U + m)])
    z, basis, _, it2 = _simplex(c2, A1, b1, up1, basis, at_upper, max_iter)
    x = np.clip(z[:U], 0.0, budget)
    return LPResult(x, float(c @ x), it1 + it2, basis)


# ---------------------------------------------------------------------------
# Frank-Wolfe

@dataclass
class FWConfig:
    max_iter: int = 50
    tol: float = 1e-3
    line_search: str = "exact"  # or "grid"
    evals: int = 40
    feas_tol: float = 1e-8

    def __post_init__(self):
        if self.max_iter < 1 or self.tol <= 0:
            raise ConfigError("need max_iter >= 1 and tol > 0")
        if self.line_search not in ("exact", "grid"):
            raise ConfigError(f"unknown line search {self.line_search!r}")


@dataclass
class FWTrace:
    rates: list
    steps: list
    iterates: list


def _golden(f, evals):
    """Maximiser of a unimodal ``f`` on [0, 1] with ``evals`` evaluations; endpoints included."""
    a, b = 0.0, 1.0
    x1, x2 = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(max(evals - 4, 0)):
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = f(x1)
    cands = [(f1, x1), (f2, x2), (f(1.0), 1.0), (f(0.0), 0.0)]
    return max(cands)[1]


def frank_wolfe(p0, inst: ProblemInstance, cfg: FWConfig = FWConfig(), step_rule=None):
    """Ascend the sum-rate from the feasible ``p0``; returns ``(p, trace)``.

    The LP uses ``c = -grad R`` so the linear step ascends.  A step is only
    taken when it does not lower the rate, so the trace is non-decreasing.
    ``step_rule(t, f)`` overrides the line search (used in tests).
    """
    x = np.asarray(p0, dtype=float).copy()
    if violation(x, inst).V > cfg.feas_tol or np.any(x < -cfg.feas_tol):
        raise InfeasibleStart("Frank-Wolfe needs a feasible starting point")
    R = inst.sum_rate(x)
    trace = FWTrace([R], [], [x.copy()])
    for t in range(cfg.max_iter):
        s = solve_lp(-inst.sum_rate_grad(x), inst).x
        d = s - x
        f = lambda lam: inst.sum_rate(x + lam * d)  # noqa: E731
        if step_rule is not None:
            lam = float(step_rule(t, f))
        elif cfg.line_search == "exact":
            lam = _golden(f, cfg.evals)
        else:
            grid = np.linspace(0.0, 1.0, cfg.evals)
            lam = float(grid[int(np.argmax([f(g) for g in grid]))])
        R_new = f(lam)
        if R_new < R:
            lam, R_new = 0.0, R
        x = x + lam * d
        trace.steps.append(lam)
        trace.rates.append(R_new)
        trace.iterates.append(x.copy())
        done = (R_new - R) / max(R, 1e-12) < cfg.tol
        R = R_new
        if done:
            break
    return x, trace
