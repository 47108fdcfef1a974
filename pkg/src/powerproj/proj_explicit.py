"""Iterative correction toward the feasible set.

Training uses a fixed number of gradient steps with momentum on the violation
measure, recorded so that the whole unroll can be differentiated.  Test time
uses regularised Newton steps until the violation vanishes.  Both clamp the
iterate to the non-negative orthant after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import ConfigError, LinearSolveFailure, NotConverged, TapeMismatch
from .problem import (
    AFFINE,
    NONLINEAR_RATE,
    ConstraintKind,
    ProblemInstance,
    ViolationState,
    violation,
    violation_derivatives,
)

GD_STEP_GRID = (0.1, 0.05, 0.01, 0.007, 0.001, 0.0005)


@dataclass
class CorrectionConfig:
    train_steps: int = 5
    test_steps: int = 100
    step_size: float = 0.01
    momentum: float = 0.5
    hessian_reg: float = 1e-8
    clamp: bool = True
    stop_tol: float = 1e-9
    max_halvings: int = 10
    boost_retries: int = 3
    step_cap: bool = True  # train mode: step <= 1/L of the instance

    def __post_init__(self):
        if self.step_size <= 0 or not 0 <= self.momentum < 1 or self.hessian_reg <= 0:
            raise ConfigError("need step_size > 0, 0 <= momentum < 1, hessian_reg > 0")
        if self.train_steps < 0 or self.test_steps < 1:
            raise ConfigError("step counts must be positive")

    def for_kind(self, kind: ConstraintKind) -> "CorrectionConfig":
        """Non-convex kinds get 300 Newton steps unless overridden."""
        if kind.is_affine or self.test_steps != 100:
            return self
        return CorrectionConfig(**{**self.__dict__, "test_steps": 300})


def train_step_size(x0, inst: ProblemInstance, kind: ConstraintKind, cfg: CorrectionConfig) -> float:
    """Step of the training unroll: ``cfg.step_size``, capped at ``1/L`` when ``step_cap`` is set.

    For the affine kind ``L = 2 ||M||^2`` bounds the Hessian of V everywhere.
    Other kinds use the largest Hessian eigenvalue at the start point, doubled.
    The cap is held constant in the backward pass.
    """
    if not cfg.step_cap:
        return cfg.step_size
    if kind.is_affine:
        L = 2.0 * np.linalg.norm(inst.M, 2) ** 2
    else:
        hess = violation_derivatives(x0, inst, kind).hess
        L = 2.0 * float(np.abs(np.linalg.eigvalsh(hess)).max())
    return cfg.step_size if L <= 0 else min(cfg.step_size, 1.0 / L)


@dataclass
class _Step:
    x: np.ndarray
    kept: np.ndarray  # coordinates not clamped
    hess: np.ndarray


@dataclass
class UnrollTape:
    inst: ProblemInstance
    kind: ConstraintKind
    step_size: float
    momentum: float
    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)


@dataclass
class ExplicitResult:
    p: np.ndarray
    V: float
    steps: int
    converged: bool
    trace: list
    tape: Optional[UnrollTape] = None


def _clamp(y, cfg):
    if cfg.clamp:
        return np.maximum(y, 0.0), y > 0
    return y, np.ones_like(y, dtype=bool)


def correct_step_gd(x, prev_delta, inst: ProblemInstance, kind: ConstraintKind = AFFINE,
                    cfg: CorrectionConfig = CorrectionConfig(), _record=False):
    """One step ``delta = -step * grad V(x) - momentum * prev_delta`` then clamp."""
    st = violation_derivatives(x, inst, kind, hessian=_record)
    delta = -cfg.step_size * st.grad - cfg.momentum * prev_delta
    x_new, kept = _clamp(x + delta, cfg)
    if _record:
        return x_new, delta, _Step(np.array(x), kept, st.hess)
    return x_new, delta


def _newton_direction(x, st, inst, kind: ConstraintKind, cfg: CorrectionConfig, free=None,
                      scaled=False):
    U = st.grad.size
    hess, grad = st.hess, st.grad
    if scaled:
        # users driven to near-zero power give their rate rows curvature many
        # orders above the rest; solve in Jacobi-scaled coordinates instead
        s = 1.0 / np.sqrt(np.maximum(np.abs(np.diag(hess)), 1.0))
        hess, grad = hess * s[:, None] * s[None, :], grad * s
    else:
        s = np.ones(U)
    reg = cfg.hessian_reg
    for _ in range(cfg.boost_retries + 1):
        try:
            c = scipy.linalg.cho_factor(hess + reg * np.eye(U), check_finite=True)
            return -s * scipy.linalg.cho_solve(c, grad)
        except (np.linalg.LinAlgError, ValueError):
            reg *= 10
    if not kind.is_affine:
        # curvature of the rate terms made the system indefinite: flip the
        # negative eigenvalues so the step descends along them too
        lam, vecs = np.linalg.eigh(hess)
        floor = max(cfg.hessian_reg, 1e-8 * float(np.abs(lam).max()))
        lam = np.maximum(np.abs(lam), floor)
        step = -s * (vecs @ ((vecs.T @ grad) / lam))
        if np.all(np.isfinite(step)):
            return step
    raise LinearSolveFailure("regularised Hessian is not positive definite")


def _accept(x, delta, st, inst, kind, cfg, halvings=None):
    """Halve ``delta`` until the clamped step passes an Armijo test.

    The test uses the displacement actually taken after clamping, so a step
    the clamp has nullified is rejected rather than accepted as "no increase".
    """
    halvings = cfg.max_halvings if halvings is None else halvings
    for _ in range(halvings + 1):
        x_new, _ = _clamp(x + delta, cfg)
        slope = float(st.grad @ (x_new - x))
        if slope < 0 and violation(x_new, inst, kind).V <= st.V + 1e-4 * slope:
            return x_new
        delta = 0.5 * delta
    return None


def _surrogate_step(x, st, inst, cfg):
    sa = violation_derivatives(x, inst, AFFINE)
    if sa.V == 0.0:
        return None
    free = ~((x <= 0.0) & (sa.grad > 0.0)) if cfg.clamp else np.ones_like(x, dtype=bool)
    if not free.any():
        return None
    delta = np.zeros_like(x)
    try:
        sub = ViolationState(sa.g, sa.active, sa.V, sa.grad[free], sa.hess[np.ix_(free, free)])
        delta[free] = _newton_direction(x, sub, inst, AFFINE, cfg, free)
    except LinearSolveFailure:
        return None
    return _accept(x, delta, st, inst, NONLINEAR_RATE, cfg)


def correct_step_newton(x, inst: ProblemInstance, kind: ConstraintKind = AFFINE,
                        cfg: CorrectionConfig = CorrectionConfig()):
    """Regularised Newton step on V, halved while V would not decrease.

    Coordinates at zero whose gradient points outward are held fixed and the
    step is taken in the remaining ones (projected Newton).  When halving
    cannot rescue that step the full-space step is tried, then the
    regulariser is raised, moving the step toward projected gradient descent,
    which is the final fallback.  For the non-convex kinds several descent
    directions are tried every step and the one reaching the lowest V wins.
    """
    x = np.asarray(x, dtype=float)
    st = violation_derivatives(x, inst, kind)
    if st.V == 0.0:
        return x.copy()
    # coordinates sitting on the bound and pushed outward stay there
    free = ~((x <= 0.0) & (st.grad > 0.0)) if cfg.clamp else np.ones_like(x, dtype=bool)
    if not free.any():
        return x.copy()
    sub = ViolationState(st.g, st.active, st.V, st.grad[free], st.hess[np.ix_(free, free)])

    def attempt(c, full=False, scaled=False):
        try:
            if full:
                delta = _newton_direction(x, st, inst, kind, c, scaled=scaled)
            else:
                delta = np.zeros_like(x)
                delta[free] = _newton_direction(x, sub, inst, kind, c, free, scaled)
        except LinearSolveFailure:
            return None
        return _accept(x, delta, st, inst, kind, cfg)

    x_new = attempt(cfg)
    if x_new is None and not free.all():
        x_new = attempt(cfg, full=True)
    if not kind.is_affine:
        # the non-convex measures have curved valleys where any single rule
        # crawls: near-collapsed channels make the curvature badly scaled,
        # and where log2(1 + SINR) is flat the equivalent affine SINR row
        # gives the better direction
        cands = [x_new, attempt(cfg, scaled=True)]
        if kind.name == "rate":
            cands.append(_surrogate_step(x, st, inst, cfg))
        cands = [c for c in cands if c is not None]
        if cands:
            return min(cands, key=lambda c: violation(c, inst, kind).V)
    if x_new is not None:
        return x_new

    scale = max(float(np.abs(np.diag(st.hess)).max()), 1.0)
    for k in range(1, 9):
        lm = CorrectionConfig(**{**cfg.__dict__, "hessian_reg": max(cfg.hessian_reg, scale * 10.0 ** (k - 9))})
        x_new = attempt(lm)
        if x_new is not None:
            return x_new

    curv = max(float(np.linalg.norm(st.hess, 2)), cfg.hessian_reg)
    x_new = _accept(x, -st.grad / curv, st, inst, kind, cfg, halvings=50)
    return x.copy() if x_new is None else x_new


def project_explicit(r, inst: ProblemInstance, kind: ConstraintKind = AFFINE, mode: str = "test",
                     cfg: CorrectionConfig = CorrectionConfig(), strict: bool = False) -> ExplicitResult:
    """Truncated correction process.

    ``mode="train"`` runs exactly ``cfg.train_steps`` gradient steps and
    returns a tape; ``mode="test"`` runs Newton steps until ``V <= stop_tol``.
    A test run that hits the step cap is reported through ``converged=False``
    (or raised as :class:`NotConverged` with ``strict=True``).
    """
    x = np.asarray(r, dtype=float).copy()
    if not np.all(np.isfinite(x)):
        raise ConfigError("non-finite input to projection")
    if mode == "train":
        step = train_step_size(x, inst, kind, cfg)
        if step != cfg.step_size:
            cfg = CorrectionConfig(**{**cfg.__dict__, "step_size": step})
        tape = UnrollTape(inst, kind, step, cfg.momentum)
        delta = np.zeros_like(x)
        trace = [violation(x, inst, kind).V]
        for _ in range(cfg.train_steps):
            x, delta, rec = correct_step_gd(x, delta, inst, kind, cfg, _record=True)
            tape.steps.append(rec)
            trace.append(violation(x, inst, kind).V)
        return ExplicitResult(x, trace[-1], cfg.train_steps, trace[-1] <= cfg.stop_tol, trace, tape)
    if mode != "test":
        raise ConfigError(f"unknown projection mode {mode!r}")
    cfg = cfg.for_kind(kind)
    V = violation(x, inst, kind).V
    trace = [V]
    steps = 0
    while V > cfg.stop_tol and steps < cfg.test_steps:
        x_new = correct_step_newton(x, inst, kind, cfg)
        steps += 1
        if np.array_equal(x_new, x):
            break
        x = x_new
        V = violation(x, inst, kind).V
        trace.append(V)
    res = ExplicitResult(x, V, steps, V <= cfg.stop_tol, trace)
    if strict and not res.converged:
        raise NotConverged(f"V = {V:.3e} after {steps} Newton steps", res)
    return res


def gd_trajectory(r, inst: ProblemInstance, kind: ConstraintKind = AFFINE,
                  cfg: CorrectionConfig = CorrectionConfig(), steps: int = 100) -> list:
    """V after each of ``steps`` gradient-with-momentum corrections (convergence studies)."""
    x = np.asarray(r, dtype=float).copy()
    delta = np.zeros_like(x)
    trace = [violation(x, inst, kind).V]
    for _ in range(steps):
        x, delta = correct_step_gd(x, delta, inst, kind, cfg)
        trace.append(violation(x, inst, kind).V)
    return trace


def project_explicit_vjp(tape: UnrollTape, upstream) -> np.ndarray:
    """Reverse pass through the recorded unroll.

    Forward, per step: ``d_t = -s grad V(x_t) - m d_{t-1}``,
    ``x_{t+1} = clamp(x_t + d_t)``.  Active masks and clamp patterns are the
    ones seen going forward.
    """
    if not isinstance(tape, UnrollTape):
        raise TapeMismatch("expected a train-mode UnrollTape")
    gx = np.asarray(upstream, dtype=float).copy()
    if tape.steps and gx.shape != tape.steps[0].x.shape:
        raise TapeMismatch("upstream gradient does not match tape dimension")
    gd = np.zeros_like(gx)
    for rec in reversed(tape.steps):
        gy = np.where(rec.kept, gx, 0.0)
        total = gy + gd
        gx = gy - tape.step_size * (rec.hess @ total)
        gd = -tape.momentum * total
    return gx
