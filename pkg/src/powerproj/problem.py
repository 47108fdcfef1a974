"""Constraint systems, the squared-hinge violation measure and the sum-rate.

Stacked constraint rows, always in this order (``G = 2U + B``)::

    [0, U)        -p <= 0                  non-negativity
    [U, U+B)      A p - P_max <= 0         per-BS budget
    [U+B, 2U+B)   rate rows                d - C p <= 0 for the affine kind

With ``normalize=True`` (the default used by every pipeline) the variable is
``x = p / P_max`` and each affine rate row is divided by its direct gain, so a
row reads ``x_k - beta_k * sum_j (H_kj / H_kk) x_j >= beta_k sigma^2 / (H_kk P_max)``.
This is a positive rescaling of rows and variable: the feasible set and all
SINRs are unchanged, but the violation measure is expressed in units of
``P_max`` and absolute tolerances become meaningful.  Non-affine rate rows are
divided by the bandwidth so they read in bits/s/Hz.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .channel import NetworkConfig, mat_to_vec
from .errors import ConfigError, DimensionMismatch, ShapeMismatch

LN2 = np.log(2.0)


def beta_from_alpha(alpha, W):
    """Minimum SINR giving rate ``alpha`` over bandwidth ``W``."""
    if np.any(np.asarray(W) <= 0):
        raise ConfigError("W must be positive")
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0):
        raise ConfigError("alpha must be non-negative")
    beta = np.exp2(alpha / W) - 1.0
    return float(beta) if beta.ndim == 0 else beta


@dataclass(frozen=True)
class ConstraintKind:
    name: str
    ee: Optional[np.ndarray] = None  # (B, Q) bits/joule, EE kind only

    def __post_init__(self):
        if self.name not in ("affine", "rate", "ee"):
            raise ConfigError(f"unknown constraint kind {self.name!r}")
        if self.name == "ee":
            if self.ee is None or np.any(np.asarray(self.ee) <= 0):
                raise ConfigError("energy-efficiency thresholds must be positive")

    @property
    def is_affine(self) -> bool:
        return self.name == "affine"


AFFINE = ConstraintKind("affine")
NONLINEAR_RATE = ConstraintKind("rate")


def energy_efficiency(ee) -> ConstraintKind:
    return ConstraintKind("ee", np.asarray(ee, dtype=float))


def selection_matrix(B: int, Q: int) -> np.ndarray:
    """``A[i, j] = 1`` iff ``j = i (mod B)``: row ``i`` sums the powers of BS ``i``."""
    U = B * Q
    return (np.arange(U)[None, :] % B == np.arange(B)[:, None]).astype(float)


@dataclass
class ProblemInstance:
    H: np.ndarray
    alpha: np.ndarray  # (B, Q) bits/s
    beta: np.ndarray  # (B, Q)
    W: float
    P_max: float
    sigma2: float
    normalized: bool
    gain: np.ndarray  # (U, U) block-diagonal received-power gains in variable units
    A: np.ndarray
    C: np.ndarray
    d: np.ndarray
    M: np.ndarray
    n: np.ndarray

    @property
    def B(self) -> int:
        return self.H.shape[0]

    @property
    def Q(self) -> int:
        return self.H.shape[1]

    @property
    def U(self) -> int:
        return self.B * self.Q

    @property
    def G(self) -> int:
        return self.M.shape[0]

    @property
    def power_scale(self) -> float:
        """Watts per unit of the optimization variable."""
        return self.P_max if self.normalized else 1.0

    @property
    def budget(self) -> float:
        return 1.0 if self.normalized else self.P_max

    @property
    def rate_scale(self) -> float:
        return self.W if self.normalized else 1.0

    def to_watts(self, x):
        return np.asarray(x) * self.power_scale

    def from_watts(self, p):
        return np.asarray(p) / self.power_scale

    # -- rates ------------------------------------------------------------
    def _terms(self, x):
        x = self._check(x)
        total = self.sigma2 + self.gain @ x
        direct = np.diag(self.gain) * x
        return total, total - direct

    def rates(self, x) -> np.ndarray:
        total, interf = self._terms(x)
        return self.W * np.log2(total / interf)

    def sum_rate(self, x) -> float:
        return float(np.sum(self.rates(x)))

    def rate_jacobian(self, x) -> np.ndarray:
        """``J[k, j] = dR_k / dx_j``."""
        total, interf = self._terms(x)
        off = self.gain - np.diag(np.diag(self.gain))
        return (self.W / LN2) * (self.gain / total[:, None] - off / interf[:, None])

    def sum_rate_grad(self, x) -> np.ndarray:
        return self.rate_jacobian(x).sum(axis=0)

    def rate_hessians(self, x, weights) -> np.ndarray:
        """``sum_k weights[k] * d2R_k/dx2`` without materialising the rank-3 tensor."""
        total, interf = self._terms(x)
        off = self.gain - np.diag(np.diag(self.gain))
        wt = np.asarray(weights) / total ** 2
        wi = np.asarray(weights) / interf ** 2
        return (self.W / LN2) * ((off.T * wi) @ off - (self.gain.T * wt) @ self.gain)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.U,):
            raise DimensionMismatch(f"expected power vector of length {self.U}, got {x.shape}")
        return x

    def to_dict(self) -> dict:
        return {
            "B": self.B, "Q": self.Q, "W": self.W, "P_max": self.P_max,
            "sigma2": self.sigma2, "normalized": self.normalized,
            "H": self.H.tolist(), "beta": self.beta.tolist(),
            "A": self.A.tolist(), "C": self.C.tolist(), "d": self.d.tolist(),
            "M": self.M.tolist(), "n": self.n.tolist(),
        }


def assemble_affine_constraints(H, cfg: NetworkConfig, normalize: bool = True) -> ProblemInstance:
    H = np.asarray(H, dtype=float)
    B, Q = cfg.B, cfg.Q
    if H.shape != (B, Q, B):
        raise ShapeMismatch(f"expected gains of shape {(B, Q, B)}, got {H.shape}")
    U = B * Q
    alpha = cfg.alpha_matrix
    beta = beta_from_alpha(alpha, cfg.W)
    scale = cfg.P_max if normalize else 1.0

    gain = np.zeros((U, U))
    for q in range(Q):
        sl = slice(q * B, (q + 1) * B)
        gain[sl, sl] = H[:, q, :] * scale
    direct = np.diag(gain).copy()
    off = gain - np.diag(direct)
    beta_v = mat_to_vec(beta)
    C = np.diag(direct) - beta_v[:, None] * off
    d = beta_v * cfg.noise_power
    if normalize:
        C = C / direct[:, None]
        d = d / direct

    A = selection_matrix(B, Q)
    budget = 1.0 if normalize else cfg.P_max
    M = np.vstack([-np.eye(U), A, -C])
    n = np.concatenate([np.zeros(U), -budget * np.ones(B), d])
    return ProblemInstance(H, alpha, beta, float(cfg.W), float(cfg.P_max), float(cfg.noise_power),
                           normalize, gain, A, C, d, M, n)


# ---------------------------------------------------------------------------
# constraint functions

def _rate_rows(x, inst: ProblemInstance, kind: ConstraintKind):
    rates = inst.rates(x)
    if kind.name == "rate":
        lhs = mat_to_vec(inst.alpha)
    else:
        lhs = mat_to_vec(np.asarray(kind.ee, dtype=float)) * inst.to_watts(x)
    return (lhs - rates) / inst.rate_scale


def eval_constraints(x, inst: ProblemInstance, kind: ConstraintKind = AFFINE) -> np.ndarray:
    x = inst._check(x)
    if kind.is_affine:
        return inst.M @ x + inst.n
    U, B = inst.U, inst.B
    g = np.empty(inst.G)
    g[:U + B] = inst.M[:U + B] @ x + inst.n[:U + B]
    g[U + B:] = _rate_rows(x, inst, kind)
    return g


def constraint_jacobian(x, inst: ProblemInstance, kind: ConstraintKind = AFFINE) -> np.ndarray:
    if kind.is_affine:
        return inst.M
    U, B = inst.U, inst.B
    J = inst.M.copy()
    dR = inst.rate_jacobian(x)
    if kind.name == "rate":
        J[U + B:] = -dR / inst.rate_scale
    else:
        ee = mat_to_vec(np.asarray(kind.ee, dtype=float)) * inst.power_scale
        J[U + B:] = (np.diag(ee) - dR) / inst.rate_scale
    return J


def weighted_constraint_hessian(x, inst: ProblemInstance, kind: ConstraintKind, weights) -> np.ndarray:
    """``sum_k weights[k] * d2 g_k / dx2``; zero for the affine kind."""
    if kind.is_affine:
        return np.zeros((inst.U, inst.U))
    w = np.asarray(weights)[inst.U + inst.B:]
    return -inst.rate_hessians(x, w) / inst.rate_scale


@dataclass
class ViolationState:
    g: np.ndarray
    active: np.ndarray
    V: float
    grad: Optional[np.ndarray] = None
    hess: Optional[np.ndarray] = None


def violation(x, inst: ProblemInstance, kind: ConstraintKind = AFFINE) -> ViolationState:
    g = eval_constraints(x, inst, kind)
    active = g > 0  # I(0) = 0
    pos = np.where(active, g, 0.0)
    return ViolationState(g, active, float(pos @ pos))


def violation_derivatives(x, inst: ProblemInstance, kind: ConstraintKind = AFFINE,
                          hessian: bool = True) -> ViolationState:
    st = violation(x, inst, kind)
    pos = np.where(st.active, st.g, 0.0)
    J = constraint_jacobian(x, inst, kind)
    st.grad = 2.0 * J.T @ pos
    if hessian:
        Ja = J[st.active]
        st.hess = 2.0 * Ja.T @ Ja
        if not kind.is_affine:
            st.hess = st.hess + 2.0 * weighted_constraint_hessian(x, inst, kind, pos)
            st.hess = 0.5 * (st.hess + st.hess.T)
    return st


def sum_rate_and_grad(p, H, cfg: NetworkConfig):
    """Sum-rate (bits/s) and its gradient w.r.t. powers in watts."""
    inst = assemble_affine_constraints(H, cfg, normalize=False)
    p = np.asarray(p, dtype=float)
    return inst.sum_rate(p), inst.sum_rate_grad(p)
