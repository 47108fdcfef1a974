"""Per-channel feasibility test and the closed-form minimum-power profile."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .channel import NetworkConfig
from .errors import Infeasible
from .problem import beta_from_alpha

POWER_ITERS = 500
POWER_RTOL = 1e-12
RHO_MARGIN = 1e-12

OK = "OK"
RADIUS_EXCEEDED = "RadiusExceeded"
BUDGET_EXCEEDED = "BudgetExceeded"
NEGATIVE_POWER = "NegativePower"


def spectral_radius(Bq: np.ndarray, iters: int = POWER_ITERS, rtol: float = POWER_RTOL) -> float:
    """Perron root of a non-negative matrix.

    Power iteration runs on ``I + Bq``, which is primitive whenever ``Bq`` is
    irreducible, so periodic matrices such as ``[[0, a], [a, 0]]`` still
    converge.  Falls back to a dense eigensolver when the off-diagonal mass is
    negligible or the Collatz-Wielandt bounds have not met after ``iters``.
    """
    Bq = np.asarray(Bq, dtype=float)
    n = Bq.shape[0]
    if n == 1:
        return abs(float(Bq[0, 0]))
    scale = np.abs(Bq).max()
    if scale == 0.0:
        return 0.0
    if scale < 1e-300:
        return float(np.max(np.abs(np.linalg.eigvals(Bq))))
    S = np.eye(n) + Bq / scale
    v = np.full(n, 1.0 / n)
    lam = 0.0
    # v stays non-negative with unit 1-norm, so sum(S v) is the growth factor
    for _ in range(iters):
        w = S @ v
        lam_new = w.sum()
        v = w / lam_new
        if abs(lam_new - lam) <= rtol * lam_new:
            break
        lam = lam_new
    if np.all(v > 0):
        ratio = (S @ v) / v
        lo, hi = ratio.min(), ratio.max()
        if hi - lo <= 1e-12 * hi:
            return float((0.5 * (lo + hi) - 1.0) * scale)
    return float(np.max(np.abs(np.linalg.eigvals(Bq))))


def build_Bq(H, beta, q: int) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    beta = np.asarray(beta, dtype=float)
    direct = np.diag(H[:, q, :])
    Bq = beta[:, q, None] * H[:, q, :] / direct[:, None]
    np.fill_diagonal(Bq, 0.0)
    return Bq


def build_Bq_and_radius(H, beta, q: int):
    Bq = build_Bq(H, beta, q)
    return Bq, spectral_radius(Bq)


def min_power_profile(H, beta, sigma2: float) -> np.ndarray:
    """Powers (B, Q) at which every user's SINR equals its target exactly.

    Raises :class:`Infeasible` when some channel has spectral radius >= 1.
    """
    H = np.asarray(H, dtype=float)
    beta = np.asarray(beta, dtype=float)
    B, Q, _ = H.shape
    P = np.empty((B, Q))
    for q in range(Q):
        Bq, rho = build_Bq_and_radius(H, beta, q)
        if rho >= 1.0 - RHO_MARGIN:
            raise Infeasible(RADIUS_EXCEEDED, q)
        u = beta[:, q] * sigma2 / np.diag(H[:, q, :])
        P[:, q] = scipy.linalg.lu_solve(scipy.linalg.lu_factor(np.eye(B) - Bq), u)
    return P


@dataclass
class FeasibilityReport:
    feasible: bool
    rho: np.ndarray
    reason: str
    detail: Optional[int] = None
    witness: Optional[np.ndarray] = field(default=None, repr=False)


def feasibility_filter(H, cfg: NetworkConfig) -> FeasibilityReport:
    H = np.asarray(H, dtype=float)
    beta = beta_from_alpha(cfg.alpha_matrix, cfg.W)
    rho = np.array([build_Bq_and_radius(H, beta, q)[1] for q in range(cfg.Q)])
    bad = np.flatnonzero(rho >= 1.0 - RHO_MARGIN)
    if bad.size:
        return FeasibilityReport(False, rho, RADIUS_EXCEEDED, int(bad[0]))
    P = min_power_profile(H, beta, cfg.noise_power)
    if np.any(P < 0):
        return FeasibilityReport(False, rho, NEGATIVE_POWER, None, P)
    over = np.flatnonzero(P.sum(axis=1) > cfg.P_max)
    if over.size:
        return FeasibilityReport(False, rho, BUDGET_EXCEEDED, int(over[0]), P)
    return FeasibilityReport(True, rho, OK, None, P)
