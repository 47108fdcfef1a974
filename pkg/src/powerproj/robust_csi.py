"""Imperfect channel knowledge: error models and the worst-case channel heuristic."""

from __future__ import annotations

import numpy as np

from .channel import NetworkConfig
from .errors import ConfigError, InfeasibleInput
from .feasibility import feasibility_filter

CHI_STEP = 0.01
ESTIMATE, DISTORT = "estimate", "distort"


def perturb_csi(H, sigma: float, rng, which: str = ESTIMATE) -> np.ndarray:
    """Multiplicative uniform error on every gain.

    ``"estimate"`` gives the estimate ``H - dH`` of a true channel ``H`` with
    ``dH ~ U[-sigma H, sigma H]``; ``"distort"`` gives ``H + dH`` of an
    estimate, the artificially distorted input used for robust training.
    Both keep every gain within ``[(1 - sigma) H, (1 + sigma) H]``.
    """
    if not 0 <= sigma < 1:
        raise ConfigError("relative CSI error must lie in [0, 1)")
    if which not in (ESTIMATE, DISTORT):
        raise ConfigError(f"unknown perturbation {which!r}")
    H = np.asarray(H, dtype=float)
    if sigma == 0:
        return H.copy()
    u = rng.uniform(-sigma, sigma, H.shape)
    return H * (1.0 - u) if which == ESTIMATE else H * (1.0 + u)


def scale_worst(H_hat, chi: float) -> np.ndarray:
    """Direct gains times ``1 - chi``, every cross gain times ``1 + chi``."""
    H = np.asarray(H_hat, dtype=float)
    B, Q, _ = H.shape
    direct = np.zeros(H.shape, dtype=bool)
    direct[np.arange(B), :, np.arange(B)] = True
    return np.where(direct, H * (1.0 - chi), H * (1.0 + chi))


def worst_case_csi(H_hat, sigma: float, cfg: NetworkConfig, step: float = CHI_STEP):
    """``(H_worst, chi)`` with the largest ``chi`` on the grid ``0, step, ...`` (at most ``sigma``)
    for which the scaled channel is still feasible."""
    if not 0 <= sigma < 1:
        raise ConfigError("relative CSI error must lie in [0, 1)")
    H_hat = np.asarray(H_hat, dtype=float)
    if not feasibility_filter(H_hat, cfg).feasible:
        raise InfeasibleInput("estimated channel is infeasible even without margin")
    best = 0.0
    for chi in np.arange(1, int(np.floor(sigma / step + 1e-9)) + 1) * step:
        if feasibility_filter(scale_worst(H_hat, chi), cfg).feasible:
            best = float(chi)
    return scale_worst(H_hat, best), best
