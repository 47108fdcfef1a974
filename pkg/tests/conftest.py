import itertools

import numpy as np
import pytest

from powerproj.channel import NetworkConfig, associate_and_sort, _raw_gains
from powerproj.feasibility import feasibility_filter
from powerproj.problem import assemble_affine_constraints


def toy2_config():
    # beta = 1 needs alpha = W * log2(2) = 1
    return NetworkConfig(B=2, Q=1, W=1.0, P_max=1.0, sigma2=0.01, alpha=1.0)


def toy2_gains():
    H = np.empty((2, 1, 2))
    H[:, 0, :] = [[1.0, 0.1], [0.1, 1.0]]
    return H


@pytest.fixture
def toy2():
    cfg = toy2_config()
    return cfg, toy2_gains(), assemble_affine_constraints(toy2_gains(), cfg)


def random_feasible(rng, B, Q, model="gaussian", **kw):
    """Draw channels until one passes the feasibility check."""
    cfg = NetworkConfig(B=B, Q=Q, model=model, **kw)
    while True:
        H = associate_and_sort(_raw_gains(cfg, rng), Q)
        rep = feasibility_filter(H, cfg)
        if rep.feasible:
            return cfg, H, rep


def brute_force_projection(r, M, n):
    """Projection by enumerating every linearly independent set of equality rows."""
    U = M.shape[1]
    best, best_d = None, np.inf
    for k in range(0, U + 1):
        for S in itertools.combinations(range(M.shape[0]), k):
            S = list(S)
            if k:
                Ms = M[S]
                if np.linalg.matrix_rank(Ms) < k:
                    continue
                lam = np.linalg.solve(Ms @ Ms.T, Ms @ r + n[S])
                x = r - Ms.T @ lam
            else:
                x = np.array(r, dtype=float)
            if np.all(M @ x + n <= 1e-10 * np.maximum(1, np.abs(n))):
                dist = np.linalg.norm(x - r)
                if dist < best_d - 1e-15:
                    best, best_d = x, dist
    return best


def brute_force_lp(c, M, n):
    """Minimise c.x over {M x + n <= 0} by enumerating vertices."""
    U = M.shape[1]
    best, best_v = None, np.inf
    for S in itertools.combinations(range(M.shape[0]), U):
        Ms = M[list(S)]
        if abs(np.linalg.det(Ms)) < 1e-12:
            continue
        x = np.linalg.solve(Ms, -n[list(S)])
        if np.all(M @ x + n <= 1e-9 * np.maximum(1, np.abs(n))):
            v = c @ x
            if v < best_v:
                best, best_v = x, v
    return best, best_v


# --- acceptance summary -----------------------------------------------------

ACCEPTANCE = {}  # criterion number -> (passed, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
