from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from powerproj.channel import NetworkConfig, mat_to_vec
from powerproj.problem import assemble_affine_constraints
from powerproj.proj_implicit import kkt_residuals, qp_project, qp_vjp

from conftest import brute_force_projection, random_feasible

SHAPES = [(1, 1), (2, 1), (3, 1), (1, 2), (1, 3)]


def _instance(rng, model="gaussian", shapes=SHAPES):
    B, Q = shapes[rng.integers(len(shapes))]
    cfg, H, rep = random_feasible(rng, B, Q, model)
    return assemble_affine_constraints(H, cfg), rep


def test_feasible_input_is_fixed(toy2):
    _, _, inst = toy2
    w = np.full(2, 1 / 90)
    np.testing.assert_allclose(qp_project(w, inst).p, w, atol=1e-15)


def test_toy2_clipped_to_budget(toy2):
    _, _, inst = toy2
    sol = qp_project(np.array([2.0, 2.0]), inst)
    np.testing.assert_allclose(sol.p, [1.0, 1.0], atol=1e-14)
    # both budget rows (Q=1: box faces) are active, so the Jacobian vanishes
    np.testing.assert_allclose(qp_vjp(sol, inst, np.array([0.3, -1.2])), 0.0, atol=1e-14)


def test_interior_vjp_is_identity(toy2):
    _, _, inst = toy2
    r = np.array([0.4, 0.6])
    v = np.array([1.5, -0.5])
    np.testing.assert_array_equal(qp_vjp(qp_project(r, inst), inst, v), v)


@pytest.mark.parametrize("model", ["gaussian", "pathloss"])
def test_matches_brute_force(model):
    rng = np.random.default_rng(10 if model == "gaussian" else 11)
    for _ in range(200):
        inst, _ = _instance(rng, model)
        r = rng.normal(0.3, 0.8, inst.U)
        p = qp_project(r, inst).p
        oracle = brute_force_projection(r, inst.M, inst.n)
        np.testing.assert_allclose(p, oracle, atol=1e-6)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 5.0), st.sampled_from(["gaussian", "pathloss"]))
def test_kkt_residuals_small(seed, spread, model):
    rng = np.random.default_rng(seed)
    cfg, H, _ = random_feasible(rng, int(rng.integers(1, 5)), int(rng.integers(1, 3)), model)
    inst = assemble_affine_constraints(H, cfg)
    r = rng.normal(0.2, spread, inst.U)
    sol = qp_project(r, inst)
    assert max(kkt_residuals(sol.p, r, sol.duals, inst)) <= 1e-8
    assert sol.kkt_residual <= 1e-8


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_projection_is_idempotent_and_nonexpansive(seed):
    rng = np.random.default_rng(seed)
    cfg, H, rep = random_feasible(rng, 3, 2)
    inst = assemble_affine_constraints(H, cfg)
    r1, r2 = rng.normal(0.3, 1, (2, inst.U))
    p1, p2 = qp_project(r1, inst).p, qp_project(r2, inst).p
    np.testing.assert_allclose(qp_project(p1, inst).p, p1, atol=1e-10)
    assert np.linalg.norm(p1 - p2) <= np.linalg.norm(r1 - r2) + 1e-10
    # the projection is at least as close as the min-power witness
    w = inst.from_watts(mat_to_vec(rep.witness))
    assert np.linalg.norm(p1 - r1) <= np.linalg.norm(w - r1) + 1e-10


def _strict(sol, inst, margin=1e-5):
    g = inst.M @ sol.p + inst.n
    return sol.weakly_active == 0 and np.all(sol.duals[sol.active_set] > margin) and \
        np.all(g[~sol.active_set] < -margin)


def test_vjp_matches_fd():
    rng = np.random.default_rng(12)
    done = 0
    while done < 100:
        cfg, H, _ = random_feasible(rng, int(rng.integers(1, 4)), int(rng.integers(1, 3)),
                                    ["gaussian", "pathloss"][done % 2])
        inst = assemble_affine_constraints(H, cfg)
        r = rng.normal(0.3, 0.8, inst.U)
        sol = qp_project(r, inst)
        if not _strict(sol, inst):
            continue
        h = 1e-6
        J = np.empty((inst.U, inst.U))
        for j in range(inst.U):
            e = np.zeros(inst.U)
            e[j] = h
            J[:, j] = (qp_project(r + e, inst).p - qp_project(r - e, inst).p) / (2 * h)
        v = rng.normal(size=inst.U)
        got, want = qp_vjp(sol, inst, v), J.T @ v
        # dp/dr is an orthogonal projector, so |v| bounds the scale of the product
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-6 * np.abs(v).max())
        done += 1


def test_no_cycling_at_ill_conditioned_vertex():
    # rows with coefficients up to 456 leave rounding residue on active rows
    d = np.load(Path(__file__).parent / "data" / "qp_cycle.npz")
    inst = assemble_affine_constraints(d["H"], NetworkConfig(B=4, Q=1, model="pathloss"))
    sol = qp_project(d["r"], inst)
    np.testing.assert_allclose(sol.p, brute_force_projection(d["r"], inst.M, inst.n), atol=1e-9)
    assert sol.kkt_residual <= 1e-8
