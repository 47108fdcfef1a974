import numpy as np
import pytest

from powerproj.baselines import GAConfig, genetic_optimize, min_power_baseline, pnet_forward
from powerproj.channel import mat_to_vec, tensor_to_input
from powerproj.errors import ConfigError
from powerproj.nn import MLPModel
from powerproj.problem import assemble_affine_constraints, violation

from conftest import random_feasible
from test_refine import grid_optimum


def test_pnet_equal_logits_split_budget():
    rng = np.random.default_rng(40)
    cfg, H, _ = random_feasible(rng, 2, 2, "pathloss", P_max=1.0)
    inst = assemble_affine_constraints(H, cfg)
    m = MLPModel.for_config(2, 2, hidden=(4,), activation="softmax")
    for k in m.params:
        m.params[k][...] = 0
    np.testing.assert_allclose(pnet_forward(m, tensor_to_input(H), inst), 0.5)


def test_pnet_budget_sums():
    rng = np.random.default_rng(41)
    cfg, H, _ = random_feasible(rng, 3, 2, "pathloss", P_max=0.7)
    inst = assemble_affine_constraints(H, cfg)
    m = MLPModel.for_config(3, 2, hidden=(8,), activation="softmax", seed=3)
    for k in m.params:
        m.params[k] = rng.normal(0, 2, m.params[k].shape)
    p = pnet_forward(m, tensor_to_input(H), inst)
    np.testing.assert_allclose(inst.A @ p, 0.7, atol=1e-12)
    with pytest.raises(ConfigError):
        pnet_forward(MLPModel.for_config(3, 2, hidden=(8,)), tensor_to_input(H), inst)


def test_min_power_is_feasible_and_tight():
    rng = np.random.default_rng(42)
    cfg, H, _ = random_feasible(rng, 4, 2, "pathloss")
    inst = assemble_affine_constraints(H, cfg)
    x = inst.from_watts(min_power_baseline(inst))
    g = inst.M @ x + inst.n
    assert violation(x, inst).V <= 1e-20
    np.testing.assert_allclose(g[inst.U + inst.B:], 0.0, atol=1e-9 * np.abs(inst.d).max())


def test_ga_keeps_seeded_witness():
    rng = np.random.default_rng(43)
    cfg, H, rep = random_feasible(rng, 3, 2, "pathloss")
    inst = assemble_affine_constraints(H, cfg)
    w = inst.from_watts(mat_to_vec(rep.witness))
    res = genetic_optimize(inst, GAConfig(generations=30), seeds=w)
    assert inst.sum_rate(inst.from_watts(res.p)) >= inst.sum_rate(w) * (1 - 1e-9)
    assert all(b >= a for a, b in zip(res.fitness_trace, res.fitness_trace[1:]))


def test_ga_deterministic():
    rng = np.random.default_rng(44)
    cfg, H, _ = random_feasible(rng, 2, 2)
    inst = assemble_affine_constraints(H, cfg)
    a = genetic_optimize(inst, GAConfig(generations=40, seed=5))
    b = genetic_optimize(inst, GAConfig(generations=40, seed=5))
    assert np.array_equal(a.champion, b.champion) and np.array_equal(a.p, b.p)


@pytest.mark.parametrize("model", ["gaussian", "pathloss"])
def test_ga_close_to_grid_optimum_u2(model):
    rng = np.random.default_rng(45)
    for i in range(5):
        cfg, H, _ = random_feasible(rng, 2, 1, model)
        inst = assemble_affine_constraints(H, cfg)
        res = genetic_optimize(inst, GAConfig(seed=i))
        assert inst.sum_rate(inst.from_watts(res.p)) >= 0.98 * grid_optimum(inst)
        assert violation(inst.from_watts(res.p), inst).V <= 1e-8


def test_ga_config_validation():
    with pytest.raises(ConfigError):
        GAConfig(population=1)
    with pytest.raises(ConfigError):
        GAConfig(mutation_rate=1.5)
