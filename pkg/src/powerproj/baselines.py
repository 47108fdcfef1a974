"""Comparison methods: the penalty-trained PNet, a genetic algorithm, and min-power."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import mat_to_vec
from .errors import ConfigError, NoFeasibleIndividual
from .feasibility import min_power_profile
from .nn import MLPModel, forward
from .problem import ProblemInstance, violation
from .proj_implicit import qp_project


def pnet_forward(model: MLPModel, h, inst: ProblemInstance) -> np.ndarray:
    """Per-BS softmax output scaled to the budget, in watts (sums to P_max per BS)."""
    if model.activation != "softmax":
        raise ConfigError("PNet needs the per-BS softmax output layer")
    r, _ = forward(model, h, "eval")
    return np.asarray(r) * inst.P_max


def min_power_baseline(inst: ProblemInstance) -> np.ndarray:
    """Minimum-power profile (every rate constraint tight), in watts."""
    return mat_to_vec(min_power_profile(inst.H, inst.beta, inst.sigma2))


@dataclass
class GAConfig:
    population: int = 40
    generations: int = 500
    crossover_rate: float = 0.9
    mutation_rate: float = 0.2  # per gene
    mutation_scale: float = 0.05  # times the budget
    tournament: int = 3
    elitism: int = 1
    penalty: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if self.population < 2 or self.generations < 1:
            raise ConfigError("need population >= 2 and generations >= 1")
        if not (0 <= self.crossover_rate <= 1 and 0 <= self.mutation_rate <= 1):
            raise ConfigError("crossover and mutation rates must lie in [0, 1]")
        if not 0 <= self.elitism < self.population or self.tournament < 1:
            raise ConfigError("bad elitism or tournament size")


@dataclass
class GAResult:
    p: np.ndarray  # watts, after repair
    fitness_trace: list
    champion: np.ndarray  # variable units, before repair


def _fitness(X, inst: ProblemInstance, penalty: float):
    """Sum-rate in Mbit/s minus ``penalty * V`` for each row of ``X``."""
    total = inst.sigma2 + X @ inst.gain.T
    interf = total - X * np.diag(inst.gain)
    R = inst.W * np.log2(total / interf).sum(axis=1) / 1e6
    G = X @ inst.M.T + inst.n
    V = (np.maximum(G, 0.0) ** 2).sum(axis=1)
    return R - penalty * V


def genetic_optimize(inst: ProblemInstance, cfg: GAConfig = GAConfig(), seeds=None) -> GAResult:
    """Real-coded GA on the normalised powers, champion repaired by QP projection.

    ``seeds`` (rows in variable units) replace the first members of the
    initial population.
    """
    rng = np.random.default_rng(cfg.seed)
    U, top = inst.U, inst.budget
    X = rng.uniform(0.0, top, (cfg.population, U))
    if seeds is not None:
        S = np.atleast_2d(np.asarray(seeds, dtype=float))[:cfg.population]
        X[:len(S)] = S
    fit = _fitness(X, inst, cfg.penalty)
    trace = [float(fit.max())]
    for _ in range(cfg.generations):
        order = np.argsort(-fit, kind="stable")
        elite = X[order[:cfg.elitism]]
        n_child = cfg.population - cfg.elitism
        cand = rng.integers(0, cfg.population, (2 * n_child, cfg.tournament))
        winners = cand[np.arange(2 * n_child), np.argmax(fit[cand], axis=1)]
        pa, pb = X[winners[:n_child]], X[winners[n_child:]]
        mix = rng.random((n_child, U)) < 0.5
        do_cross = rng.random(n_child) < cfg.crossover_rate
        child = np.where(mix & do_cross[:, None], pb, pa)
        mut = rng.random((n_child, U)) < cfg.mutation_rate
        child = child + mut * rng.normal(0.0, cfg.mutation_scale * top, (n_child, U))
        child = np.clip(child, 0.0, top)
        X = np.vstack([elite, child])
        fit = _fitness(X, inst, cfg.penalty)
        trace.append(float(fit.max()))
    champ = X[int(np.argmax(fit))]
    x = qp_project(champ, inst).p
    if violation(x, inst).V > 1e-8:
        raise NoFeasibleIndividual("repaired champion still violates the constraints")
    return GAResult(inst.to_watts(x), trace, champ)

