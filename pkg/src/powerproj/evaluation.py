"""Metrics, experiment orchestration and result files.

Every method maps a channel it believes in (the estimate under imperfect CSI)
to powers in watts; the record is always judged against the true channel.
A sample counts as violated when ``V > 1e-6`` in units of P_max, and its
sum-rate is then recorded as zero in the aggregate.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .baselines import GAConfig, genetic_optimize, min_power_baseline
from .channel import Dataset, NetworkConfig, _atomic_write, gen_dataset, load_dataset, split_dataset, \
    tensor_to_input
from .errors import ConfigError, InfeasibleInput, PowerProjError
from .nn import LossSpec, MLPModel, TrainConfig, forward, infer, save_checkpoint, train
from .problem import AFFINE, NONLINEAR_RATE, ConstraintKind, ProblemInstance, assemble_affine_constraints, \
    energy_efficiency, violation
from .proj_explicit import GD_STEP_GRID, CorrectionConfig, gd_trajectory, project_explicit
from .refine import FWConfig, frank_wolfe
from .robust_csi import DISTORT, ESTIMATE, perturb_csi, worst_case_csi

VIOLATION_TOL = 1e-6
CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = ("sample_id", "method", "sum_rate", "raw_sum_rate", "violated", "V_residual",
               "fw_applied", "wall_time")
WARMUP = 10


@dataclass
class EvalRecord:
    sample_id: int
    method: str
    sum_rate: float  # bits/s, zero when violated
    raw_sum_rate: float
    violated: bool
    V_residual: float
    fw_applied: bool
    wall_time: float


@dataclass
class Aggregate:
    method: str
    n: int
    sum_rate: float
    raw_sum_rate: float
    violation_prob: float
    mean_time: float


def make_kind(name: str, cfg: NetworkConfig, ee=None) -> ConstraintKind:
    if name == "affine":
        return AFFINE
    if name == "rate":
        return NONLINEAR_RATE
    if name == "ee":
        # default threshold: the rate target delivered at full power
        return energy_efficiency(cfg.alpha_matrix / cfg.P_max if ee is None else ee)
    raise ConfigError(f"unknown constraint kind {name!r}")


# ---------------------------------------------------------------------------
# methods: (H used by the method, its instance) -> powers in variable units

Method = Callable[[np.ndarray, ProblemInstance], np.ndarray]


def network_method(model: MLPModel, spec: LossSpec) -> Method:
    def run(H, inst):
        r, _ = forward(model, tensor_to_input(H), "eval")
        return infer(r, inst, spec)
    return run


def ga_method(cfg: GAConfig) -> Method:
    return lambda H, inst: inst.from_watts(genetic_optimize(inst, cfg).p)


def minpower_method() -> Method:
    return lambda H, inst: inst.from_watts(min_power_baseline(inst))


def score(x, inst_true: ProblemInstance, kind: ConstraintKind = AFFINE):
    """``(raw sum-rate, V, violated)`` of ``x`` on the true channel."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        return 0.0, float("inf"), True
    V = violation(x, inst_true, kind).V
    return inst_true.sum_rate(x), V, V > VIOLATION_TOL


def evaluate(method: Method, name: str, ds: Dataset, believed=None, fw: Optional[FWConfig] = None,
             kind: ConstraintKind = AFFINE, warmup: int = WARMUP, project_on=None):
    """Run ``method`` on every sample of ``ds``; returns ``(records, aggregate)``.

    ``believed`` holds the channels the method sees (defaults to the true
    ones); ``project_on`` optionally replaces the channel used to build the
    constraint instance (the worst-case CSI heuristic).  ``fw`` appends a
    Frank-Wolfe refinement on the method's instance.  The first ``warmup``
    samples are run once untimed before the timed pass.
    """
    believed = ds.samples if believed is None else believed
    project_on = believed if project_on is None else project_on
    cfg = ds.config
    inst_used = []
    for Hp in project_on:
        inst_used.append(assemble_affine_constraints(Hp, cfg))
    for i in range(min(warmup, len(ds))):
        try:
            method(believed[i], inst_used[i])
        except PowerProjError:
            pass
    records = []
    for i, H_true in enumerate(ds.samples):
        inst = inst_used[i]
        t0 = time.perf_counter()
        try:
            x = method(believed[i], inst)
            applied = False
            if fw is not None and violation(x, inst).V <= fw.feas_tol and np.all(x >= 0):
                x, _ = frank_wolfe(x, inst, fw)
                applied = True
        except InfeasibleInput:
            x, applied = None, False
        dt = time.perf_counter() - t0
        inst_true = assemble_affine_constraints(H_true, cfg)
        if x is None:
            raw, V, bad = 0.0, float("inf"), True
        else:
            raw, V, bad = score(x, inst_true, kind)
        records.append(EvalRecord(i, name, 0.0 if bad else raw, raw, bad, V, applied, dt))
    return records, aggregate(records, name)


def aggregate(records, name=None) -> Aggregate:
    n = len(records)
    if n == 0:
        raise ConfigError("nothing to aggregate")
    return Aggregate(name or records[0].method, n,
                     float(np.mean([r.sum_rate for r in records])),
                     float(np.mean([r.raw_sum_rate for r in records])),
                     float(np.mean([r.violated for r in records])),
                     float(np.mean([r.wall_time for r in records])))


def records_to_csv(records, timing: bool = True) -> str:
    buf = io.StringIO()
    cols = CSV_COLUMNS if timing else CSV_COLUMNS[:-1]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        row = asdict(r)
        w.writerow([_fmt(row[c]) for c in cols])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return f"{v:.17g}"
    return v


def write_records(records, path, timing: bool = True):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, records_to_csv(records, timing).encode())


def write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable).encode())


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


# ---------------------------------------------------------------------------
# imperfect CSI

def estimate_channels(ds: Dataset, sigma: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    return np.stack([perturb_csi(H, sigma, rng, ESTIMATE) for H in ds.samples])


def worst_case_channels(H_hat, sigma: float, cfg: NetworkConfig):
    """Worst-case channel per estimate; an infeasible estimate is passed through unchanged."""
    out, chis = [], []
    for H in H_hat:
        try:
            Hw, chi = worst_case_csi(H, sigma, cfg)
        except InfeasibleInput:
            Hw, chi = H, float("nan")
        out.append(Hw)
        chis.append(chi)
    return np.stack(out), np.array(chis)


def distorted_dataset(ds: Dataset, sigma: float, seed: int) -> Dataset:
    """Training set whose channels carry the artificial distortion of robust training.

    Distorted channels that became infeasible are replaced by their source.
    """
    from .feasibility import feasibility_filter

    rng = np.random.default_rng([seed, 11])
    out = []
    for H in ds.samples:
        Hd = perturb_csi(perturb_csi(H, sigma, rng, ESTIMATE), sigma, rng, DISTORT)
        out.append(Hd if feasibility_filter(Hd, ds.config).feasible else H)
    return Dataset(np.stack(out), ds.config, ds.seed, ds.ratios, None, metadata=dict(ds.metadata))


# ---------------------------------------------------------------------------
# experiments

MODELS = ("dipnet", "depnet", "pnet")


@dataclass
class ExperimentConfig:
    network: dict = field(default_factory=dict)
    data: Optional[str] = None
    n_samples: int = 10_000
    ratios: tuple = (0.9, 0.05, 0.05)
    model: str = "dipnet"
    kind: str = "affine"
    activation: Optional[str] = None
    hidden: tuple = (200, 200, 200)
    train: dict = field(default_factory=dict)
    correction: dict = field(default_factory=dict)
    fw: bool = True
    fw_cfg: dict = field(default_factory=dict)
    csi_sigma: float = 0.0
    robust: str = "off"
    out: str = "runs/experiment"
    seed: int = 0
    traces: int = 0  # samples for the GD/Newton convergence traces

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.robust not in ("off", "worstcase", "distort-train"):
            raise ConfigError(f"unknown robust mode {self.robust!r}")
        self.ratios = tuple(self.ratios)
        self.hidden = tuple(self.hidden)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**d)


def default_lam(model: str, cfg: NetworkConfig) -> float:
    if model == "dipnet":
        return 0.0
    return 1000.0 if cfg.model == "gaussian" else 10000.0


def loss_spec_for(model: str, kind: ConstraintKind, correction: CorrectionConfig) -> LossSpec:
    return LossSpec({"dipnet": "implicit", "depnet": "explicit", "pnet": "none"}[model], kind, correction)


def load_or_generate(ec: ExperimentConfig) -> Dataset:
    if ec.data:
        ds = load_dataset(ec.data)
        ds.ratios = ec.ratios
        return ds
    cfg = NetworkConfig(**ec.network)
    return gen_dataset(cfg, ec.n_samples, ec.seed, ec.ratios)


def train_model(ec: ExperimentConfig, tr: Dataset, va: Dataset, log=None):
    cfg = tr.config
    kind = make_kind(ec.kind, cfg)
    correction = CorrectionConfig(**ec.correction)
    spec = loss_spec_for(ec.model, kind, correction)
    tc = {"lam": default_lam(ec.model, cfg), "seed": ec.seed,
          "early_stop": "violation" if ec.model == "pnet" else "sum_rate", **ec.train}
    tcfg = TrainConfig(**tc)
    act = ec.activation or ("softmax" if ec.model == "pnet" else "sigmoid")
    model = MLPModel.for_config(cfg.B, cfg.Q, hidden=ec.hidden, activation=act, seed=ec.seed)
    best, history = train(model, tr, va, spec, tcfg, log)
    return best, history, spec, tcfg


def run_experiment(ec: ExperimentConfig, log=None) -> dict:
    """Train, project, optionally refine, and evaluate; every artefact goes under ``ec.out``."""
    out = Path(ec.out)
    out.mkdir(parents=True, exist_ok=True)
    stage = "data"
    try:
        ds = load_or_generate(ec)
        tr, va, te = split_dataset(ds)
        stage = "train"
        train_set = distorted_dataset(tr, ec.csi_sigma, ec.seed) if ec.robust == "distort-train" else tr
        model, history, spec, tcfg = train_model(ec, train_set, va, log)
        save_checkpoint(model, out / "model.npz", checkpoint_extra(ec, spec, ds.config))
        stage = "evaluate"
        method = network_method(model, spec)
        believed = project_on = None
        if ec.csi_sigma > 0:
            believed = estimate_channels(te, ec.csi_sigma, ec.seed)
            if ec.robust == "worstcase":
                project_on, _ = worst_case_channels(believed, ec.csi_sigma, ds.config)
        kind = spec.kind
        records, agg = evaluate(method, ec.model, te, believed, None, kind, project_on=project_on)
        all_records, aggs = list(records), [agg]
        if ec.fw and kind.is_affine:
            rec_fw, agg_fw = evaluate(method, ec.model + "+fw", te, believed, FWConfig(**ec.fw_cfg),
                                      kind, project_on=project_on)
            all_records += rec_fw
            aggs.append(agg_fw)
        write_records(all_records, out / "eval.csv")
        write_records(all_records, out / "eval_notime.csv", timing=False)
        write_records_history(history, out / "history.csv")
        if ec.traces:
            write_traces(te, spec.kind, CorrectionConfig(**ec.correction), ec.traces, ec.seed,
                         out / "traces.csv")
        summary = {"csv_schema": CSV_SCHEMA_VERSION, "experiment": asdict(ec),
                   "network": ds.config.to_dict(), "train": asdict(tcfg),
                   "aggregates": [asdict(a) for a in aggs],
                   "history": [asdict(h) for h in history]}
        write_json(summary, out / "summary.json")
        return summary
    except PowerProjError as exc:
        exc.args = (f"[{stage}] {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        raise


def checkpoint_extra(ec: ExperimentConfig, spec: LossSpec, cfg: NetworkConfig) -> dict:
    return {"model": ec.model, "kind": ec.kind, "loss_spec": spec.name,
            "correction": asdict(spec.correction), "network": cfg.to_dict()}


def write_records_history(history, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_sum_rate", "val_violation_prob", "lr", "seconds"])
    for h in history:
        w.writerow([h.epoch, _fmt(h.train_loss), _fmt(h.val_sum_rate), _fmt(h.val_violation_prob),
                    _fmt(h.lr), _fmt(h.seconds)])
    _atomic_write(Path(path), buf.getvalue().encode())


def convergence_traces(ds: Dataset, kind: ConstraintKind, correction: CorrectionConfig, n: int, seed: int,
                       steps: int = 100):
    """Long-format rows ``(sample, method, step_size, iteration, V)`` for GD and Newton from random starts."""
    rng = np.random.default_rng([seed, 3])
    rows = []
    for i, H in enumerate(ds.samples[:n]):
        inst = assemble_affine_constraints(H, ds.config)
        r = rng.uniform(0.0, 1.0, inst.U)
        for gamma in GD_STEP_GRID:
            c = CorrectionConfig(**{**asdict(correction), "step_size": gamma})
            for t, V in enumerate(gd_trajectory(r, inst, kind, c, steps)):
                rows.append((i, "gd", gamma, t, V))
        res = project_explicit(r, inst, kind, "test", correction)
        for t, V in enumerate(res.trace):
            rows.append((i, "newton", "", t, V))
    return rows


def write_traces(ds, kind, correction, n, seed, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", "method", "step_size", "iteration", "V"])
    for row in convergence_traces(ds, kind, correction, n, seed):
        w.writerow([_fmt(v) for v in row])
    _atomic_write(Path(path), buf.getvalue().encode())


ABLATION_ACTIVATIONS = ("affine", "relu", "sigmoid", "softmax")


def run_ablation(ec: ExperimentConfig, activations=ABLATION_ACTIVATIONS, log=None) -> dict:
    """Per-epoch validation curves of DIPNet for each output activation."""
    out = Path(ec.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_or_generate(ec)
    tr, va, _ = split_dataset(ds)
    rows, curves = [], {}
    for act in activations:
        sub = ExperimentConfig.from_dict({**asdict(ec), "model": "dipnet", "activation": act})
        _, history, _, _ = train_model(sub, tr, va, log)
        curves[act] = [asdict(h) for h in history]
        rows += [(act, h.epoch, h.val_sum_rate, h.val_violation_prob) for h in history]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["activation", "epoch", "val_sum_rate", "val_violation_prob"])
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _atomic_write(out / "ablation.csv", buf.getvalue().encode())
    write_json({"experiment": asdict(ec), "curves": curves}, out / "ablation.json")
    return curves


def report(summary_paths) -> list:
    """Flat rows ``(run, method, n, sum_rate, violation_prob, mean_time)`` from summary files."""
    rows = []
    for p in summary_paths:
        p = Path(p)
        if p.is_dir():
            p = p / "summary.json"
        s = json.loads(p.read_text())
        for a in s["aggregates"]:
            rows.append((str(p.parent), a["method"], a["n"], a["sum_rate"], a["violation_prob"],
                         a["mean_time"]))
    return rows

