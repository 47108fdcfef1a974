"""Fully-connected backbone with hand-written reverse mode, Adam, and training.

Hidden blocks are dense -> batch-norm -> ReLU -> dropout.  Inputs are raw
channel gains; the model takes log10 and standardises them with statistics
fitted on the training split, because path-loss gains span ten or more
decades.  Outputs are in units of P_max (the normalised variable of
:mod:`powerproj.problem`).
"""

from __future__ import annotations

import json
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .channel import Dataset, tensor_to_input
from .errors import ConfigError, DivergenceDetected, NonFiniteActivation, TapeMismatch
from .problem import AFFINE, ConstraintKind, ProblemInstance, assemble_affine_constraints, violation, \
    violation_derivatives
from .proj_explicit import CorrectionConfig, project_explicit, project_explicit_vjp
from .proj_implicit import qp_project, qp_vjp

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("sigmoid", "softmax", "relu", "affine")
BN_EPS = 1e-5
VIOLATION_TOL = 1e-6


# ---------------------------------------------------------------------------
# model

class MLPModel:
    def __init__(self, in_dim: int, out_dim: int, B: int, hidden=(200, 200, 200),
                 activation: str = "sigmoid", dropout: float = 0.1, bn_momentum: float = 0.1,
                 seed: int = 0):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown output activation {activation!r}")
        if not 0 <= dropout < 1 or not 0 < bn_momentum <= 1:
            raise ConfigError("need 0 <= dropout < 1 and 0 < bn_momentum <= 1")
        if out_dim % B:
            raise ConfigError("output dimension must be a multiple of B")
        self.in_dim, self.out_dim, self.B = int(in_dim), int(out_dim), int(B)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.dropout = float(dropout)
        self.bn_momentum = float(bn_momentum)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.stats: dict[str, np.ndarray] = {}
        sizes = (self.in_dim,) + self.hidden + (self.out_dim,)
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(a)  # fan-in scaled uniform
            self.params[f"W{i}"] = rng.uniform(-bound, bound, (a, b))
            self.params[f"b{i}"] = np.zeros(b)
            if i < len(self.hidden):
                self.params[f"gamma{i}"] = np.ones(b)
                self.params[f"beta{i}"] = np.zeros(b)
                self.stats[f"mean{i}"] = np.zeros(b)
                self.stats[f"var{i}"] = np.ones(b)
        self.stats["in_mean"] = np.zeros(self.in_dim)
        self.stats["in_std"] = np.ones(self.in_dim)
        self.opt = AdamState()

    @classmethod
    def for_config(cls, B: int, Q: int, **kw) -> "MLPModel":
        U = B * Q
        return cls(B * U, U, B, **kw)

    def fit_input(self, X):
        """Standardisation statistics of log10 gains over the rows of ``X``."""
        L = np.log10(np.asarray(X, dtype=float))
        self.stats["in_mean"] = L.mean(axis=0)
        self.stats["in_std"] = np.maximum(L.std(axis=0), 1e-6)

    def hyper(self) -> dict:
        return {"in_dim": self.in_dim, "out_dim": self.out_dim, "B": self.B, "hidden": list(self.hidden),
                "activation": self.activation, "dropout": self.dropout,
                "bn_momentum": self.bn_momentum, "seed": self.seed}

    def copy(self) -> "MLPModel":
        m = MLPModel(**{**self.hyper(), "hidden": tuple(self.hidden)})
        m.params = {k: v.copy() for k, v in self.params.items()}
        m.stats = {k: v.copy() for k, v in self.stats.items()}
        m.opt = self.opt.copy()
        return m


@dataclass
class GradTape:
    model_id: int
    shapes: dict
    x0: np.ndarray
    layers: list
    z_out: np.ndarray
    r: np.ndarray


def _softmax_per_bs(z, B):
    N, U = z.shape
    Zq = z.reshape(N, U // B, B)  # [n, q, b]; user q*B + b belongs to BS b
    Zq = Zq - Zq.max(axis=1, keepdims=True)
    E = np.exp(Zq)
    return (E / E.sum(axis=1, keepdims=True)).reshape(N, U)


def _output(z, activation, B):
    if activation == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if activation == "softmax":
        return _softmax_per_bs(z, B)
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z.copy()


def _output_backward(g, z, r, activation, B):
    if activation == "sigmoid":
        return g * r * (1.0 - r)
    if activation == "softmax":
        N, U = r.shape
        R = r.reshape(N, U // B, B)
        G = g.reshape(N, U // B, B)
        return (R * (G - (G * R).sum(axis=1, keepdims=True))).reshape(N, U)
    if activation == "relu":
        return g * (z > 0)
    return g


def forward(model: MLPModel, h, mode: str = "eval", rng=None):
    """Network output for gains ``h`` (one input vector or a batch of rows).

    ``mode="train"`` uses batch statistics (and updates the running ones) and
    draws dropout masks from ``rng``; ``mode="eval"`` is a pure function.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    h = np.asarray(h, dtype=float)
    single = h.ndim == 1
    X = np.atleast_2d(h)
    if X.shape[1] != model.in_dim:
        raise ConfigError(f"expected inputs of width {model.in_dim}, got {X.shape[1]}")
    if not np.all(np.isfinite(X)) or np.any(X <= 0):
        raise NonFiniteActivation("channel gains must be finite and positive")
    train = mode == "train"
    if train and model.dropout > 0 and rng is None:
        raise ConfigError("train mode with dropout needs an rng")
    P, S = model.params, model.stats
    a = (np.log10(X) - S["in_mean"]) / S["in_std"]
    x0 = a
    layers = []
    for i in range(len(model.hidden)):
        z = a @ P[f"W{i}"] + P[f"b{i}"]
        if train:
            mu, var = z.mean(axis=0), z.var(axis=0)
            m = model.bn_momentum
            S[f"mean{i}"] = (1 - m) * S[f"mean{i}"] + m * mu
            S[f"var{i}"] = (1 - m) * S[f"var{i}"] + m * var
        else:
            mu, var = S[f"mean{i}"], S[f"var{i}"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        zhat = (z - mu) * inv
        y = P[f"gamma{i}"] * zhat + P[f"beta{i}"]
        act = np.maximum(y, 0.0)
        if train and model.dropout > 0:
            mask = (rng.random(act.shape) >= model.dropout) / (1.0 - model.dropout)
        else:
            mask = None
        out = act * mask if mask is not None else act
        layers.append({"a": a, "zhat": zhat, "inv": inv, "y": y, "mask": mask, "batch": train})
        a = out
    k = len(model.hidden)
    z = a @ P[f"W{k}"] + P[f"b{k}"]
    r = _output(z, model.activation, model.B)
    if not np.all(np.isfinite(r)):
        raise NonFiniteActivation("non-finite network output")
    layers.append({"a": a})
    tape = GradTape(id(model), {n: v.shape for n, v in P.items()}, x0, layers, z, r)
    return (r[0] if single else r), tape


def backward(model: MLPModel, tape: GradTape, grad_r) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter.

    ``grad_r`` is dloss/dr with the shape of the forward output.  The gradient
    w.r.t. the standardised input is returned under the key ``"input"``.
    """
    if not isinstance(tape, GradTape) or tape.model_id != id(model) or \
            tape.shapes != {n: v.shape for n, v in model.params.items()}:
        raise TapeMismatch("tape was recorded on a different model")
    g = np.atleast_2d(np.asarray(grad_r, dtype=float))
    if g.shape != tape.r.shape:
        raise TapeMismatch(f"upstream gradient shape {g.shape} does not match output {tape.r.shape}")
    P = model.params
    grads = {}
    k = len(model.hidden)
    gz = _output_backward(g, tape.z_out, tape.r, model.activation, model.B)
    a = tape.layers[-1]["a"]
    grads[f"W{k}"] = a.T @ gz
    grads[f"b{k}"] = gz.sum(axis=0)
    ga = gz @ P[f"W{k}"].T
    for i in reversed(range(k)):
        L = tape.layers[i]
        if L["mask"] is not None:
            ga = ga * L["mask"]
        gy = ga * (L["y"] > 0)
        grads[f"gamma{i}"] = (gy * L["zhat"]).sum(axis=0)
        grads[f"beta{i}"] = gy.sum(axis=0)
        gzhat = gy * P[f"gamma{i}"]
        if L["batch"]:
            n = gzhat.shape[0]
            gz = L["inv"] / n * (n * gzhat - gzhat.sum(axis=0) - L["zhat"] * (gzhat * L["zhat"]).sum(axis=0))
        else:
            gz = gzhat * L["inv"]
        grads[f"W{i}"] = L["a"].T @ gz
        grads[f"b{i}"] = gz.sum(axis=0)
        ga = gz @ P[f"W{i}"].T
    grads["input"] = ga
    return grads


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    lr: Optional[float] = None

    def copy(self) -> "AdamState":
        return AdamState({k: v.copy() for k, v in self.m.items()},
                         {k: v.copy() for k, v in self.v.items()}, self.t, self.lr)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 10
    lr_decay: float = 0.99
    epochs: int = 20
    lam: float = 1000.0
    early_stop: str = "sum_rate"  # or "violation"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or not 0 < self.lr_decay <= 1 or self.lam < 0:
            raise ConfigError("need lr > 0, 0 < lr_decay <= 1, lam >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.early_stop not in ("sum_rate", "violation"):
            raise ConfigError(f"unknown early-stop metric {self.early_stop!r}")


def adam_update(model: MLPModel, grads: dict, step_count: int, cfg: TrainConfig) -> MLPModel:
    """One bias-corrected Adam step at learning rate ``model.opt.lr``."""
    st = model.opt
    if st.lr is None:
        st.lr = cfg.lr
    st.t = step_count
    for name, p in model.params.items():
        g = grads[name]
        if name not in st.m:
            st.m[name] = np.zeros_like(p)
            st.v[name] = np.zeros_like(p)
        st.m[name] = cfg.beta1 * st.m[name] + (1 - cfg.beta1) * g
        st.v[name] = cfg.beta2 * st.v[name] + (1 - cfg.beta2) * g * g
        mhat = st.m[name] / (1 - cfg.beta1 ** step_count)
        vhat = st.v[name] / (1 - cfg.beta2 ** step_count)
        p -= st.lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return model


# ---------------------------------------------------------------------------
# losses and the projection pipelines

@dataclass
class LossSpec:
    """Which projection sits between the network and the loss.

    ``"none"``: raw outputs, soft loss ``-R + lam V`` (PNet).
    ``"implicit"``: Euclidean QP projection, loss ``-R`` (DIPNet).
    ``"explicit"``: unrolled gradient correction in training and Newton at
    test time, soft loss (DEPNet).
    """
    name: str = "implicit"
    kind: ConstraintKind = AFFINE
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)

    def __post_init__(self):
        if self.name not in ("none", "implicit", "explicit"):
            raise ConfigError(f"unknown loss spec {self.name!r}")
        if self.name == "implicit" and not self.kind.is_affine:
            raise ConfigError("implicit projection needs affine constraints")


def sample_loss(r, inst: ProblemInstance, spec: LossSpec, lam: float):
    """Training loss on one sample and a closure mapping to dloss/dr.

    Sum-rate enters in Mbit/s so that it is of order one.
    """
    r = np.asarray(r, dtype=float)
    if spec.name == "implicit":
        sol = qp_project(r, inst)
        x = sol.p
        back = lambda g: qp_vjp(sol, inst, g)  # noqa: E731
    elif spec.name == "explicit":
        res = project_explicit(r, inst, spec.kind, "train", spec.correction)
        x = res.p
        back = lambda g: project_explicit_vjp(res.tape, g)  # noqa: E731
    else:
        x = r
        back = lambda g: g  # noqa: E731
    xs = np.maximum(x, 0.0)
    R = inst.sum_rate(xs) / 1e6
    gR = inst.sum_rate_grad(xs) / 1e6 * (x >= 0)
    loss, gx = -R, -gR
    if spec.name != "implicit" and lam > 0:
        st = violation_derivatives(x, inst, spec.kind, hessian=False)
        loss += lam * st.V
        gx = gx + lam * st.grad
    return loss, R, lambda: back(gx)


def infer(r, inst: ProblemInstance, spec: LossSpec):
    """Test-time output in units of P_max: projection for DIPNet/DEPNet, raw for PNet."""
    if spec.name == "implicit":
        return qp_project(r, inst).p
    if spec.name == "explicit":
        return project_explicit(r, inst, spec.kind, "test", spec.correction).p
    return np.asarray(r, dtype=float)


def instances_for(ds: Dataset) -> list:
    return [assemble_affine_constraints(H, ds.config) for H in ds.samples]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_sum_rate: float  # mean zeroed sum-rate, bits/s
    val_violation_prob: float
    lr: float
    seconds: float


def validate(model: MLPModel, X, instances, spec: LossSpec):
    r, _ = forward(model, X, "eval")
    total, bad = 0.0, 0
    for ri, inst in zip(r, instances):
        x = infer(ri, inst, spec)
        if violation(np.maximum(x, 0.0) if spec.name == "none" else x, inst, spec.kind).V > VIOLATION_TOL \
                or np.any(x < 0):
            bad += 1
        else:
            total += inst.sum_rate(x)
    n = len(instances)
    return total / n, bad / n


def train(model: MLPModel, train_set: Dataset, val_set: Dataset, spec: LossSpec, cfg: TrainConfig,
          log: Optional[Callable[[EpochRecord], None]] = None):
    """Mini-batch Adam on the pipeline loss; returns ``(best_model, history)``.

    The best model is the epoch checkpoint with the highest validation
    sum-rate (``early_stop="sum_rate"``) or the lowest validation violation
    probability, ties broken by sum-rate (``"violation"``).
    """
    rng = np.random.default_rng(cfg.seed)
    X = np.stack([tensor_to_input(H) for H in train_set.samples])
    Xv = np.stack([tensor_to_input(H) for H in val_set.samples])
    tr_inst, va_inst = instances_for(train_set), instances_for(val_set)
    model.fit_input(X)
    if model.opt.lr is None:
        model.opt.lr = cfg.lr
    lam = cfg.lam if spec.name != "implicit" else 0.0
    history, best, best_key = [], None, None
    step = model.opt.t
    n = len(X)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            r, tape = forward(model, X[idx], "train", rng)
            grad_r = np.zeros_like(r)
            batch_loss = 0.0
            for j, i in enumerate(idx):
                loss, _, back = sample_loss(r[j], tr_inst[i], spec, lam)
                batch_loss += loss
                grad_r[j] = back()
            batch_loss /= len(idx)
            if not np.isfinite(batch_loss) or not np.all(np.isfinite(grad_r)):
                raise DivergenceDetected(f"non-finite loss in epoch {epoch}")
            grads = backward(model, tape, grad_r / len(idx))
            step += 1
            adam_update(model, grads, step, cfg)
            losses.append(batch_loss)
        rate, vprob = validate(model, Xv, va_inst, spec)
        rec = EpochRecord(epoch, float(np.mean(losses)), rate, vprob, model.opt.lr,
                          time.perf_counter() - t0)
        history.append(rec)
        if log:
            log(rec)
        key = (rate,) if cfg.early_stop == "sum_rate" else (-vprob, rate)
        if best_key is None or key > best_key:
            best, best_key = model.copy(), key
        model.opt.lr *= cfg.lr_decay
    return best, history


def predict(model: MLPModel, ds: Dataset, spec: LossSpec, instances=None):
    """Projected outputs in watts, one row per sample."""
    instances = instances or instances_for(ds)
    X = np.stack([tensor_to_input(H) for H in ds.samples])
    r, _ = forward(model, X, "eval")
    return np.stack([inst.to_watts(infer(ri, inst, spec)) for ri, inst in zip(r, instances)])


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: MLPModel, path, extra: Optional[dict] = None):
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays.update({f"stat/{k}": v for k, v in model.stats.items()})
    arrays.update({f"adam_m/{k}": v for k, v in model.opt.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in model.opt.v.items()})
    meta = {"format_version": CHECKPOINT_VERSION, "model": model.hyper(),
            "adam": {"t": model.opt.t, "lr": model.opt.lr}, "extra": extra or {}}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """``(model, extra)`` from a file written by :func:`save_checkpoint`."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('format_version')}")
        hp = meta["model"]
        model = MLPModel(**{**hp, "hidden": tuple(hp["hidden"])})
        for key in z.files:
            if key == "meta":
                continue
            group, name = key.split("/", 1)
            target = {"param": model.params, "stat": model.stats,
                      "adam_m": model.opt.m, "adam_v": model.opt.v}[group]
            target[name] = z[key].copy()
    model.opt.t = meta["adam"]["t"]
    model.opt.lr = meta["adam"]["lr"]
    return model, meta["extra"]
