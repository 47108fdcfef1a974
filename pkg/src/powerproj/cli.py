"""Command-line entry point: ``powerproj <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 infeasible input, 4 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .baselines import GAConfig
from .channel import NetworkConfig, gen_dataset, load_dataset, save_dataset, split_dataset
from .errors import ConfigError, InfeasibleInput, PowerProjError, SolverFailure
from .feasibility import feasibility_filter
from .nn import LossSpec, load_checkpoint, save_checkpoint
from .problem import assemble_affine_constraints
from .proj_explicit import CorrectionConfig, project_explicit
from .proj_implicit import qp_project
from .refine import FWConfig


def _read_config(path):
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


def _network_part(conf: dict) -> dict:
    return conf.get("network", conf if "experiment" not in conf else {})


def _split(ds, which):
    if which == "all":
        return ds
    tr, va, te = split_dataset(ds)
    return {"train": tr, "val": va, "test": te}[which]


def _write_rows(path, header, rows):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([ev._fmt(v) for v in row])
    finally:
        if path:
            fh.close()


def _experiment(args, conf, **over) -> ev.ExperimentConfig:
    d = {k: v for k, v in conf.items() if k in ev.ExperimentConfig.__dataclass_fields__}
    d.update({k: v for k, v in over.items() if v is not None})
    d.setdefault("seed", args.seed)
    return ev.ExperimentConfig.from_dict(d)


def _print_aggregates(aggs):
    for a in aggs:
        print(f"{a.method:>14}  n={a.n:<6d} sum_rate={a.sum_rate / 1e6:10.4f} Mbit/s  "
              f"violation={a.violation_prob:.4f}  time={a.mean_time * 1e3:.3f} ms")


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args, conf):
    net = dict(_network_part(conf))
    for key in ("B", "Q", "model", "P_max"):
        v = getattr(args, key, None)
        if v is not None:
            net[key] = v
    cfg = NetworkConfig(**net)
    ratios = tuple(args.ratios) if args.ratios else (0.9, 0.05, 0.05)
    ds = gen_dataset(cfg, args.samples, args.seed, ratios, args.threads)
    out = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({ds.candidates} candidates) to {out}")


def cmd_feasibility(args, conf):
    ds = load_dataset(args.data)
    cfg = ds.config
    rows = []
    for i, H in enumerate(ds.samples):
        rep = feasibility_filter(H, cfg)
        rows.append([i, int(rep.feasible), rep.reason, "" if rep.detail is None else rep.detail,
                     float(rep.rho.max())] + [float(r) for r in rep.rho])
    _write_rows(args.out, ["sample", "feasible", "reason", "detail", "rho_max"] +
                [f"rho_{q}" for q in range(cfg.Q)], rows)


def cmd_train(args, conf):
    ds = load_dataset(args.data)
    if args.ratios:
        ds.ratios = tuple(args.ratios)
    train = dict(conf.get("train", {}))
    for key, name in (("epochs", "epochs"), ("lam", "lam"), ("lr", "lr"), ("batch_size", "batch_size")):
        v = getattr(args, key)
        if v is not None:
            train[name] = v
    corr = dict(conf.get("correction", {}))
    if args.step_size is not None:
        corr["step_size"] = args.step_size
    ec = _experiment(args, conf, model=args.model, kind=args.kind, activation=args.activation,
                     train=train, correction=corr, data=args.data)
    tr, va, _ = split_dataset(ds)
    if args.distort:
        tr = ev.distorted_dataset(tr, args.distort, args.seed)

    def log(rec):
        print(f"epoch {rec.epoch:3d}  loss={rec.train_loss:.5g}  val_rate={rec.val_sum_rate / 1e6:.4f} Mbit/s  "
              f"val_violation={rec.val_violation_prob:.4f}  ({rec.seconds:.1f}s)", flush=True)

    model, history, spec, _ = ev.train_model(ec, tr, va, log)
    save_checkpoint(model, args.out, ev.checkpoint_extra(ec, spec, ds.config))
    if args.history:
        ev.write_records_history(history, args.history)
    print(f"saved {args.out}")


def _load_model(path):
    model, extra = load_checkpoint(path)
    if "loss_spec" not in extra:
        raise ConfigError(f"{path} carries no pipeline description")
    net = NetworkConfig(**extra["network"])
    kind = ev.make_kind(extra["kind"], net)
    spec = LossSpec(extra["loss_spec"], kind, CorrectionConfig(**extra["correction"]))
    return model, spec, extra


def cmd_project(args, conf):
    ds = _split(load_dataset(args.data), args.split)
    R = np.atleast_2d(np.loadtxt(args.r, delimiter=",", ndmin=2))
    if R.shape[1] != ds.config.U:
        raise ConfigError(f"each row of {args.r} needs {ds.config.U} entries")
    if len(R) > len(ds):
        raise ConfigError("more rows than samples in the selected split")
    kind = ev.make_kind(args.kind, ds.config)
    corr = CorrectionConfig(**conf.get("correction", {}))
    rows, traces = [], []
    for i, r in enumerate(R):
        inst = assemble_affine_constraints(ds.samples[i], ds.config)
        if args.method == "implicit":
            if not kind.is_affine:
                raise ConfigError("implicit projection supports the affine kind only")
            sol = qp_project(r, inst)
            rows.append([i, *sol.p, sol.kkt_residual, sol.iterations, ""])
        else:
            res = project_explicit(r, inst, kind, args.mode, corr)
            rows.append([i, *res.p, res.V, res.steps, int(res.converged)])
            traces += [(i, t, V) for t, V in enumerate(res.trace)]
    U = ds.config.U
    third = "kkt_residual" if args.method == "implicit" else "V"
    _write_rows(args.out, ["sample"] + [f"x{j}" for j in range(U)] + [third, "iterations", "converged"], rows)
    if args.trace and traces:
        _write_rows(args.trace, ["sample", "iteration", "V"], traces)


def _eval_and_write(args, ds, methods, believed=None, project_on=None, kind=None):
    records, aggs = [], []
    for name, method, fw in methods:
        rec, agg = ev.evaluate(method, name, ds, believed, fw, kind or ev.AFFINE, project_on=project_on)
        records += rec
        aggs.append(agg)
    if args.out:
        ev.write_records(records, args.out)
        ev.write_json({"csv_schema": ev.CSV_SCHEMA_VERSION, "aggregates": [asdict(a) for a in aggs]},
                      Path(args.out).with_suffix(".json"))
    _print_aggregates(aggs)


def cmd_refine(args, conf):
    model, spec, extra = _load_model(args.ckpt)
    ds = _split(load_dataset(args.data), args.split)
    method = ev.network_method(model, spec)
    methods = [(extra["model"], method, None)]
    if args.fw:
        methods.append((extra["model"] + "+fw", method, FWConfig(**conf.get("fw_cfg", {}))))
    _eval_and_write(args, ds, methods, kind=spec.kind)


def cmd_benchmark(args, conf):
    ds = _split(load_dataset(args.data), args.split)
    if args.method == "pnet":
        if not args.ckpt:
            raise ConfigError("benchmark --method pnet needs --ckpt")
        model, spec, _ = _load_model(args.ckpt)
        method = ev.network_method(model, spec)
    elif args.method == "ga":
        ga = {**conf.get("ga", {}), "seed": args.seed}
        if args.generations:
            ga["generations"] = args.generations
        method = ev.ga_method(GAConfig(**ga))
    else:
        method = ev.minpower_method()
    _eval_and_write(args, ds, [(args.method, method, None)])


def cmd_eval(args, conf):
    model, spec, extra = _load_model(args.ckpt)
    ds = _split(load_dataset(args.data), args.split)
    believed = project_on = None
    if args.csi_sigma:
        believed = ev.estimate_channels(ds, args.csi_sigma, args.seed)
        if args.robust == "worstcase":
            project_on, _ = ev.worst_case_channels(believed, args.csi_sigma, ds.config)
    elif args.robust != "off":
        raise ConfigError("--robust needs --csi-sigma > 0")
    method = ev.network_method(model, spec)
    name = extra["model"] if args.robust == "off" else f"{extra['model']}[{args.robust}]"
    methods = [(name, method, None)]
    if args.fw and spec.kind.is_affine:
        methods.append((name + "+fw", method, FWConfig(**conf.get("fw_cfg", {}))))
    _eval_and_write(args, ds, methods, believed, project_on, spec.kind)


def cmd_ablate(args, conf):
    train = dict(conf.get("train", {}))
    if args.epochs is not None:
        train["epochs"] = args.epochs
    ec = _experiment(args, conf, data=args.data, out=args.out, train=train)
    curves = ev.run_ablation(ec, log=None)
    for act, hist in curves.items():
        last = hist[-1]
        print(f"{act:>8}: final val_rate={last['val_sum_rate'] / 1e6:.4f} Mbit/s  "
              f"val_violation={last['val_violation_prob']:.4f}")


def cmd_report(args, conf):
    rows = ev.report(args.runs)
    _write_rows(args.out, ["run", "method", "n", "sum_rate", "violation_prob", "mean_time"], rows)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="powerproj", description="Feasible power control with projection layers.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config", help="JSON configuration file")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a feasible channel dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--model", choices=["gaussian", "pathloss"])
    g.add_argument("--B", type=int)
    g.add_argument("--Q", type=int)
    g.add_argument("--P-max", dest="P_max", type=float)
    g.add_argument("--ratios", type=float, nargs=3)
    g.set_defaults(func=cmd_gen_data)

    f = sub.add_parser("feasibility-check", help="per-sample feasibility report (CSV)")
    f.add_argument("--data", required=True)
    f.add_argument("--out")
    f.set_defaults(func=cmd_feasibility)

    t = sub.add_parser("train", help="train DIPNet, DEPNet or PNet")
    t.add_argument("--data", required=True)
    t.add_argument("--model", choices=list(ev.MODELS), required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--kind", choices=["affine", "rate", "ee"], default="affine")
    t.add_argument("--activation", choices=["sigmoid", "softmax", "relu", "affine"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--lam", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--step-size", dest="step_size", type=float)
    t.add_argument("--ratios", type=float, nargs=3)
    t.add_argument("--distort", type=float, default=0.0, help="train on artificially distorted CSI")
    t.add_argument("--history")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("project", help="project raw outputs (rows of a CSV, units of P_max)")
    pr.add_argument("--method", choices=["implicit", "explicit"], required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--r", required=True)
    pr.add_argument("--mode", choices=["train", "test"], default="test")
    pr.add_argument("--kind", choices=["affine", "rate", "ee"], default="affine")
    pr.add_argument("--split", choices=["train", "val", "test", "all"], default="all")
    pr.add_argument("--out")
    pr.add_argument("--trace", help="write the V trajectory (explicit only)")
    pr.set_defaults(func=cmd_project)

    for name, fn, helptext in (("refine", cmd_refine, "evaluate a model with and without Frank-Wolfe"),
                               ("eval", cmd_eval, "evaluate a trained model")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--ckpt", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
        e.add_argument("--fw", action="store_true")
        e.add_argument("--out")
        if name == "eval":
            e.add_argument("--csi-sigma", dest="csi_sigma", type=float, default=0.0)
            e.add_argument("--robust", choices=["off", "worstcase", "distort-train"], default="off")
        e.set_defaults(func=fn)

    b = sub.add_parser("benchmark", help="baseline methods")
    b.add_argument("--method", choices=["pnet", "ga", "minpower"], required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--ckpt")
    b.add_argument("--generations", type=int)
    b.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    b.add_argument("--out")
    b.set_defaults(func=cmd_benchmark)

    a = sub.add_parser("ablate", help="output-activation sweep for DIPNet")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--epochs", type=int)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="collect aggregates from run directories")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, FileNotFoundError)):
        return 2
    if isinstance(exc, InfeasibleInput):
        return 3
    if isinstance(exc, SolverFailure):
        return 4
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        conf = _read_config(args.config)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        args.func(args, conf)
    except (PowerProjError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
