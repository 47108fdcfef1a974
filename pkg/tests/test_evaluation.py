import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from powerproj import cli
from powerproj import evaluation as ev
from powerproj.baselines import GAConfig
from powerproj.channel import NetworkConfig, gen_dataset, split_dataset
from powerproj.nn import LossSpec, MLPModel, TrainConfig, train
from powerproj.refine import FWConfig

GOLDEN = Path(__file__).parent / "data" / "golden_eval.csv"


@pytest.fixture(scope="module")
def five():
    return gen_dataset(NetworkConfig(B=2, Q=2, model="pathloss"), 5, seed=5)


@pytest.fixture(scope="module")
def small():
    return gen_dataset(NetworkConfig(B=2, Q=2, model="pathloss"), 120, seed=6)


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_golden_csv(five):
    recs = ev.evaluate(ev.minpower_method(), "minpower", five)[0] + \
        ev.evaluate(ev.ga_method(GAConfig(generations=20)), "ga", five)[0]
    got, want = _rows(ev.records_to_csv(recs, timing=False)), _rows(GOLDEN.read_text())
    assert [list(r) for r in got] == [list(r) for r in want]
    for a, b in zip(got, want):
        assert (a["sample_id"], a["method"], a["violated"], a["fw_applied"]) == \
            (b["sample_id"], b["method"], b["violated"], b["fw_applied"])
        for k in ("sum_rate", "raw_sum_rate", "V_residual"):
            assert float(a[k]) == pytest.approx(float(b[k]), rel=1e-9, abs=1e-20)


def test_csv_schema(five):
    recs, _ = ev.evaluate(ev.minpower_method(), "minpower", five)
    header = ev.records_to_csv(recs).splitlines()[0].split(",")
    assert tuple(header) == ev.CSV_COLUMNS
    assert "wall_time" not in ev.records_to_csv(recs, timing=False).splitlines()[0]


def test_min_power_never_violates(small):
    _, agg = ev.evaluate(ev.minpower_method(), "minpower", small)
    assert agg.violation_prob == 0 and agg.sum_rate > 0


def test_zero_output_always_violates(five):
    recs, agg = ev.evaluate(lambda H, inst: np.zeros(inst.U), "zero", five)
    assert agg.violation_prob == 1 and agg.sum_rate == 0
    assert all(r.sum_rate == 0 for r in recs)


def test_negative_output_is_violation(five):
    _, agg = ev.evaluate(lambda H, inst: -np.ones(inst.U), "neg", five)
    assert agg.violation_prob == 1


def test_fw_never_lowers_per_sample_rate(small):
    tr, va, te = split_dataset(small, (0.7, 0.1, 0.2))
    m = MLPModel.for_config(2, 2, hidden=(32, 32))
    spec = LossSpec("implicit")
    best, _ = train(m, tr, va, spec, TrainConfig(epochs=2))
    method = ev.network_method(best, spec)
    plain, a = ev.evaluate(method, "dipnet", te)
    refined, b = ev.evaluate(method, "dipnet+fw", te, fw=FWConfig())
    assert a.violation_prob == 0 and b.violation_prob == 0
    assert all(r2.sum_rate >= r1.sum_rate for r1, r2 in zip(plain, refined))
    assert all(r.fw_applied for r in refined)


def test_worst_case_projects_on_scaled_channel(small):
    te = small.subset(range(20))
    H_hat = ev.estimate_channels(te, 0.05, 0)
    H_w, chi = ev.worst_case_channels(H_hat, 0.05, te.config)
    assert np.all((chi >= 0) | np.isnan(chi))
    recs, _ = ev.evaluate(ev.minpower_method(), "mp", te, H_hat, project_on=H_w)
    assert len(recs) == 20


def _tiny_experiment(tmp_path, name, **kw):
    d = dict(network={"B": 2, "Q": 1, "model": "pathloss"}, n_samples=60, model="dipnet",
             hidden=(16,), train={"epochs": 2}, out=str(tmp_path / name), seed=3, traces=2)
    d.update(kw)
    return ev.ExperimentConfig.from_dict(d)


def test_rerun_is_byte_identical(tmp_path):
    a = ev.run_experiment(_tiny_experiment(tmp_path, "a"))
    ev.run_experiment(_tiny_experiment(tmp_path, "b"))
    for f in ("eval_notime.csv", "traces.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert {x["method"] for x in a["aggregates"]} == {"dipnet", "dipnet+fw"}
    assert json.loads((tmp_path / "a" / "summary.json").read_text())["csv_schema"] == ev.CSV_SCHEMA_VERSION


def test_ablation_sweeps_activations(tmp_path):
    ec = _tiny_experiment(tmp_path, "abl", train={"epochs": 2})
    curves = ev.run_ablation(ec)
    assert set(curves) == {"affine", "relu", "sigmoid", "softmax"}
    assert all(len(c) == 2 for c in curves.values())
    rows = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    assert len(rows) == 1 + 4 * 2


def test_report_reads_summaries(tmp_path):
    ev.run_experiment(_tiny_experiment(tmp_path, "r", fw=False))
    rows = ev.report([tmp_path / "r"])
    assert len(rows) == 1 and rows[0][1] == "dipnet"


def test_experiment_config_rejects_unknown_keys():
    with pytest.raises(Exception):
        ev.ExperimentConfig.from_dict({"bogus": 1})


# --- command line -----------------------------------------------------------

def test_cli_pipeline(tmp_path, capsys):
    d = tmp_path / "d"
    assert cli.main(["--seed", "2", "gen-data", "--out", str(d), "--samples", "30",
                     "--model", "pathloss", "--B", "2", "--Q", "1"]) == 0
    assert cli.main(["feasibility-check", "--data", str(d), "--out", str(tmp_path / "f.csv")]) == 0
    rows = (tmp_path / "f.csv").read_text().splitlines()
    assert len(rows) == 31 and all(r.split(",")[1] == "1" for r in rows[1:])

    r = tmp_path / "r.csv"
    np.savetxt(r, np.random.default_rng(0).uniform(0, 1, (4, 2)), delimiter=",")
    for method in ("implicit", "explicit"):
        out = tmp_path / f"p_{method}.csv"
        assert cli.main(["project", "--method", method, "--data", str(d), "--r", str(r),
                         "--out", str(out), "--trace", str(tmp_path / "t.csv")]) == 0
        assert len(out.read_text().splitlines()) == 5

    ck = tmp_path / "m.npz"
    assert cli.main(["train", "--data", str(d), "--model", "dipnet", "--out", str(ck), "--epochs", "1"]) == 0
    assert cli.main(["refine", "--ckpt", str(ck), "--data", str(d), "--fw", "--out",
                     str(tmp_path / "ref.csv")]) == 0
    assert cli.main(["eval", "--ckpt", str(ck), "--data", str(d), "--csi-sigma", "0.01",
                     "--robust", "worstcase"]) == 0
    assert cli.main(["benchmark", "--method", "minpower", "--data", str(d)]) == 0
    assert "minpower" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path / "x"), "--samples", "3", "--B", "0"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["--config", str(bad), "report", "x"]) == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["train"])
    assert e.value.code == 2
    # a budget no sample can meet: nothing survives the feasibility filter
    assert cli.main(["gen-data", "--out", str(tmp_path / "y"), "--samples", "3", "--model", "pathloss",
                     "--P-max", "1e-12"]) == 3


def test_cli_solver_failure_code():
    from powerproj.errors import MaxIterations
    assert cli.exit_code(MaxIterations("x")) == 4
