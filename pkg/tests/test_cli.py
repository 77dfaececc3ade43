import csv
import json
from pathlib import Path

import numpy as np
import pytest

from cfm import cli, reports
from cfm.errors import EmptyReport

FAIR_COLS = ["dataset", "method", "delta", "seed", "acc", "mcc", "unfair_area", "cf_unfair_area", "nonrobust_area"]
FAIR_AGG = ["dataset", "method", "delta", "n"] + [
    f"{f}_{s}" for f in ("acc", "mcc", "unfair_area", "cf_unfair_area", "nonrobust_area") for s in ("mean", "std")
]
METRIC_COLS = ["dataset", "method", "delta", "seed", "acc", "fn", "fp", "mcc", "mae", "rmse"]


def write_cfg(tmp_path, name, cfg):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def run_ok(argv, capsys):
    code = cli.run(argv)
    out, err = capsys.readouterr()
    assert code == 0, err
    return json.loads(out)


def test_gen_data_schema(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "g.json", {"task": "gen-data", "scm": "lin", "count": 2000, "seeds": [0]})
    summary = run_ok(["gen-data", cfg, "--out", str(tmp_path / "o")], capsys)
    assert summary["files"] == ["lin_seed0.csv"]
    with open(tmp_path / "o" / "lin_seed0.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["s", "x1", "x2"]
    assert len(rows) == 2001 and all(len(r) == 3 for r in rows)
    assert (tmp_path / "o" / "metadata.json").is_file()


def clf_cfg(tmp_path, **over):
    cfg = {"task": "train-clf", "scms": ["lin", "nlm"], "methods": ["ERM", "AL"], "deltas": [0.01],
           "seeds": [0, 1], "count": 200, "epochs": 2, "K": 10}
    cfg.update(over)
    return write_cfg(tmp_path, "c.json", cfg)


def test_train_clf_golden_headers_and_reproducible(tmp_path, capsys, monkeypatch):
    cfg = clf_cfg(tmp_path)
    run_ok(["train-clf", cfg, "--out", str(tmp_path / "a")], capsys)
    monkeypatch.setenv("CFM_THREADS", "3")
    run_ok(["train-clf", cfg, "--out", str(tmp_path / "b")], capsys)
    a, b = tmp_path / "a", tmp_path / "b"
    assert header(a / "report.csv") == FAIR_COLS
    assert header(a / "aggregate.csv") == FAIR_AGG
    doc = json.loads((a / "report.json").read_text())
    assert sorted(doc) == ["rows", "schema"] and doc["schema"] == reports.SCHEMA
    assert sorted(doc["rows"][0]) == sorted(FAIR_COLS)
    assert len(doc["rows"]) == 8
    plots = sorted(p.name for p in (a / "plot_data").iterdir())
    assert plots == sorted(f"fig_{f}.csv" for f in reports.FAIRNESS_FIELDS)
    assert header(a / "plot_data" / "fig_unfair_area.csv") == ["panel", "group", "value", "ci"]
    for rel in ["report.json", "report.csv", "aggregate.csv", *(f"plot_data/{p}" for p in plots)]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    assert len(list((a / "checkpoints").iterdir())) == 8
    meta = json.loads((a / "metadata.json").read_text())
    assert {"elapsed_s", "started", "task"} <= set(meta)


def test_unfair_area_plot_values_are_proportions(tmp_path, capsys):
    run_ok(["train-clf", clf_cfg(tmp_path, scms=["lin"], methods=["ERM"]), "--out", str(tmp_path / "o")], capsys)
    with open(tmp_path / "o" / "plot_data" / "fig_unfair_area.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(0 <= float(r["value"]) <= 1 for r in rows)
    assert rows[0]["panel"] == "lin delta=0.01" and rows[0]["group"] == "ERM"


def test_seed_override_and_eval_clf_roundtrip(tmp_path, capsys):
    cfg = clf_cfg(tmp_path, scms=["lin"], methods=["ERM"])
    run_ok(["train-clf", cfg, "--out", str(tmp_path / "t"), "--seed", "1"], capsys)
    rows = json.loads((tmp_path / "t" / "report.json").read_text())["rows"]
    assert [r["seed"] for r in rows] == [1]
    ev = write_cfg(tmp_path, "e.json", {"task": "eval-clf", "scm": "lin", "seeds": [1], "count": 200, "K": 10,
                                        "checkpoint": str(tmp_path / "t" / "checkpoints" / "clf_lin_ERM_d0p01_s1.json"),
                                        "label": "ERM"})
    run_ok(["eval-clf", ev, "--out", str(tmp_path / "e")], capsys)
    again = json.loads((tmp_path / "e" / "report.json").read_text())["rows"]
    assert again == rows


def test_train_metric_distance_desk(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "m.json", {"task": "train-metric", "scm": "lin", "scenarios": ["distance"],
                                         "deltas": [0.1], "seeds": [0], "preset": "desk"})
    run_ok(["train-metric", cfg, "--out", str(tmp_path / "m")], capsys)
    rows = json.loads((tmp_path / "m" / "report.json").read_text())["rows"]
    assert header(tmp_path / "m" / "report.csv") == METRIC_COLS
    assert rows[0]["acc"] >= 0.90
    ck = tmp_path / "m" / "checkpoints" / "metric_lin_distance_d0p1_s0.json"
    ev = write_cfg(tmp_path, "em.json", {"task": "eval-metric", "scm": "lin", "checkpoint": str(ck), "seeds": [0],
                                          "label": "distance"})
    run_ok(["eval-metric", ev, "--out", str(tmp_path / "em")], capsys)
    again = json.loads((tmp_path / "em" / "report.json").read_text())["rows"]
    assert again[0]["acc"] == rows[0]["acc"]


def fake_rows():
    rng = np.random.default_rng(0)
    return [
        {"dataset": d, "method": m, "delta": 0.01, "seed": s, "acc": float(rng.random()), "mcc": 0.0,
         "unfair_area": float(rng.random()), "cf_unfair_area": 0.0, "nonrobust_area": 0.0}
        for d in ("lin", "nlm") for m in ("ERM", "AL", "CAPIFY", "ECAPIFY") for s in range(5)
    ]


def test_report_aggregates_eight_cells(tmp_path, capsys):
    rows = fake_rows()
    reports.write_json(tmp_path / "in.json", {"schema": reports.SCHEMA, "rows": rows[:20]})
    reports.write_json(tmp_path / "in2.json", rows[20:])
    cfg = write_cfg(tmp_path, "r.json", {"task": "report", "inputs": ["in.json", "in2.json"]})
    summary = run_ok(["report", cfg, "--out", str(tmp_path / "r")], capsys)
    assert summary["rows"] == 40 and summary["aggregate_rows"] == 8
    with open(tmp_path / "r" / "aggregate.csv", newline="") as fh:
        agg = list(csv.DictReader(fh))
    assert len(agg) == 8 and all(r["n"] == "5" for r in agg)
    cell = [r["acc"] for r in rows if r["dataset"] == "lin" and r["method"] == "AL"]
    got = next(r for r in agg if r["dataset"] == "lin" and r["method"] == "AL")
    assert float(got["acc_mean"]) == pytest.approx(np.mean(cell), abs=1e-15)
    assert float(got["acc_std"]) == pytest.approx(np.std(cell, ddof=1), abs=1e-15)


def test_emit_plot_data_examples(tmp_path):
    one = fake_rows()[:1]
    files = reports.emit_plot_data(one, tmp_path / "p")
    lines = Path(files["acc"]).read_text().splitlines()
    assert len(lines) == 2 and lines[1].endswith(",0.0")
    five = reports.emit_plot_data(fake_rows()[:5], tmp_path / "q")
    with open(five["acc"], newline="") as fh:
        (row,) = list(csv.DictReader(fh))
    assert float(row["ci"]) > 0
    with pytest.raises(EmptyReport):
        reports.emit_plot_data([], tmp_path / "z")


@pytest.mark.parametrize(
    "content, task",
    [
        ("{not json", "gen-data"),
        (json.dumps({"task": "train-clf", "scm": "lin", "methods": ["SVM"]}), "train-clf"),
        (json.dumps({"task": "gen-data", "scm": "nope"}), "gen-data"),
        (json.dumps({"task": "gen-data"}), "gen-data"),
        (json.dumps({"task": "train-metric", "scm": "lin"}), "gen-data"),
        (json.dumps({"task": "gen-data", "scm": "lin", "seeds": []}), "gen-data"),
        (json.dumps({"task": "report", "inputs": ["missing.json"]}), "report"),
    ],
)
def test_config_errors_exit_2(tmp_path, capsys, content, task):
    p = tmp_path / "bad.json"
    p.write_text(content)
    assert cli.run([task, str(p), "--out", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert set(err) == {"error", "message"}


def test_missing_config_and_bad_args_exit_2(tmp_path, capsys):
    assert cli.run(["gen-data", str(tmp_path / "none.json")]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "MissingFile"
    assert cli.run(["fly", "x.json"]) == 2


def test_runtime_error_exit_3(tmp_path, capsys):
    data = np.c_[np.ones(20), np.arange(20.0), 2 * np.arange(20.0)]
    np.savetxt(tmp_path / "d.csv", data, delimiter=",", header="a,b,c", comments="")
    cfg = write_cfg(tmp_path, "f.json", {"task": "gen-data", "count": 10,
                                         "scm": {"fit": {"csv": "d.csv", "dag": [[], [], [0, 1]]}}})
    assert cli.run(["gen-data", cfg, "--out", str(tmp_path / "o")]) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "SingularDesign"
