"""Config-driven experiment runner.

    cfm <task> CONFIG.json [--out DIR] [--seed N] [--preset desk|paper]

Tasks: gen-data, train-metric, eval-metric, train-clf, eval-clf, report.
Exit codes: 0 ok, 2 configuration error, 3 runtime error; errors are
printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import fair_classifier as fc
from . import metric_learning as ml
from . import reports
from .errors import CfmError, ConfigError, ConfigParse, MissingFile
from .metric import BaseMetric, OracleMetric
from .scm import Scm, scm_from_config, write_csv
from .tensor_nn import FeedForwardNet

TASKS = ("gen-data", "train-metric", "eval-metric", "train-clf", "eval-clf", "report")

CLF_PRESETS = {
    "desk": dict(count=2000, epochs=30, batch=64),
    "paper": dict(count=10000, epochs=100, batch=1000),
}


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigParse(f"{path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigParse(f"{path}: top level must be an object")
    cfg["_base_dir"] = str(path.parent)
    return cfg


def _scm_entries(cfg: dict) -> list[dict]:
    if "scms" in cfg:
        entries = cfg["scms"]
    elif "scm" in cfg:
        entries = [cfg["scm"]]
    else:
        raise ConfigError("config needs 'scm' or 'scms'")
    return [{"builtin": e} if isinstance(e, str) else e for e in entries]


def build_scm(entry: dict, base_dir: str) -> Scm:
    try:
        return scm_from_config(entry, base_dir)
    except FileNotFoundError as exc:
        raise MissingFile(str(exc)) from None
    except KeyError as exc:
        raise ConfigError(str(exc).strip("'\"")) from None


def _seeds(cfg: dict) -> list[int]:
    seeds = cfg.get("seeds", [cfg.get("seed", 0)])
    if not seeds:
        raise ConfigError("seeds must be nonempty")
    return [int(s) for s in seeds]


def _deltas(cfg: dict, default: float) -> list[float]:
    return [float(d) for d in cfg.get("deltas", [cfg.get("delta", default)])]


def _base_metric(cfg: dict) -> BaseMetric:
    try:
        return BaseMetric.from_config(cfg.get("metric"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _dataset_name(entry: dict, scm: Scm) -> str:
    return entry.get("name", entry.get("builtin", scm.name))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CFM_THREADS", "1")))
    except ValueError:
        raise ConfigError("CFM_THREADS must be an integer") from None


def run_cells(cells: list, fn: Callable) -> list:
    """Evaluate independent cells in a pool; results keep the input order."""
    workers = min(_threads(), max(1, len(cells)))
    if workers == 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cells))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_metric(path, lm: ml.LearnedMetric) -> None:
    reports.write_json(path, {"net": lm.net.to_dict(), "embed_metric": lm.embed_metric.to_config()})


def load_metric(path) -> ml.LearnedMetric:
    doc = _read_json(path)
    return ml.LearnedMetric(FeedForwardNet.from_dict(doc["net"]), BaseMetric.from_config(doc["embed_metric"]))


def save_classifier(path, clf: fc.Classifier) -> None:
    reports.write_json(path, {"net": clf.net.to_dict()})


def load_classifier(path) -> fc.Classifier:
    return fc.Classifier(FeedForwardNet.from_dict(_read_json(path)["net"]))


def _read_json(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"file not found: {path}")
    return json.loads(path.read_text())


def _resolve(cfg: dict, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(cfg["_base_dir"]) / p


def _tag(x: float) -> str:
    return repr(float(x)).replace(".", "p")


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


def task_gen_data(cfg: dict, out: Path) -> dict:
    count = int(cfg.get("count", 2000))
    written = []
    for entry in _scm_entries(cfg):
        scm = build_scm(entry, cfg["_base_dir"])
        name = _dataset_name(entry, scm)
        header = list(scm.feature_names) or [f"v{i}" for i in range(scm.n)]
        for seed in _seeds(cfg):
            v, _ = scm.sample(count, seed)
            path = out / f"{name}_seed{seed}.csv"
            write_csv(path, header, v)
            written.append(path.name)
    return {"files": written}


def _metric_cfg(cfg: dict, scenario: str, delta: float, seed: int) -> ml.MetricTrainConfig:
    keys = ("epochs", "batch_size", "count", "margin", "lambda_dec", "embedding", "depth", "width", "lr", "tau")
    extra = {k: cfg[k] for k in keys if k in cfg}
    try:
        return ml.MetricTrainConfig.preset(
            cfg.get("preset", "desk"), scenario=scenario, delta=delta, seed=seed, **extra
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _metric_label(mcfg: ml.MetricTrainConfig) -> str:
    label = mcfg.scenario
    if mcfg.embedding == "unknown":
        label += "-unknown"
    if mcfg.lambda_dec > 0:
        label += "+dec"
    return label


def _metric_row(name, mcfg, seed, rep: ml.MetricReport) -> dict:
    d = rep.to_dict()
    d.pop("n")
    return {"dataset": name, "method": _metric_label(mcfg), "delta": mcfg.delta, "seed": seed, **d}


def task_train_metric(cfg: dict, out: Path) -> dict:
    scenarios = cfg.get("scenarios", [cfg.get("scenario", "distance")])
    base = _base_metric(cfg)
    cells = []
    for entry in _scm_entries(cfg):
        scm = build_scm(entry, cfg["_base_dir"])
        oracle = OracleMetric(scm, base)
        for scenario in scenarios:
            for delta in _deltas(cfg, 0.1):
                for seed in _seeds(cfg):
                    cells.append((entry, scm, oracle, _metric_cfg(cfg, scenario, delta, seed)))
    test_count = int(cfg.get("test_count", 2000))

    def run(cell):
        entry, scm, oracle, mcfg = cell
        name = _dataset_name(entry, scm)
        lm, log = ml.train_metric(scm, mcfg, oracle=oracle)
        stem = f"metric_{name}_{_metric_label(mcfg)}_d{_tag(mcfg.delta)}_s{mcfg.seed}"
        save_metric(out / "checkpoints" / f"{stem}.json", lm)
        test = ml.build_pairs(scm, oracle, mcfg.delta, test_count, mcfg.seed + 100_000, "distance")
        rep = ml.eval_metric(lm, oracle, mcfg.delta, test)
        return _metric_row(name, mcfg, mcfg.seed, rep), {stem: log}

    results = run_cells(cells, run)
    logs = {}
    for _, lg in results:
        logs.update(lg)
    reports.write_json(out / "training_log.json", logs)
    return _finish_rows(out, [r for r, _ in results])


def task_eval_metric(cfg: dict, out: Path) -> dict:
    if "checkpoint" not in cfg:
        raise ConfigError("eval-metric needs 'checkpoint'")
    entry = _scm_entries(cfg)[0]
    scm = build_scm(entry, cfg["_base_dir"])
    oracle = OracleMetric(scm, _base_metric(cfg))
    lm = load_metric(_resolve(cfg, cfg["checkpoint"]))
    rows = []
    for delta in _deltas(cfg, 0.1):
        for seed in _seeds(cfg):
            test = ml.build_pairs(scm, oracle, delta, int(cfg.get("test_count", 2000)), seed + 100_000)
            rep = ml.eval_metric(lm, oracle, delta, test).to_dict()
            rep.pop("n")
            rows.append({"dataset": _dataset_name(entry, scm), "method": cfg.get("label", "checkpoint"),
                         "delta": delta, "seed": seed, **rep})
    return _finish_rows(out, rows)


def _trainer_cfg(cfg: dict, method: str, delta: float, seed: int) -> fc.TrainerConfig:
    preset = CLF_PRESETS.get(cfg.get("preset", "desk"))
    if preset is None:
        raise ConfigError(f"unknown preset {cfg.get('preset')!r}")
    keys = ("mu", "pgd_steps", "pgd_step_size", "pgd_restarts", "epochs", "batch", "lr", "hidden")
    extra = {k: cfg[k] for k in keys if k in cfg}
    params = {**{k: v for k, v in preset.items() if k != "count"}, **extra}
    try:
        return fc.TrainerConfig(method=method, delta=delta, seed=seed, **params)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _clf_count(cfg: dict) -> int:
    return int(cfg.get("count", CLF_PRESETS.get(cfg.get("preset", "desk"), CLF_PRESETS["desk"])["count"]))


def _learned_metric_for(cfg: dict, scm: Scm, oracle: OracleMetric, seed: int) -> ml.LearnedMetric:
    if "metric_checkpoint" in cfg:
        return load_metric(_resolve(cfg, cfg["metric_checkpoint"].format(seed=seed)))
    mcfg = ml.MetricTrainConfig.preset(
        cfg.get("preset", "desk"), scenario="distance", delta=float(cfg.get("metric_delta", 0.1)), seed=seed
    )
    return ml.train_metric(scm, mcfg, oracle=oracle)[0]


def fairness_cell(cfg: dict, entry: dict, scm: Scm, oracle: OracleMetric, method: str,
                  delta: float, seed: int, out: Optional[Path] = None) -> dict:
    data = fc.make_dataset(scm, _clf_count(cfg), seed)
    tcfg = _trainer_cfg(cfg, method, delta, seed)
    twins = None
    if method == "ECAPIFY":
        lm = _learned_metric_for(cfg, scm, oracle, seed)
        twins = fc.estimate_twins(data.x_train, scm.sensitive_levels, lm, data.x_train, scm.sensitive_idx)
    clf, _ = fc.train_classifier(data, tcfg, scm=scm, oracle=oracle, twins_est=twins)
    name = _dataset_name(entry, scm)
    if out is not None:
        save_classifier(out / "checkpoints" / f"clf_{name}_{method}_d{_tag(delta)}_s{seed}.json", clf)
    rep = fc.eval_fairness(clf, scm, oracle, data.x_test, data.y_test,
                           float(cfg.get("eval_delta", 0.01)), int(cfg.get("K", 100)), seed,
                           method=method, dataset=name)
    return rep.to_dict()


def task_train_clf(cfg: dict, out: Path) -> dict:
    methods = cfg.get("methods", [cfg.get("method", "ERM")])
    bad = [m for m in methods if m not in fc.METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; choose from {list(fc.METHODS)}")
    base = _base_metric(cfg)
    cells = []
    for entry in _scm_entries(cfg):
        scm = build_scm(entry, cfg["_base_dir"])
        oracle = OracleMetric(scm, base)
        for method in methods:
            for delta in _deltas(cfg, 0.01):
                for seed in _seeds(cfg):
                    cells.append((entry, scm, oracle, method, delta, seed))
    rows = run_cells(cells, lambda c: fairness_cell(cfg, *c, out=out))
    return _finish_rows(out, rows)


def task_eval_clf(cfg: dict, out: Path) -> dict:
    if "checkpoint" not in cfg:
        raise ConfigError("eval-clf needs 'checkpoint'")
    entry = _scm_entries(cfg)[0]
    scm = build_scm(entry, cfg["_base_dir"])
    oracle = OracleMetric(scm, _base_metric(cfg))
    clf = load_classifier(_resolve(cfg, cfg["checkpoint"]))
    rows = []
    for seed in _seeds(cfg):
        data = fc.make_dataset(scm, _clf_count(cfg), seed)
        rep = fc.eval_fairness(clf, scm, oracle, data.x_test, data.y_test,
                               float(cfg.get("eval_delta", 0.01)), int(cfg.get("K", 100)), seed,
                               method=cfg.get("label", "checkpoint"), dataset=_dataset_name(entry, scm))
        rows.append(rep.to_dict())
    return _finish_rows(out, rows)


def task_report(cfg: dict, out: Path) -> dict:
    inputs = cfg.get("inputs")
    if not inputs:
        raise ConfigError("report needs 'inputs' (report JSON files)")
    paths = [_resolve(cfg, p) for p in inputs]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise MissingFile(f"missing report input(s): {missing}")
    return _finish_rows(out, reports.load_rows(paths))


def _finish_rows(out: Path, rows: list[dict]) -> dict:
    rows = reports.sort_rows(rows)
    reports.write_json(out / "report.json", {"schema": reports.SCHEMA, "rows": rows})
    if rows:
        fields = reports.value_fields(rows)
        reports.write_rows_csv(out / "report.csv", rows, [*reports.KEY_FIELDS, "seed", *fields])
        agg = reports.aggregate(rows)
        reports.write_rows_csv(out / "aggregate.csv", agg, reports.aggregate_columns(rows))
        plots = reports.emit_plot_data(rows, out / "plot_data")
        return {"rows": len(rows), "aggregate_rows": len(agg), "plots": sorted(plots)}
    return {"rows": 0}


HANDLERS = {
    "gen-data": task_gen_data,
    "train-metric": task_train_metric,
    "eval-metric": task_eval_metric,
    "train-clf": task_train_clf,
    "eval-clf": task_eval_clf,
    "report": task_report,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfm", description="causal fair metric experiments")
    p.add_argument("task", choices=TASKS)
    p.add_argument("config", help="JSON experiment config")
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.add_argument("--seed", type=int, help="run a single seed (overrides config 'seeds')")
    p.add_argument("--preset", choices=("desk", "paper"), help="scale preset")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        cfg = load_config(args.config)
        if cfg.get("task", args.task) != args.task:
            raise ConfigError(f"config task {cfg['task']!r} does not match command {args.task!r}")
        if args.seed is not None:
            cfg["seeds"] = [args.seed]
        if args.preset:
            cfg["preset"] = args.preset
        if cfg.get("preset", "desk") not in ("desk", "paper"):
            raise ConfigError(f"unknown preset {cfg['preset']!r}")
        out = Path(args.out or _resolve(cfg, cfg.get("out", "cfm_out")))
        out.mkdir(parents=True, exist_ok=True)
        started = time.time()
        summary = HANDLERS[args.task](cfg, out)
        meta = {
            "task": args.task,
            "config": str(Path(args.config).resolve()),
            "started": started,
            "elapsed_s": time.time() - started,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "threads": _threads(),
        }
        reports.write_json(out / "metadata.json", meta)
        print(json.dumps({"ok": True, "task": args.task, "out": str(out), **summary}, sort_keys=True))
        return 0
    except ConfigError as exc:
        _error(exc)
        return 2
    except (CfmError, ValueError, KeyError, TypeError, OSError, FloatingPointError) as exc:
        _error(exc)
        return 3


def _error(exc: Exception) -> None:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
