"""Run reports: deterministic JSON/CSV rows, seed aggregates, tidy plot data."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyReport

SCHEMA = "cfm-report-v1"
KEY_FIELDS = ("dataset", "method", "delta")
FAIRNESS_FIELDS = ("acc", "mcc", "unfair_area", "cf_unfair_area", "nonrobust_area")
METRIC_FIELDS = ("acc", "fn", "fp", "mcc", "mae", "rmse")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def sort_rows(rows: Iterable[dict]) -> list[dict]:
    return sorted(rows, key=lambda r: tuple(str(r.get(k, "")) for k in (*KEY_FIELDS, "seed")))


def value_fields(rows: Sequence[dict]) -> tuple[str, ...]:
    keys = set().union(*(r.keys() for r in rows))
    for group in (FAIRNESS_FIELDS, METRIC_FIELDS):
        if set(group) <= keys:
            return group
    return tuple(sorted(k for k in keys if k not in (*KEY_FIELDS, "seed", "n")))


def write_rows_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return path


def _fmt(x):
    return repr(float(x)) if isinstance(x, float) else x


def aggregate(rows: Sequence[dict]) -> list[dict]:
    """Mean and sample std over seeds for every (dataset, method, delta) cell."""
    if not rows:
        raise EmptyReport("nothing to aggregate")
    fields = value_fields(rows)
    cells: dict[tuple, list[dict]] = defaultdict(list)
    for r in rows:
        cells[tuple(r.get(k) for k in KEY_FIELDS)].append(r)
    out = []
    for key in sorted(cells, key=lambda k: tuple(str(x) for x in k)):
        group = cells[key]
        agg = dict(zip(KEY_FIELDS, key))
        agg["n"] = len(group)
        for f in fields:
            vals = [float(r[f]) for r in group]
            mean = sum(vals) / len(vals)
            var = sum((v - mean) ** 2 for v in vals) / (len(vals) - 1) if len(vals) > 1 else 0.0
            agg[f"{f}_mean"] = mean
            agg[f"{f}_std"] = math.sqrt(var)
        out.append(agg)
    return out


def aggregate_columns(rows: Sequence[dict]) -> list[str]:
    fields = value_fields(rows)
    return [*KEY_FIELDS, "n", *(f"{f}_{s}" for f in fields for s in ("mean", "std"))]


def emit_plot_data(rows: Sequence[dict], out_dir) -> dict[str, Path]:
    """One tidy CSV per figure (one figure per reported quantity).

    Each line is ``panel, group, value, ci``: the dataset (and radius) as the
    panel, the method as the group, the seed mean and the seed std.
    """
    if not rows:
        raise EmptyReport("report has no rows")
    agg = aggregate(rows)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for f in value_fields(rows):
        path = out_dir / f"fig_{f}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["panel", "group", "value", "ci"])
            for a in agg:
                panel = f"{a['dataset']} delta={a['delta']}"
                w.writerow([panel, a["method"], _fmt(a[f"{f}_mean"]), _fmt(a[f"{f}_std"])])
        written[f] = path
    return written


def load_rows(paths: Iterable) -> list[dict]:
    rows: list[dict] = []
    for p in paths:
        doc = json.loads(Path(p).read_text())
        if isinstance(doc, dict) and "rows" in doc:
            rows.extend(doc["rows"])
        elif isinstance(doc, list):
            rows.extend(doc)
        else:
            rows.append(doc)
    return rows
