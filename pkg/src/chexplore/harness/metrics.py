"""Metrics export: CSV (the plotting contract) and JSON."""
from __future__ import annotations

import csv
import io
import json

from ..simnet.loop import MetricsRow
from .checkpoint import atomic_write_text, metrics_row_from_json, metrics_row_to_json

CSV_HEADER = ("iteration", "loss", "acc", "flops", "delta", "retained_per_layer")


def metrics_csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.iteration, repr(float(r.loss)), repr(float(r.acc)), r.flops, repr(float(r.delta)),
                    ";".join(str(c) for c in r.retained)])
    return buf.getvalue()


def metrics_json_text(rows, extra: dict | None = None) -> str:
    doc = dict(extra or {})
    doc["metrics"] = [metrics_row_to_json(r) for r in rows]
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_metrics_csv(path, rows) -> None:
    atomic_write_text(path, metrics_csv_text(rows))


def write_metrics_json(path, rows, extra: dict | None = None) -> None:
    atomic_write_text(path, metrics_json_text(rows, extra))


def read_metrics_json(path) -> list[MetricsRow]:
    with open(path) as fh:
        doc = json.load(fh)
    return [metrics_row_from_json(r) for r in doc["metrics"]]


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetricsRow(int(r["iteration"]), float(r["loss"]), float(r["acc"]), int(r["flops"]), float(r["delta"]),
                   tuple(int(c) for c in r["retained_per_layer"].split(";") if c))
        for r in rows
    ]
