"""Bit-stable result files: metrics and summary CSVs, round traces as JSON."""

import csv
import json
import os
from typing import Iterable, List, Sequence

from src.errors import OutputError

METRICS_COLUMNS = [
    "protocol",
    "epoch",
    "train_mae",
    "eval_mae",
    "throughput",
    "sync_delay",
    "aggregations",
]


def format_cell(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def write_rows(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    try:
        _ensure_parent(path)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_cell(value) for value in row])
    except OSError as e:
        raise OutputError(f"Cannot write {path}: {e}") from None


def write_metrics_csv(path: str, rows) -> None:
    write_rows(path, METRICS_COLUMNS, (row.as_list() for row in rows))


def write_summary_csv(path: str, axis: str, cells) -> None:
    """cells: (axis value, rows) in sweep order"""
    write_rows(
        path,
        [axis] + METRICS_COLUMNS,
        ([format_cell(value)] + row.as_list() for value, rows in cells for row in rows),
    )


def write_trace_json(path: str, records) -> None:
    payload: List = [record.to_dict() for record in records]
    try:
        _ensure_parent(path)
        with open(path, "w", newline="\n", encoding="utf-8") as f:
            json.dump({"rounds": payload}, f, indent=1, allow_nan=False)
            f.write("\n")
    except OSError as e:
        raise OutputError(f"Cannot write {path}: {e}") from None
    except ValueError as e:
        raise OutputError(f"Trace for {path} holds a non-finite number: {e}") from None
