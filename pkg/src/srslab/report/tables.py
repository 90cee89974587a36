"""Aggregate result tables and their CSV / JSON encodings."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..harness import SuiteResult

COLUMNS = ("variant", "metric", "mean", "ci_half_width", "n", "attain_count")


@dataclass(frozen=True)
class ResultRow:
    variant: str
    metric: str
    mean: float
    ci_half_width: float
    n: int
    attain_count: int


@dataclass
class ResultTable:
    rows: list[ResultRow]

    def __post_init__(self):
        keys = [(r.variant, r.metric) for r in self.rows]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (variant, metric) row")

    def __len__(self) -> int:
        return len(self.rows)

    def lookup(self, variant: str, metric: str) -> ResultRow:
        for r in self.rows:
            if r.variant == variant and r.metric == metric:
                return r
        raise KeyError((variant, metric))

    @classmethod
    def from_suite(cls, result: SuiteResult) -> ResultTable:
        rows = []
        for variant, metrics in result.aggregates.items():
            for metric, agg in metrics.items():
                rows.append(ResultRow(variant, metric, agg.mean, agg.half_width, agg.n, agg.attain_count))
        return cls(rows)


def format_number(x: Optional[float]) -> str:
    """Six significant digits with trailing zeros kept; NaN/None become ''."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float) and math.isinf(x):
        raise ValueError("infinite values cannot be tabulated")
    return f"{x:#.6g}"


def _cells(row: ResultRow) -> list[str]:
    return [row.variant, row.metric, format_number(row.mean), format_number(row.ci_half_width),
            str(row.n), str(row.attain_count)]


def table_csv(table: ResultTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(COLUMNS)
    for row in table.rows:
        writer.writerow(_cells(row))
    return buf.getvalue()


def table_json(table: ResultTable) -> str:
    # written by hand so numbers keep their 6-significant-digit spelling
    objs = []
    for row in table.rows:
        cells = _cells(row)
        parts = []
        for name, cell in zip(COLUMNS, cells):
            if name in ("variant", "metric"):
                value = json.dumps(cell)
            else:
                value = cell if cell else "null"
            parts.append(f"{json.dumps(name)}: {value}")
        objs.append("  {" + ", ".join(parts) + "}")
    return "[\n" + ",\n".join(objs) + "\n]\n"


def emit_table(table: ResultTable, fmt: str, path) -> Path:
    if not table.rows:
        raise ValueError("refusing to emit an empty table")
    if fmt == "csv":
        text = table_csv(table)
    elif fmt == "json":
        text = table_json(table)
    else:
        raise ValueError(f"unsupported table format {fmt!r}")
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def _num(cell) -> float:
    return math.nan if cell in ("", None) else float(cell)


def read_table(path) -> ResultTable:
    """Parse a table written by :func:`emit_table` (format chosen by suffix)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        records = json.loads(text)
    else:
        records = list(csv.DictReader(io.StringIO(text, newline="")))
    rows = []
    for rec in records:
        rows.append(ResultRow(rec["variant"], rec["metric"], _num(rec["mean"]), _num(rec["ci_half_width"]),
                              int(rec["n"]), int(rec["attain_count"])))
    return ResultTable(rows)
