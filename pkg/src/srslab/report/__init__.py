"""Experiment specs, result tables, charts and the command line interface."""
from .spec import ExperimentSpec, Protocol, SpecError, Variant, parse_spec, serialize_spec
from .svgchart import emit_chart, render_chart
from .tables import ResultRow, ResultTable, emit_table, read_table

__all__ = [
    "ExperimentSpec", "Protocol", "SpecError", "Variant", "parse_spec", "serialize_spec",
    "emit_chart", "render_chart", "ResultRow", "ResultTable", "emit_table", "read_table",
]
