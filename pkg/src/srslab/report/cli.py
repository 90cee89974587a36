"""Command line entry point: ``srslab {run,validate,replot}``.

Exit codes: 0 success, 1 one or more runs failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import Sequence

from .. import __version__
from ..harness import AggregateResult, MetricsTimeline, aggregate, mean_series, run_suite
from .figures import efficiency_png, learning_curves_png
from .spec import ExperimentSpec, SpecError, parse_spec, serialize_spec
from .svgchart import emit_chart
from .tables import ResultRow, ResultTable, emit_table

log = logging.getLogger("srslab")

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_USAGE = 2

TIMELINES_FILE = "timelines.json"
CHART_FILE = "learning_curves.svg"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srslab", description="Reward stabilization experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every variant x seed and write the result bundle")
    run.add_argument("--spec", required=True, type=Path, help="experiment spec (JSON)")
    run.add_argument("--out", type=Path, help="output directory (default: the spec's output_dir)")
    run.add_argument("--parallel", type=int, default=1, help="worker processes (default 1)")
    run.add_argument("--seed-offset", type=int, default=0, help="added to every seed in the spec")

    val = sub.add_parser("validate", help="parse a spec and print it with defaults filled in")
    val.add_argument("--spec", required=True, type=Path)

    rep = sub.add_parser("replot", help="redraw charts from a previous run's timelines")
    rep.add_argument("--out", required=True, type=Path, help="result directory of a previous run")
    rep.add_argument("--timelines", type=Path, help=f"timelines JSON (default: OUT/{TIMELINES_FILE})")
    return parser


def _load_spec(path: Path) -> ExperimentSpec:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SpecError(f"cannot read {path}: {exc.strerror}") from None
    return parse_spec(text)


def _check_writable(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    fd, probe = tempfile.mkstemp(dir=out, prefix=".probe")
    os.close(fd)
    os.unlink(probe)


def _aggregate_rows(variants: Sequence[str], runs: Sequence[dict]) -> list[ResultRow]:
    rows = []
    for name in variants:
        mine = [r for r in runs if r["variant"] == name]
        per_metric = {
            "episodes_to_threshold": [r["episodes_to_threshold"] for r in mine],
            "final_score": [None if r["failed"] else r["final_score"] for r in mine],
        }
        for metric, values in per_metric.items():
            if len(values) >= 2:
                agg = aggregate(values)
            else:
                hit = [v for v in values if v is not None and not math.isnan(v)]
                agg = AggregateResult(float(hit[0]) if hit else math.nan, math.nan, len(hit), len(values))
            rows.append(ResultRow(name, metric, agg.mean, agg.half_width, agg.n, agg.attain_count))
    return rows


def _series(bundle: dict) -> list[tuple[str, MetricsTimeline]]:
    out = []
    for name in bundle["variants"]:
        tls = [MetricsTimeline.from_dict(r["timeline"]) for r in bundle["runs"] if r["variant"] == name]
        curve = mean_series(tls)
        if curve.scores:
            out.append((name, curve))
    return out


def _draw(bundle: dict, out: Path, emit: Sequence[str]) -> list[Path]:
    written = []
    series = _series(bundle)
    if not series:
        log.warning("no evaluation points to plot")
        return written
    title = bundle["name"]
    if "svg" in emit:
        written.append(emit_chart(series, out / CHART_FILE, title=title))
    if "png" in emit:
        groups = {name: [MetricsTimeline.from_dict(r["timeline"]) for r in bundle["runs"] if r["variant"] == name]
                  for name in bundle["variants"]}
        thresholds = set(bundle["thresholds"].values())
        threshold = thresholds.pop() if len(thresholds) == 1 else None
        written.append(learning_curves_png(groups, out / "learning_curves.png", threshold, title))
    return written


def cmd_validate(args) -> int:
    spec = _load_spec(args.spec)
    sys.stdout.write(serialize_spec(spec))
    return EXIT_OK


def cmd_run(args) -> int:
    spec = _load_spec(args.spec)
    if args.parallel < 1:
        raise SpecError("--parallel must be >= 1", "parallel")
    out = args.out or Path(spec.output_dir)
    try:
        _check_writable(out)
    except OSError as exc:
        print(f"srslab: output directory {out} is not writable: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_USAGE

    seeds = spec.shifted_seeds(args.seed_offset)
    matrix = spec.run_configs()
    p = spec.protocol
    log.info("running %d variants x %d seeds (%d episodes each)", len(matrix), len(seeds), p.episodes)
    result = run_suite(matrix, seeds, parallel=args.parallel, threshold_fraction=p.threshold_fraction,
                       k=p.k, final_window=p.final_window)

    variants = [name for name, _ in matrix]
    runs = [{
        "variant": r.name,
        "seed": r.seed,
        "episodes_to_threshold": r.efficiency.episodes,
        "final_score": None if math.isnan(r.final_score) else r.final_score,
        "failed": r.timeline.failed,
        "timeline": r.timeline.to_dict(),
    } for r in result.runs]
    bundle = {"name": spec.name, "variants": variants, "thresholds": result.thresholds, "k": p.k, "runs": runs}

    (out / "spec.json").write_text(serialize_spec(spec), encoding="utf-8")
    (out / TIMELINES_FILE).write_text(json.dumps(bundle, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    table = ResultTable(_aggregate_rows(variants, runs))
    for fmt in ("csv", "json"):
        if fmt in spec.emit:
            emit_table(table, fmt, out / f"results.{fmt}")
    _draw(bundle, out, spec.emit)
    if "png" in spec.emit:
        aggs = {row.variant: AggregateResult(row.mean, row.ci_half_width, row.attain_count, row.n)
                for row in table.rows if row.metric == "episodes_to_threshold"}
        efficiency_png(aggs, out / "efficiency.png", title=spec.name)

    failures = result.failures
    meta = {
        "created": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "version": __version__,
        "parallel": args.parallel,
        "seed_offset": args.seed_offset,
        "failed_runs": [{"variant": r.name, "seed": r.seed, "error": r.timeline.error,
                         "diverged": r.timeline.diverged} for r in failures],
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")

    for row in table.rows:
        print(f"{row.variant:<24} {row.metric:<22} mean={row.mean:#.6g} ci=±{row.ci_half_width:#.6g} "
              f"attained={row.attain_count}/{row.n}")
    if failures:
        for r in failures:
            print(f"srslab: run {r.name} seed {r.seed} failed: {r.timeline.error or 'diverged'}", file=sys.stderr)
        return EXIT_RUN_FAILED
    return EXIT_OK


def cmd_replot(args) -> int:
    src = args.timelines or args.out / TIMELINES_FILE
    try:
        bundle = json.loads(src.read_text(encoding="utf-8"))
    except OSError as exc:
        print(f"srslab: cannot read {src}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as exc:
        print(f"srslab: {src}: line {exc.lineno}, column {exc.colno}: {exc.msg}", file=sys.stderr)
        return EXIT_USAGE
    args.out.mkdir(parents=True, exist_ok=True)
    for path in _draw(bundle, args.out, ("svg", "png")):
        print(path)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "replot": cmd_replot}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except SpecError as exc:
        print(f"srslab: invalid spec: {exc}", file=sys.stderr)
        return EXIT_USAGE
