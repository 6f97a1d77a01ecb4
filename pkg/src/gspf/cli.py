"""Command-line entry point: detect, simulate, evaluate, bench, segments.

Exit codes: 0 on success, 2 on bad input data, 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import ChangePointSet, DataError, DetectorConfig, IndexOutOfRange, NumericalError, segment_bounds, validate_csv_matrix
from .evalkit import DEFAULT_ALPHAS, bench_table_csv, evaluate, run_bench
from .simlab import FAMILIES, SCENARIOS, SimulationSpec, generate, truth_json

EXIT_OK, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("gspf")


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None


def read_curves(path: str | Path, grid_header: bool = False):
    """Parse a curve CSV (rows = time points) into a FunctionalSequence."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    grid = None
    if grid_header:
        if not rows:
            raise DataError("empty file")
        grid, rows = rows[0], rows[1:]
    try:
        raw = [[float(c) for c in r] for r in rows]
        grid = None if grid is None else [float(c) for c in grid]
    except ValueError as exc:
        raise DataError(f"non-numeric entry in {path}: {exc}") from None
    return validate_csv_matrix(raw, grid)


def write_curves(path: str | Path, values: np.ndarray, grid: Optional[np.ndarray] = None) -> None:
    lines = []
    if grid is not None:
        lines.append(",".join(_fmt(v) for v in grid))
    lines.extend(",".join(_fmt(v) for v in row) for row in values)
    Path(path).write_text("\n".join(lines) + "\n")


def _read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read JSON from {path}: {exc}") from None


def _write_text(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _change_points(doc: dict, path) -> ChangePointSet:
    if "change_points" not in doc:
        raise DataError(f"{path} has no change_points field")
    try:
        return ChangePointSet(tuple(int(v) for v in doc["change_points"]))
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad change_points in {path}: {exc}") from None


def cmd_detect(args) -> int:
    from .pipeline import detect

    seq = read_curves(args.input, args.grid_header)
    config = DetectorConfig(
        lambda_grid=args.lambda_grid,
        eta_grid=args.eta_grid if args.eta_grid is not None else DetectorConfig.eta_grid,
        kappa_grid=args.kappa_grid if args.kappa_grid is not None else DetectorConfig.kappa_grid,
        gamma=args.gamma,
        fdr_alpha=args.alpha,
        fve_threshold=args.fve,
    )
    report = detect(seq, config).report()
    # the detector is deterministic; seed and threads are echoed for provenance
    report["params"]["seed"] = args.seed
    report["params"]["threads"] = args.threads
    _write_text(args.output, json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = SimulationSpec(family=args.family, scenario=args.m, noise=args.noise, d=args.d, seed=args.seed)
    data = generate(spec)
    write_curves(args.out, data.seq.values, data.seq.grid.points if args.grid_header else None)
    if args.truth:
        Path(args.truth).write_text(truth_json(data, spec) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    est = _change_points(_read_json(args.report), args.report)
    truth = _change_points(_read_json(args.truth), args.truth)
    _write_text(args.out, json.dumps(evaluate(est, truth).to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = DetectorConfig(gamma=args.gamma, fve_threshold=args.fve)
    results = []
    for family in args.family.split(","):
        template = SimulationSpec(family=family.strip(), scenario=args.m, noise=args.noise, d=args.d, seed=args.seed)
        results.append(run_bench(template, args.reps, config, args.alphas, workers=args.threads))
    _write_text(args.out, bench_table_csv(results))
    return EXIT_OK


def cmd_segments(args) -> int:
    seq = read_curves(args.input, args.grid_header)
    cps = _change_points(_read_json(args.report), args.report)
    for c in cps:
        if c > seq.T:
            raise IndexOutOfRange(f"change point {c} outside 2..{seq.T}")
    lines = [",".join(["start", "end"] + [_fmt(x) for x in seq.grid.points])]
    for s, e in segment_bounds(cps, seq.T):
        mean = seq.values[s - 1 : e].mean(axis=0)
        lines.append(",".join([str(s), str(e)] + [_fmt(v) for v in mean]))
    _write_text(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gspf", description="Two-stage change-point detection for functional sequences.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="detect change points in a curve CSV")
    p.add_argument("--input", required=True, help="CSV, one curve per row")
    p.add_argument("--grid-header", action="store_true", help="first row holds the grid coordinates")
    p.add_argument("--alpha", type=float, default=0.01, help="FDR level (default 0.01)")
    p.add_argument("--gamma", type=float, default=3.0, help="MCP concavity (default 3)")
    p.add_argument("--fve", type=float, default=0.99, help="FPCA variance-explained threshold (default 0.99)")
    p.add_argument("--lambda-grid", type=_float_list, default=None, help="comma list; default scales with the data")
    p.add_argument("--eta-grid", type=_float_list, default=None)
    p.add_argument("--kappa-grid", type=_int_list, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--output", default=None, help="report JSON path (default stdout)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("simulate", help="write a labeled synthetic dataset")
    p.add_argument("--family", choices=FAMILIES, required=True)
    p.add_argument("--m", type=int, choices=SCENARIOS, required=True, help="number of change points")
    p.add_argument("--noise", choices=("gp", "tp", "iid_normal"), default=None)
    p.add_argument("--d", type=int, default=30, help="grid size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-header", action="store_true", help="write the grid as a first row")
    p.add_argument("--out", required=True, help="curve CSV path")
    p.add_argument("--truth", default=None, help="truth JSON path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="score a report against a truth file")
    p.add_argument("--report", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default=None, help="metrics JSON path (default stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="success-rate table over simulated replications")
    p.add_argument("--family", required=True, help="family or comma list of families")
    p.add_argument("--m", type=int, choices=SCENARIOS, required=True)
    p.add_argument("--alphas", type=_float_list, default=DEFAULT_ALPHAS)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--noise", choices=("gp", "tp", "iid_normal"), default=None)
    p.add_argument("--d", type=int, default=30)
    p.add_argument("--seed", type=int, default=0, help="base seed; replication i uses seed + i")
    p.add_argument("--gamma", type=float, default=3.0)
    p.add_argument("--fve", type=float, default=0.99)
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("segments", help="segment mean curves for plotting")
    p.add_argument("--input", required=True)
    p.add_argument("--grid-header", action="store_true")
    p.add_argument("--report", required=True)
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.set_defaults(func=cmd_segments)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
