"""Command-line front end: simulate, reduce, invert, scan, fit, report.

Exit codes: 0 success, 2 validation error, 3 solver failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .core import ALL_ENTRIES, PARAMETER_NAMES, EnergyLevelScheme, ProcessMatrix
from .forward import SimulationConfig, simulate, trajectory_from_dict, trajectory_to_dict
from .inversion import (
    CoefficientSet,
    ConvergenceError,
    InversionError,
    SolverOptions,
    chi_rows,
    invert,
    normalize_signal,
)
from .kinetics import FitError, fit_trajectory
from .sensitivity import DEFAULT_FACTORS, ScanConfig, error_tables, parse_factors, scan, summary
from .spectra import (
    DEFAULT_SIGMA4,
    LevelAssignmentError,
    SignalSet,
    SpectrumFormatError,
    assign_levels,
    contribution_table,
    contribution_table_csv,
    read_spectra,
    reduce_spectra,
    write_spectra,
)

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

MANIFEST = "manifest.json"
TRUTH = "chi_true.json"
SIGNALS = "signals.csv"
NORMALIZED = "normalized_signals.csv"
INVERSION = "inversion.json"
CHI_CSV = "chi.csv"


class ValidationError(ValueError):
    pass


def _g(x: float) -> str:
    return format(float(x), ".17g")


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    doc = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        doc = {**doc, "seed": args.seed}
    if args.noise is not None:
        doc = {**doc, "noise": args.noise}
    config = SimulationConfig.from_dict(doc)
    chi, _, spectra = simulate(config)
    out = _out_dir(args.out)
    write_spectra(spectra, out)
    _dump_json(config.to_dict(), out / MANIFEST)
    _dump_json(trajectory_to_dict(config.waiting_times, chi), out / TRUTH)
    _log(f"wrote {len(spectra)} spectra to {out}")
    return EXIT_OK


def cmd_reduce(args) -> int:
    src = Path(args.input)
    spectra = read_spectra(src)
    out = _out_dir(args.out)
    if args.scheme:
        scheme = EnergyLevelScheme.from_dict(_load_json(args.scheme))
    else:
        assignment = assign_levels(spectra, args.sigma4)
        _dump_json(assignment.to_dict(), out / "level_assignment.json")
        scheme = assignment.scheme
    _dump_json(scheme.to_dict(), out / "scheme.json")
    signals = reduce_spectra(spectra, scheme, args.sigma4)
    signals.to_csv(out / SIGNALS)
    table = contribution_table(signals)
    (out / "contribution_table.csv").write_text(contribution_table_csv(table), encoding="utf-8")
    undefined = [t for t, row in table.items() if not row.defined]
    if undefined:
        _log(f"undefined contribution rows (zero signal): {', '.join(undefined)}")
    if (src / MANIFEST).exists() and src.resolve() != out.resolve():
        shutil.copyfile(src / MANIFEST, out / MANIFEST)
    _log(f"wrote reduced signals to {out}")
    return EXIT_OK


def _normalization(args, signals_path: Path):
    """Pulses and dipoles from --config, else from a manifest beside the signals; None means unit."""
    path = Path(args.config) if args.config else signals_path.parent / MANIFEST
    if not path.exists():
        if args.config:
            raise FileNotFoundError(path)
        _log("no manifest found: signals are taken as already normalized")
        return None
    config = SimulationConfig.from_dict(_load_json(path))
    return config.pulses, config.dipoles


def _load_coefficients(source: str) -> CoefficientSet | None:
    if source == "auto":
        return None
    doc = _load_json(source)
    return CoefficientSet.from_json(doc.get("coefficients", doc))


def cmd_invert(args) -> int:
    signals_path = Path(args.signals)
    raw = SignalSet.from_csv(signals_path)
    raw.require_complete()
    norm = _normalization(args, signals_path)
    normalized = raw if norm is None else normalize_signal(raw, *norm)
    options = SolverOptions(trace_constraint=args.trace_constraint == "on", tol=args.tol,
                            max_iter=args.max_iter, strict=args.strict)
    result = invert(normalized, _load_coefficients(args.coeffs), options)
    out = _out_dir(args.out)
    _dump_json(result.to_dict(), out / INVERSION)
    normalized.to_csv(out / NORMALIZED)
    _write_chi_csv(out / CHI_CSV, result.waiting_times, result.chi)
    n_admm = sum(s.method == "admm" for s in result.solutions)
    _log(f"condition number {result.condition_number:.6g}; {n_admm} of {len(result.solutions)} "
         f"waiting times needed the constrained solver")
    return EXIT_OK


def _write_chi_csv(path: Path, times, chi) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["T_fs", "entry", "re", "im"])
        for t, name, re, im in chi_rows(times, chi):
            w.writerow([_g(t), name, _g(re), _g(im)])


def cmd_scan(args) -> int:
    base_dir = Path(args.baseline)
    doc = _load_json(base_dir / INVERSION)
    normalized = SignalSet.from_csv(base_dir / NORMALIZED)
    solver = doc.get("solver", {})
    options = SolverOptions(**{k: solver[k] for k in ("trace_constraint", "tol", "max_iter", "relaxation", "rho")
                               if k in solver})
    options = replace(options, strict=False)
    baseline = invert(normalized, CoefficientSet.from_json(doc["coefficients"]), options)
    coefficients = tuple(c.strip() for c in args.coefficients.split(",") if c.strip())
    factors = parse_factors(args.factors) if args.factors else DEFAULT_FACTORS
    result = scan(ScanConfig(baseline, coefficients, factors), jobs=args.jobs)
    out = _out_dir(args.out or base_dir / "scan")
    for name, text in error_tables(result).items():
        (out / name).write_text(text, encoding="utf-8")
    _dump_json({"summary": summary(result), **result.to_dict()}, out / "scan.json")
    _log(f"wrote sensitivity tables to {out}")
    return EXIT_OK


def _read_trajectory(path) -> tuple[np.ndarray, list[ProcessMatrix]]:
    doc = _load_json(path)
    if "solutions" in doc:
        sols = doc["solutions"]
        if not sols:
            raise ValidationError(f"{path} holds no solutions")
        times = np.array([s["T"] for s in sols], dtype=float)
        return times, [ProcessMatrix([s["X"][n] for n in PARAMETER_NAMES]) for s in sols]
    if "chi" in doc:
        return trajectory_from_dict(doc)
    raise ValidationError(f"{path} is neither an inversion result nor a trajectory")


def cmd_fit(args) -> int:
    times, chi = _read_trajectory(args.chi)
    report = fit_trajectory(times, chi)
    out = _out_dir(args.out or Path(args.chi).parent)
    (out / "kinetics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "kinetics.txt").write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.input)
    doc = _load_json(src / INVERSION)
    if not doc.get("solutions"):
        raise ValidationError(f"{src / INVERSION} holds no solutions")
    times, chi = _read_trajectory(src / INVERSION)
    kinetics = _load_json(src / "kinetics.json") if (src / "kinetics.json").exists() else None

    if args.format == "json":
        text = json.dumps({"inversion": doc, "kinetics": kinetics}, indent=2, sort_keys=True) + "\n"
    elif args.format == "csv":
        lines = ["T_fs,entry,re,im"]
        for entry in ALL_ENTRIES:
            for t, c in zip(times, chi):
                v = c[entry]
                lines.append(f"{_g(t)},chi_{entry},{_g(v.real)},{_g(v.imag)}")
        text = "\n".join(lines) + "\n"
    else:
        text = _text_report(doc, kinetics)

    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _text_report(doc: dict, kinetics: dict | None) -> str:
    sols = doc["solutions"]
    lines = [
        f"waiting times: {len(sols)} ({sols[0]['T']:g} to {sols[-1]['T']:g} fs)",
        f"condition number of M: {doc['condition_number']:.4g}",
        f"trace constraint: {'on' if doc['trace_constraint'] else 'off'}",
        f"coefficients ({doc['sign_convention']}):",
    ]
    for name, (re, im) in sorted(doc["coefficients"].items()):
        lines.append(f"  {name} = {re:+.4f} {im:+.4f}i")
    lines.append(f"{'T_fs':>8} {'method':>7} {'min choi eig':>13} {'max pop sum':>12} {'objective':>10}")
    for s in sols:
        lines.append(f"{s['T']:8.2f} {s['method']:>7} {min(s['choi_eigenvalues']):13.3e} "
                     f"{max(s['population_sums']):12.6f} {s['objective']:10.3e}")
    if kinetics:
        lines.append("")
        lines.append("kinetics:")
        for row in kinetics["rows"]:
            lines.append(f"  {row['process']}: {row['fit']}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tgqpt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize a dataset of TG spectra")
    p.add_argument("--config", help="JSON simulation config (partial; defaults fill the rest)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise", type=float, help="relative spectral noise level")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reduce", help="assign levels and integrate spectra over the emission windows")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma4", type=float, default=DEFAULT_SIGMA4)
    p.add_argument("--scheme", help="JSON level scheme to use instead of peak assignment")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("invert", help="reconstruct chi(T) from integrated signals")
    p.add_argument("--signals", required=True)
    p.add_argument("--coeffs", default="auto", help="'auto' or a JSON coefficient file")
    p.add_argument("--trace-constraint", choices=("on", "off"), default="on")
    p.add_argument("--config", help="manifest with pulses and dipoles for normalization")
    p.add_argument("--tol", type=float, default=SolverOptions.tol)
    p.add_argument("--max-iter", type=int, default=SolverOptions.max_iter)
    p.add_argument("--strict", action="store_true", help="fail when the iteration does not converge")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("scan", help="coefficient sensitivity scan")
    p.add_argument("--baseline", required=True, help="directory written by invert")
    p.add_argument("--factors", help="comma-separated scaling factors")
    p.add_argument("--coefficients", default="A,B,C,D,E,F,G,H")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("fit", help="fit kinetics to a chi trajectory")
    p.add_argument("--chi", required=True, help="inversion.json or chi_true.json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("report", help="format an inversion directory")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConvergenceError, InversionError, FitError) as exc:
        _log(f"solver failure: {exc}")
        return EXIT_SOLVER
    except OSError as exc:
        _log(f"I/O error: {exc}")
        return EXIT_IO
    except (ValueError, KeyError, TypeError, LevelAssignmentError, SpectrumFormatError) as exc:
        _log(f"error: {exc}")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
