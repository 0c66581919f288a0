"""One-at-a-time coefficient scaling scan of the inversion."""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import NONSECULAR_ENTRIES
from .inversion import (
    COEFFICIENT_NAMES,
    CoefficientSet,
    InversionError,
    InversionResult,
    SolverOptions,
    assemble_S,
    build_M,
    solve_constrained,
)

DEFAULT_FACTORS = (-10.0, -4.0, -1.6, -0.6, -0.25, -0.1, 0.1, 0.25, 0.6, 1.0, 1.6, 4.0, 10.0)


def reconstruction_errors(baseline: np.ndarray, perturbed: np.ndarray) -> tuple[float, float]:
    """Error1 and Error2 between two ``(n_T, 2, 2, 2, 2)`` tensor trajectories.

    Error1 is the largest T-averaged deviation over the 16 entries; Error2 is
    the largest entry-averaged deviation over T.  Both divisors come from the
    array shapes.
    """
    dev = np.abs(np.asarray(perturbed) - np.asarray(baseline)).reshape(len(baseline), -1)
    return float(dev.mean(axis=0).max()), float(dev.mean(axis=1).max())


@dataclass(frozen=True)
class ScanConfig:
    baseline: InversionResult
    coefficients: tuple = COEFFICIENT_NAMES
    factors: tuple = DEFAULT_FACTORS

    def __post_init__(self):
        unknown = [c for c in self.coefficients if c not in COEFFICIENT_NAMES]
        if unknown:
            raise ValueError(f"unknown coefficients {unknown}")
        if not self.factors:
            raise ValueError("factor list is empty")
        object.__setattr__(self, "coefficients", tuple(self.coefficients))
        object.__setattr__(self, "factors", tuple(float(f) for f in self.factors))


@dataclass
class ScanResult:
    coefficients: tuple
    factors: tuple
    error1: np.ndarray
    error2: np.ndarray
    nonsecular_max: np.ndarray
    failures: dict = field(default_factory=dict)

    def table_csv(self, which: str = "error1", decimals: int | None = None) -> str:
        """Rows = coefficients, columns = factors; failed cells are empty."""
        data = {"error1": self.error1, "error2": self.error2}[which]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["coefficient"] + [repr(f) for f in self.factors])
        for name, row in zip(self.coefficients, data):
            w.writerow([name] + [_cell(v, decimals) for v in row])
        return buf.getvalue()

    def to_dict(self) -> dict:
        nan_to_none = lambda a: [[None if np.isnan(v) else float(v) for v in row] for row in a]
        return {
            "coefficients": list(self.coefficients),
            "factors": list(self.factors),
            "error1": nan_to_none(self.error1),
            "error2": nan_to_none(self.error2),
            "nonsecular_max": nan_to_none(self.nonsecular_max),
            "failures": {f"{c}:{_fmt(f)}": msg for (c, f), msg in self.failures.items()},
        }


def _fmt(x: float) -> str:
    return format(x, ".17g")


def _cell(v: float, decimals: int | None) -> str:
    if np.isnan(v):
        return ""
    return _fmt(v) if decimals is None else f"{v:.{decimals}f}"


def _scan_cell(coeffs: CoefficientSet, name: str, factor: float, S: np.ndarray,
               options: SolverOptions):
    M = build_M(coeffs.scaled(name, factor))
    sols = solve_constrained(M, S, options)
    return np.stack([s.chi.tensor for s in sols])


def _nonsecular_max(tensors: np.ndarray) -> float:
    idx = {"O": 0, "I": 1}
    vals = [np.abs(tensors[(slice(None),) + tuple(idx[c] for c in e)]).max() for e in NONSECULAR_ENTRIES]
    return float(max(vals))


def _run(args):
    coeffs, name, factor, S, options = args
    try:
        return _scan_cell(coeffs, name, factor, S, options), None
    except InversionError as exc:
        return None, str(exc)


def scan(config: ScanConfig, jobs: int | None = 1) -> ScanResult:
    """Scale one coefficient at a time, re-invert every T and compare with the baseline.

    Cells whose perturbed system cannot be solved are left as NaN with the
    failure message recorded.  ``jobs`` > 1 spreads cells over processes;
    ``None`` uses every available core.
    """
    base = config.baseline
    if base.normalized is None:
        raise ValueError("baseline inversion carries no signals to re-invert")
    S = assemble_S(base.normalized)
    ref = base.tensors()
    tasks = [(base.coefficients, c, f, S, base.options) for c in config.coefficients for f in config.factors]
    jobs = (os.cpu_count() or 1) if jobs is None else max(1, int(jobs))
    if jobs == 1:
        outcomes = [_run(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))

    shape = (len(config.coefficients), len(config.factors))
    e1, e2, ns = np.full(shape, np.nan), np.full(shape, np.nan), np.full(shape, np.nan)
    failures = {}
    for k, (tensors, err) in enumerate(outcomes):
        i, j = divmod(k, shape[1])
        if tensors is None:
            failures[(config.coefficients[i], config.factors[j])] = err
            continue
        e1[i, j], e2[i, j] = reconstruction_errors(ref, tensors)
        ns[i, j] = _nonsecular_max(tensors)
    return ScanResult(config.coefficients, config.factors, e1, e2, ns, failures)


def parse_factors(text: str) -> tuple[float, ...]:
    """Comma-separated factor list, e.g. ``"-10,-1,1,10"``."""
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ValueError(f"invalid factor list {text!r}") from exc
    if not values:
        raise ValueError("factor list is empty")
    return values


def summary(result: ScanResult) -> dict:
    return {
        "mean_error1": float(np.nanmean(result.error1)),
        "mean_error2": float(np.nanmean(result.error2)),
        "max_error1_by_coefficient": {c: float(np.nanmax(r)) if np.isfinite(r).any() else None
                                      for c, r in zip(result.coefficients, result.error1)},
        "failed_cells": len(result.failures),
    }


def error_tables(result: ScanResult) -> dict[str, str]:
    """The error tables as CSV text, rounded and full precision."""
    return {
        "error1.csv": result.table_csv("error1", 2),
        "error2.csv": result.table_csv("error2", 2),
        "error1_full.csv": result.table_csv("error1"),
        "error2_full.csv": result.table_csv("error2"),
    }


__all__ = [
    "DEFAULT_FACTORS", "ScanConfig", "ScanResult", "scan", "reconstruction_errors",
    "parse_factors", "summary", "error_tables",
]
