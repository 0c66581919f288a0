"""Frequency-resolved TG spectra: windowed integration, level assignment, sparsity table.

Spectrum files are CSV, one per pulse triad::

    # triad=OOO
    # n_freq=<int>
    # n_T=<int>
    T_fs,<w_1>,<w_2>,...,<w_nfreq>
    <T_1>,<re>,<im>,<re>,<im>,...
    ...

The first data row carries the frequency axis (cm^-1) after a label cell;
every following row starts with the waiting time (fs) and holds ``n_freq``
``re,im`` pairs.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import EnergyLevelScheme, WaitingTimeGrid

TRIADS = ("OOO", "OOI", "III", "IIO", "OIO", "OII", "IOI", "IOO")

# Emission windows available to a spectrum, keyed by the third pulse.
EMISSION_LABELS = {"O": ("Ig", "Og", "OO_I"), "I": ("II_O", "Ig", "Og")}

DEFAULT_SIGMA4 = 165.0
MAX_FREQUENCY_SPACING = 20.0


class SpectrumFormatError(ValueError):
    pass


class LevelAssignmentError(ValueError):
    pass


def check_triad(triad: str) -> str:
    if triad not in TRIADS:
        raise ValueError(f"unknown pulse triad {triad!r}; expected one of {TRIADS}")
    return triad


def emission_labels(triad: str) -> tuple[str, str, str]:
    return EMISSION_LABELS[check_triad(triad)[2]]


def reported_elements(triad: str, label: str) -> tuple[str, ...]:
    """Process-matrix entries that contribute to the ``label`` window of ``triad``."""
    p, q, r = check_triad(triad)
    qp = q + p
    if label not in EMISSION_LABELS[r]:
        raise ValueError(f"{label!r} is not an emission window of triad {triad}")
    if r == "O":
        table = {"Ig": ("IO",), "Og": ("OO", "II"), "OO_I": ("OI",)}
    else:
        table = {"II_O": ("IO",), "Ig": ("OO", "II"), "Og": ("OI",)}
    return tuple(final + qp for final in table[label])


@dataclass(frozen=True)
class TGSpectrum:
    """Complex TG spectrum of one triad on a (waiting time x frequency) grid."""

    triad: str
    frequency_axis: np.ndarray
    waiting_times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        check_triad(self.triad)
        w = np.asarray(self.frequency_axis, dtype=float)
        t = np.asarray(WaitingTimeGrid.from_iterable(self.waiting_times).array())
        v = np.asarray(self.values, dtype=complex)
        if w.ndim != 1 or w.size < 2:
            raise ValueError("frequency axis must be 1-D with at least two points")
        dw = np.diff(w)
        if np.any(dw <= 0):
            raise ValueError("frequency axis must be strictly increasing")
        if not np.allclose(dw, dw[0], rtol=1e-6, atol=1e-9):
            raise ValueError("frequency axis must be uniformly spaced")
        if dw[0] > MAX_FREQUENCY_SPACING:
            raise ValueError(f"frequency spacing {dw[0]} cm^-1 exceeds {MAX_FREQUENCY_SPACING} cm^-1")
        if v.shape != (t.size, w.size):
            raise ValueError(f"values shape {v.shape} does not match (n_T, n_freq) = {(t.size, w.size)}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"spectrum {self.triad} contains non-finite values")
        object.__setattr__(self, "frequency_axis", w)
        object.__setattr__(self, "waiting_times", t)
        object.__setattr__(self, "values", v)

    @property
    def spacing(self) -> float:
        return float(self.frequency_axis[1] - self.frequency_axis[0])

    def scaled(self, factor: complex) -> "TGSpectrum":
        return TGSpectrum(self.triad, self.frequency_axis, self.waiting_times, factor * self.values)


@dataclass(frozen=True)
class IntegratedSignal:
    triad: str
    label: str
    omega4: float
    series: np.ndarray


@dataclass
class SignalSet:
    """The 24 windowed signals of a dataset, keyed by ``(triad, emission label)``."""

    waiting_times: np.ndarray
    scheme: EnergyLevelScheme
    signals: dict = field(default_factory=dict)

    def __post_init__(self):
        self.waiting_times = np.asarray(self.waiting_times, dtype=float)
        for key, series in list(self.signals.items()):
            s = np.asarray(series, dtype=complex)
            if s.shape != self.waiting_times.shape:
                raise ValueError(f"series {key} has shape {s.shape}, expected {self.waiting_times.shape}")
            self.signals[key] = s

    def __getitem__(self, key: tuple[str, str]) -> np.ndarray:
        return self.signals[key]

    def __contains__(self, key) -> bool:
        return key in self.signals

    def keys(self):
        return self.signals.keys()

    def missing(self) -> list[tuple[str, str]]:
        return [(t, lab) for t in TRIADS for lab in emission_labels(t) if (t, lab) not in self.signals]

    def require_complete(self) -> None:
        missing = self.missing()
        if missing:
            names = ", ".join(f"{t}:{lab}" for t, lab in missing)
            raise KeyError(f"missing integrated signals: {names}")

    def map(self, fn) -> "SignalSet":
        return SignalSet(self.waiting_times, self.scheme, {k: fn(k, v) for k, v in self.signals.items()})

    def signal(self, triad: str, label: str) -> IntegratedSignal:
        return IntegratedSignal(triad, label, self.scheme.emission(label), self.signals[(triad, label)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["triad", "omega4_label", "omega4_cm-1", "T_fs", "re", "im"])
            for triad in TRIADS:
                for label in emission_labels(triad):
                    if (triad, label) not in self.signals:
                        continue
                    s = self.signals[(triad, label)]
                    w4 = self.scheme.emission(label)
                    for t, v in zip(self.waiting_times, s):
                        w.writerow([triad, label, _g(w4), _g(t), _g(v.real), _g(v.imag)])

    @classmethod
    def from_csv(cls, path, scheme: EnergyLevelScheme | None = None) -> "SignalSet":
        rows: dict = {}
        times: dict = {}
        freqs: dict = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:4] != ["triad", "omega4_label", "omega4_cm-1", "T_fs"]:
                raise SpectrumFormatError(f"{path}: line 1: unexpected signal header {header}")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 6:
                    raise SpectrumFormatError(f"{path}: line {lineno}: expected 6 fields, got {len(row)}")
                triad, label = row[0], row[1]
                try:
                    w4, t, re, im = (float(x) for x in row[2:])
                except ValueError as exc:
                    raise SpectrumFormatError(f"{path}: line {lineno}: {exc}") from None
                rows.setdefault((triad, label), []).append(complex(re, im))
                times.setdefault((triad, label), []).append(t)
                freqs[label] = w4
        if not rows:
            raise SpectrumFormatError(f"{path}: no signal rows")
        ref = next(iter(times.values()))
        for key, t in times.items():
            if t != ref:
                raise SpectrumFormatError(f"{path}: series {key} uses a different waiting-time grid")
        if scheme is None:
            scheme = EnergyLevelScheme(freqs["Ig"], freqs["Og"], freqs["OO_I"], freqs["II_O"])
        return cls(np.array(ref), scheme, {k: np.array(v) for k, v in rows.items()})


def _g(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def _window_slice(axis: np.ndarray, omega4: float, sigma4: float) -> slice:
    if not sigma4 > 0:
        raise ValueError("sigma4 must be positive")
    dw = axis[1] - axis[0]
    lo, hi = omega4 - sigma4, omega4 + sigma4
    if lo < axis[0] - 0.5 * dw or hi > axis[-1] + 0.5 * dw:
        raise ValueError(
            f"window [{lo:.1f}, {hi:.1f}] cm^-1 lies outside the frequency axis "
            f"[{axis[0]:.1f}, {axis[-1]:.1f}] cm^-1"
        )
    i_lo = int(np.argmin(np.abs(axis - lo)))
    i_hi = int(np.argmin(np.abs(axis - hi)))
    return slice(i_lo, i_hi + 1)


def integrate_window(spec: TGSpectrum, omega4: float, sigma4: float = DEFAULT_SIGMA4,
                     label: str = "") -> IntegratedSignal:
    """Trapezoidal integral of the complex spectrum over ``[omega4 - sigma4, omega4 + sigma4]``.

    Window endpoints are snapped to the nearest grid points.  Returns one
    complex value per waiting time, in signal units times cm^-1.
    """
    sl = _window_slice(spec.frequency_axis, omega4, sigma4)
    series = np.trapezoid(spec.values[:, sl], spec.frequency_axis[sl], axis=1)
    return IntegratedSignal(spec.triad, label, float(omega4), series)


def reduce_spectra(spectra: Mapping[str, TGSpectrum], scheme: EnergyLevelScheme,
                   sigma4: float = DEFAULT_SIGMA4) -> SignalSet:
    """Integrate the three emission windows of every spectrum."""
    missing = [t for t in TRIADS if t not in spectra]
    if missing:
        raise KeyError(f"missing spectra for triads {missing}")
    times = spectra[TRIADS[0]].waiting_times
    out = {}
    for triad in TRIADS:
        spec = spectra[triad]
        if not np.array_equal(spec.waiting_times, times):
            raise ValueError(f"spectrum {triad} uses a different waiting-time grid")
        for label in emission_labels(triad):
            out[(triad, label)] = integrate_window(spec, scheme.emission(label), sigma4, label).series
    return SignalSet(times, scheme, out)


# ---------------------------------------------------------------------------
# level assignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PeakCheck:
    triad: str
    expected_label: str
    expected: float
    observed: float
    tolerance: float

    @property
    def deviation(self) -> float:
        return abs(self.observed - self.expected)

    @property
    def passed(self) -> bool:
        return self.deviation <= self.tolerance


@dataclass(frozen=True)
class LevelAssignment:
    scheme: EnergyLevelScheme
    peaks: dict
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.to_dict(),
            "peaks_T0": dict(self.peaks),
            "checks": [
                {"triad": c.triad, "expected_label": c.expected_label, "expected": c.expected,
                 "observed": c.observed, "deviation": c.deviation, "tolerance": c.tolerance,
                 "passed": c.passed}
                for c in self.checks
            ],
        }


# Spectra whose single T = 0 peak defines a level, and those that cross-check it.
_DEFINING = {"Og": "OOO", "Ig": "III", "OO_I": "IOO", "II_O": "OII"}
_CROSS_CHECKS = (("OOI", "Ig"), ("IIO", "Og"), ("IOI", "Og"), ("OIO", "Ig"))


def peak_frequency(spec: TGSpectrum, t_index: int = 0) -> float:
    """Frequency of the maximum of ``|S(w, T)|``; equal maxima raise :class:`LevelAssignmentError`."""
    mag = np.abs(spec.values[t_index])
    peak = mag.max()
    if peak == 0:
        raise LevelAssignmentError(f"spectrum {spec.triad} is identically zero at T = {spec.waiting_times[t_index]}")
    hits = np.flatnonzero(mag >= peak * (1 - 1e-12))
    if hits.size > 1:
        where = ", ".join(f"{spec.frequency_axis[i]:.1f}" for i in hits)
        raise LevelAssignmentError(f"spectrum {spec.triad}: tied maxima at {where} cm^-1")
    return float(spec.frequency_axis[hits[0]])


def assign_levels(spectra: Mapping[str, TGSpectrum], sigma4: float = DEFAULT_SIGMA4) -> LevelAssignment:
    """Assign the four emission frequencies from the T = 0 spectra and cross-validate them."""
    missing = [t for t in TRIADS if t not in spectra]
    if missing:
        raise LevelAssignmentError(f"missing spectra for triads {missing}")
    for triad in TRIADS:
        if spectra[triad].waiting_times[0] != 0.0:
            raise LevelAssignmentError(f"spectrum {triad} does not contain T = 0")
    peaks = {t: peak_frequency(spectra[t]) for t in TRIADS}
    levels = {label: peaks[triad] for label, triad in _DEFINING.items()}
    try:
        scheme = EnergyLevelScheme(levels["Ig"], levels["Og"], levels["OO_I"], levels["II_O"])
    except ValueError as exc:
        raise LevelAssignmentError(f"inconsistent level ordering from T = 0 peaks: {exc}") from None
    checks = tuple(
        PeakCheck(triad, label, scheme.emission(label), peaks[triad], sigma4) for triad, label in _CROSS_CHECKS
    )
    failed = [c for c in checks if not c.passed]
    if failed:
        c = failed[0]
        raise LevelAssignmentError(
            f"spectrum {c.triad}: T = 0 peak at {c.observed:.1f} cm^-1 deviates from "
            f"w_{c.expected_label} = {c.expected:.1f} cm^-1 by more than {sigma4} cm^-1"
        )
    return LevelAssignment(scheme, peaks, checks)


# ---------------------------------------------------------------------------
# contribution table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContributionRow:
    triad: str
    labels: tuple
    values: tuple
    elements: tuple

    @property
    def defined(self) -> bool:
        return not any(np.isnan(v) for v in self.values)

    @property
    def dominant(self) -> tuple[str, float]:
        if not self.defined:
            return ("", float("nan"))
        k = int(np.argmax(self.values))
        return self.labels[k], self.values[k]

    def __getitem__(self, label: str) -> float:
        return self.values[self.labels.index(label)]


def contribution_table(signals: SignalSet | Mapping) -> dict[str, ContributionRow]:
    """Per-spectrum share of ``sum_T |S(w4, T)|^2`` among its three windows.

    Rows whose three series are all zero are returned with NaN values.
    """
    data = signals.signals if isinstance(signals, SignalSet) else signals
    table = {}
    for triad in TRIADS:
        labels = emission_labels(triad)
        if not all((triad, lab) in data for lab in labels):
            raise KeyError(f"contribution table needs all three windows of {triad}")
        norms = np.array([np.sum(np.abs(np.asarray(data[(triad, lab)])) ** 2) for lab in labels])
        total = norms.sum()
        values = tuple(float(v) for v in norms / total) if total > 0 else (float("nan"),) * 3
        elements = tuple(reported_elements(triad, lab) for lab in labels)
        table[triad] = ContributionRow(triad, labels, values, elements)
    return table


def contribution_table_csv(table: Mapping[str, ContributionRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["triad", "omega4_label", "fraction", "chi_elements", "defined"])
    for triad in TRIADS:
        row = table[triad]
        for lab, v, el in zip(row.labels, row.values, row.elements):
            w.writerow([triad, lab, "nan" if np.isnan(v) else _g(v), " ".join("chi_" + e for e in el),
                        str(row.defined).lower()])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def write_spectrum(spec: TGSpectrum, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# triad={spec.triad}\n")
        fh.write(f"# n_freq={spec.frequency_axis.size}\n")
        fh.write(f"# n_T={spec.waiting_times.size}\n")
        fh.write(",".join(["T_fs"] + [_g(w) for w in spec.frequency_axis]) + "\n")
        for t, row in zip(spec.waiting_times, spec.values):
            cells = [_g(t)]
            for v in row:
                cells.append(_g(v.real))
                cells.append(_g(v.imag))
            fh.write(",".join(cells) + "\n")


def read_spectrum(path) -> TGSpectrum:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = {}
    lineno = 0
    while lineno < len(lines) and lines[lineno].startswith("#"):
        key, _, value = lines[lineno][1:].strip().partition("=")
        header[key.strip()] = value.strip()
        lineno += 1
    for key in ("triad", "n_freq", "n_T"):
        if key not in header:
            raise SpectrumFormatError(f"{path}: missing header line '# {key}=...'")
    try:
        n_freq, n_t = int(header["n_freq"]), int(header["n_T"])
    except ValueError:
        raise SpectrumFormatError(f"{path}: n_freq and n_T must be integers") from None
    if lineno >= len(lines):
        raise SpectrumFormatError(f"{path}: line {lineno + 1}: missing frequency-axis row")
    axis_cells = lines[lineno].split(",")
    if len(axis_cells) != n_freq + 1:
        raise SpectrumFormatError(
            f"{path}: line {lineno + 1}: expected {n_freq} frequencies, got {len(axis_cells) - 1}"
        )
    try:
        axis = np.array([float(x) for x in axis_cells[1:]])
    except ValueError as exc:
        raise SpectrumFormatError(f"{path}: line {lineno + 1}: {exc}") from None
    times = np.empty(n_t)
    values = np.empty((n_t, n_freq), dtype=complex)
    for k in range(n_t):
        ln = lineno + 1 + k
        if ln >= len(lines):
            raise SpectrumFormatError(f"{path}: line {ln + 1}: file truncated, expected {n_t} waiting-time rows")
        cells = lines[ln].split(",")
        if len(cells) != 2 * n_freq + 1:
            raise SpectrumFormatError(
                f"{path}: line {ln + 1}: expected {2 * n_freq + 1} fields, got {len(cells)}"
            )
        try:
            nums = np.array([float(x) for x in cells])
        except ValueError as exc:
            raise SpectrumFormatError(f"{path}: line {ln + 1}: {exc}") from None
        times[k] = nums[0]
        values[k] = nums[1::2] + 1j * nums[2::2]
    extra = [ln for ln in lines[lineno + 1 + n_t:] if ln.strip()]
    if extra:
        raise SpectrumFormatError(f"{path}: line {lineno + 2 + n_t}: unexpected trailing data")
    try:
        return TGSpectrum(header["triad"], axis, times, values)
    except ValueError as exc:
        raise SpectrumFormatError(f"{path}: {exc}") from None


def spectrum_filename(triad: str) -> str:
    return f"spectrum_{triad}.csv"


def write_spectra(spectra: Mapping[str, TGSpectrum], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for triad in TRIADS:
        path = directory / spectrum_filename(triad)
        write_spectrum(spectra[triad], path)
        paths.append(path)
    return paths


def read_spectra(directory) -> dict[str, TGSpectrum]:
    directory = Path(directory)
    out = {}
    for triad in TRIADS:
        path = directory / spectrum_filename(triad)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing spectrum file {path}")
        spec = read_spectrum(path)
        if spec.triad != triad:
            raise SpectrumFormatError(f"{path}: header says triad={spec.triad}, expected {triad}")
        out[triad] = spec
    return out
