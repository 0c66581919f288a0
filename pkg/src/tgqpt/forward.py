"""Forward model: process-matrix trajectory -> windowed TG signals and spectra."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (
    DipoleSet,
    EnergyLevelScheme,
    STANDARD_GRID,
    REFERENCE_SCHEME,
    ProcessMatrix,
    WaitingTimeGrid,
    process_from_choi,
)
from .spectra import DEFAULT_SIGMA4, TRIADS, SignalSet, TGSpectrum, emission_labels

_IDX = {"O": 0, "I": 1}

MAX_LINESHAPE_FWHM = 330.0
DEFAULT_LINESHAPE_FWHM = 100.0


@dataclass(frozen=True)
class PulseSpectrum:
    """Gaussian amplitude spectrum of one narrowband pulse."""

    label: str
    center: float
    fwhm: float = 250.0
    peak_amplitude: float = 1.0

    def __post_init__(self):
        if self.label not in _IDX:
            raise ValueError(f"pulse label must be 'O' or 'I', got {self.label!r}")
        if not self.fwhm > 0:
            raise ValueError("pulse fwhm must be positive")
        if not self.peak_amplitude > 0:
            raise ValueError("pulse peak_amplitude must be positive")

    def amplitude(self, w):
        return self.peak_amplitude * np.exp(-4 * np.log(2) * (np.asarray(w) - self.center) ** 2 / self.fwhm ** 2)

    def check_selective(self, other_transition: float, threshold: float = 0.01) -> None:
        leak = self.amplitude(other_transition) / self.peak_amplitude
        if not leak < threshold:
            raise ValueError(
                f"pulse {self.label} is not selective: amplitude at {other_transition} cm^-1 "
                f"is {leak:.3g} of peak"
            )


def default_pulses(scheme: EnergyLevelScheme = REFERENCE_SCHEME) -> dict[str, PulseSpectrum]:
    return {"O": PulseSpectrum("O", scheme.w_Og), "I": PulseSpectrum("I", scheme.w_Ig)}


@dataclass(frozen=True)
class KineticsModel:
    """Stretched-exponential population and coherence kinetics.

    ``nonsecular_amplitude`` sets all five independent nonsecular entries to
    ``amplitude * (1 - chi_OOOO(T))``, which vanishes at T = 0.
    """

    tau_OO: float = 212.0
    beta_OO: float = 3.3
    omega_bar_OI: float = 2 * np.pi / 70.0
    tau_OI: float = 200.0
    beta_OI: float = 2.0
    chi_IIII_const: float = 1.0
    nonsecular_amplitude: float = 0.0

    def __post_init__(self):
        for name in ("tau_OO", "beta_OO", "tau_OI", "beta_OI"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.chi_IIII_const <= 1.0:
            raise ValueError("chi_IIII_const must lie in [0, 1]")
        if self.nonsecular_amplitude < 0:
            raise ValueError("nonsecular_amplitude must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "KineticsModel":
        return cls(**{k: float(v) for k, v in d.items()})


def stretched_exp(t, tau: float, beta: float):
    return np.exp(-(np.asarray(t, dtype=float) / tau) ** beta)


def model_chi(model: KineticsModel, grid: WaitingTimeGrid | Sequence[float]) -> list[ProcessMatrix]:
    """Process matrices of ``model`` on the waiting-time grid; chi(0) is the identity."""
    times = np.asarray(list(grid), dtype=float)
    pop = stretched_exp(times, model.tau_OO, model.beta_OO)
    coh = np.exp(-1j * model.omega_bar_OI * times) * stretched_exp(times, model.tau_OI, model.beta_OI)
    ramp = model.nonsecular_amplitude * (1.0 - pop)
    out = []
    for t, a, c, ns in zip(times, pop, coh, ramp):
        iiii = 1.0 if t == 0 else model.chi_IIII_const
        out.append(ProcessMatrix.from_entries(
            OOOO=a, IIOO=1.0 - a, IIII=iiii, OOII=0.0, OIOI=c,
            OIOO=ns, OIII=ns, IOOI=ns, OOOI=ns, IIOI=ns,
        ))
    return out


def random_process(rng: np.random.Generator, rank: int | None = None,
                   max_population: float | None = None) -> ProcessMatrix:
    """Random completely positive, trace-nonincreasing process matrix.

    The Choi matrix is ``W W^dagger`` for complex Gaussian ``W`` (4 x rank),
    rescaled so the largest eigenvalue of ``sum_i chi_ii..`` equals
    ``max_population`` (drawn from U(0.2, 1) when omitted).
    """
    rank = rank or int(rng.integers(1, 5))
    w = rng.normal(size=(4, rank)) + 1j * rng.normal(size=(4, rank))
    choi = w @ w.conj().T
    chi = process_from_choi(0.5 * (choi + choi.conj().T), atol=1e-9)
    top = np.linalg.eigvalsh(np.eye(2) - chi.leakage_block()).max()
    target = rng.uniform(0.2, 1.0) if max_population is None else max_population
    return chi * (target / top)


def random_trajectory(grid: WaitingTimeGrid | Sequence[float], rng: np.random.Generator) -> list[ProcessMatrix]:
    """Identity at T = 0 followed by independent random physical process matrices."""
    times = list(grid)
    return [ProcessMatrix.identity()] + [random_process(rng) for _ in times[1:]]


# ---------------------------------------------------------------------------
# signals
# ---------------------------------------------------------------------------

def _swap(label: str) -> str:
    return "I" if label == "O" else "O"


def detection_weights(dipoles: DipoleSet, r: str) -> dict:
    """Dipole products of each pathway detected by a third pulse ``r``.

    Keys are emission labels; values map a final-state pair (or ``'delta'``
    for the bleach term and ``'gg'`` for ground-state recovery) to its weight.
    Signs: SE and GSB positive, ESA and GSR negative.
    """
    d = dipoles
    if r == "O":
        return {
            "Ig": {"IO": d.mu_Og * d.mu_Ig - d.mu_IO_I * d.mu_IO_O},
            "Og": {"delta": d.mu_Og ** 2, "gg": -d.mu_Og ** 2,
                   "OO": d.mu_Og ** 2 - d.mu_OO_O ** 2, "II": -d.mu_IO_I ** 2},
            "OO_I": {"OI": -d.mu_OO_O * d.mu_OO_I},
        }
    return {
        "Og": {"OI": d.mu_Ig * d.mu_Og - d.mu_IO_O * d.mu_IO_I},
        "Ig": {"delta": d.mu_Ig ** 2, "gg": -d.mu_Ig ** 2,
               "II": d.mu_Ig ** 2 - d.mu_II_I ** 2, "OO": -d.mu_IO_O ** 2},
        "II_O": {"IO": -d.mu_II_I * d.mu_II_O},
    }


def preparation_factor(triad: str, dipoles: DipoleSet, pulses: Mapping[str, PulseSpectrum]) -> complex:
    """``f_pq max(E_p) max(E_q) max(E_r) mu_pg mu_qg`` for a triad ``pqr``."""
    p, q, r = triad
    amp = pulses[p].peak_amplitude * pulses[q].peak_amplitude * pulses[r].peak_amplitude
    return dipoles.overlap(p, q) * amp * dipoles.ground(p) * dipoles.ground(q)


def synthesize_signals(chi_traj: Sequence[ProcessMatrix], dipoles: DipoleSet,
                       pulses: Mapping[str, PulseSpectrum], scheme: EnergyLevelScheme,
                       waiting_times: WaitingTimeGrid | Sequence[float]) -> SignalSet:
    """Windowed TG signals of all eight triads from a process-matrix trajectory.

    The ground-state recovery amplitude is ``chi_ggqp = delta_qp - chi_OOqp -
    chi_IIqp`` so that the bleach and recovery terms cancel for the part of
    the population that has returned to the ground state.
    """
    times = np.asarray(list(waiting_times), dtype=float)
    if len(chi_traj) != times.size:
        raise ValueError(f"{len(chi_traj)} process matrices for {times.size} waiting times")
    tensors = np.stack([chi.tensor for chi in chi_traj])  # (nT, i, j, q, p)
    out = {}
    for triad in TRIADS:
        p, q, r = triad
        qi, pi = _IDX[q], _IDX[p]
        final = tensors[:, :, :, qi, pi]  # (nT, i, j)
        delta = 1.0 if q == p else 0.0
        gg = delta - final[:, 0, 0] - final[:, 1, 1]
        pref = preparation_factor(triad, dipoles, pulses)
        for label, terms in detection_weights(dipoles, r).items():
            s = np.zeros(times.size, dtype=complex)
            for key, weight in terms.items():
                if key == "delta":
                    s = s + weight * delta
                elif key == "gg":
                    s = s + weight * gg
                else:
                    s = s + weight * final[:, _IDX[key[0]], _IDX[key[1]]]
            out[(triad, label)] = pref * s
    return SignalSet(times, scheme, out)


def gaussian_lineshape(w, center: float, fwhm: float):
    """Unit-area Gaussian."""
    sigma = fwhm / (2 * np.sqrt(2 * np.log(2)))
    return np.exp(-0.5 * ((np.asarray(w) - center) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))


def default_frequency_axis(scheme: EnergyLevelScheme = REFERENCE_SCHEME, sigma4: float = DEFAULT_SIGMA4,
                           step: float = 5.0, margin: float = 300.0) -> np.ndarray:
    lo = np.floor((scheme.w_II_O - sigma4 - margin) / 100.0) * 100.0
    hi = np.ceil((scheme.w_OO_I + sigma4 + margin) / 100.0) * 100.0
    n = int(round((hi - lo) / step)) + 1
    return lo + step * np.arange(n)


def spectra_from_signals(signals: SignalSet, frequency_axis: np.ndarray,
                         lineshape_fwhm: float = DEFAULT_LINESHAPE_FWHM) -> dict[str, TGSpectrum]:
    """Place every windowed amplitude under a unit-area Gaussian at its emission frequency."""
    if not 0 < lineshape_fwhm <= MAX_LINESHAPE_FWHM:
        raise ValueError(
            f"lineshape FWHM {lineshape_fwhm} cm^-1 must lie in (0, {MAX_LINESHAPE_FWHM}] so peaks stay separated"
        )
    axis = np.asarray(frequency_axis, dtype=float)
    out = {}
    for triad in TRIADS:
        values = np.zeros((signals.waiting_times.size, axis.size), dtype=complex)
        for label in emission_labels(triad):
            shape = gaussian_lineshape(axis, signals.scheme.emission(label), lineshape_fwhm)
            values += np.outer(signals[(triad, label)], shape)
        out[triad] = TGSpectrum(triad, axis, signals.waiting_times, values)
    return out


def synthesize_spectra(chi_traj: Sequence[ProcessMatrix], dipoles: DipoleSet,
                       pulses: Mapping[str, PulseSpectrum], scheme: EnergyLevelScheme,
                       waiting_times: WaitingTimeGrid | Sequence[float],
                       frequency_axis: np.ndarray | None = None,
                       lineshape_fwhm: float = DEFAULT_LINESHAPE_FWHM) -> dict[str, TGSpectrum]:
    signals = synthesize_signals(chi_traj, dipoles, pulses, scheme, waiting_times)
    if frequency_axis is None:
        frequency_axis = default_frequency_axis(scheme)
    return spectra_from_signals(signals, frequency_axis, lineshape_fwhm)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def _complex_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    # sigma is the rms modulus: E|n|^2 = sigma^2.
    return (sigma / np.sqrt(2)) * (rng.normal(size=shape) + 1j * rng.normal(size=shape))


def add_noise(signals: SignalSet, relative_sigma: float, seed: int) -> SignalSet:
    """Add i.i.d. complex Gaussian noise with rms ``relative_sigma * max|signal|`` over the dataset."""
    if relative_sigma < 0:
        raise ValueError("relative_sigma must be non-negative")
    if relative_sigma == 0:
        return signals.map(lambda k, v: v.copy())
    scale = max(np.max(np.abs(v)) for v in signals.signals.values())
    rng = np.random.default_rng(seed)
    sigma = relative_sigma * scale
    out = {}
    for triad in TRIADS:
        for label in emission_labels(triad):
            key = (triad, label)
            if key in signals:
                out[key] = signals[key] + _complex_noise(rng, signals[key].shape, sigma)
    return SignalSet(signals.waiting_times, signals.scheme, out)


def add_spectral_noise(spectra: Mapping[str, TGSpectrum], relative_sigma: float,
                       seed: int) -> dict[str, TGSpectrum]:
    """Same noise model as :func:`add_noise`, applied pixel-wise to full spectra."""
    if relative_sigma < 0:
        raise ValueError("relative_sigma must be non-negative")
    if relative_sigma == 0:
        return dict(spectra)
    scale = max(np.max(np.abs(s.values)) for s in spectra.values())
    rng = np.random.default_rng(seed)
    sigma = relative_sigma * scale
    return {
        t: TGSpectrum(t, spectra[t].frequency_axis, spectra[t].waiting_times,
                      spectra[t].values + _complex_noise(rng, spectra[t].values.shape, sigma))
        for t in TRIADS
    }


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class SimulationConfig:
    """Everything needed to regenerate a synthetic dataset."""

    kinetics: KineticsModel = field(default_factory=KineticsModel)
    dipoles: DipoleSet = field(default_factory=DipoleSet)
    scheme: EnergyLevelScheme = REFERENCE_SCHEME
    pulses: dict = field(default_factory=dict)
    waiting_times: tuple = STANDARD_GRID.points
    frequency_axis: dict = field(default_factory=dict)
    lineshape_fwhm: float = DEFAULT_LINESHAPE_FWHM
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.pulses:
            self.pulses = default_pulses(self.scheme)
        if not self.frequency_axis:
            axis = default_frequency_axis(self.scheme)
            self.frequency_axis = {"start": float(axis[0]), "stop": float(axis[-1]),
                                   "step": float(axis[1] - axis[0])}
        WaitingTimeGrid.from_iterable(self.waiting_times)
        for label, other in (("O", self.scheme.w_Ig), ("I", self.scheme.w_Og)):
            self.pulses[label].check_selective(other)

    def axis(self) -> np.ndarray:
        fa = self.frequency_axis
        n = int(round((fa["stop"] - fa["start"]) / fa["step"])) + 1
        return fa["start"] + fa["step"] * np.arange(n)

    def to_dict(self) -> dict:
        return {
            "kinetics": self.kinetics.to_dict(),
            "dipoles": self.dipoles.to_dict(),
            "scheme": self.scheme.to_dict(),
            "pulses": {k: asdict(v) for k, v in sorted(self.pulses.items())},
            "waiting_times": list(self.waiting_times),
            "frequency_axis": dict(self.frequency_axis),
            "lineshape_fwhm": self.lineshape_fwhm,
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimulationConfig":
        """Build from a (possibly partial) JSON document; missing fields take defaults.

        Invalid values raise ``ValueError`` naming the offending field.
        """
        known = {"kinetics", "dipoles", "scheme", "pulses", "waiting_times", "frequency_axis",
                 "lineshape_fwhm", "noise", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        kwargs: dict = {}
        parsers = {
            "kinetics": lambda v: KineticsModel(**{**KineticsModel().to_dict(), **v}),
            "dipoles": lambda v: DipoleSet.from_dict({**DipoleSet().to_dict(), **v}),
            "scheme": EnergyLevelScheme.from_dict,
            "waiting_times": lambda v: tuple(float(x) for x in v),
            "frequency_axis": lambda v: {k: float(v[k]) for k in ("start", "stop", "step")},
            "lineshape_fwhm": float,
            "noise": float,
            "seed": int,
        }
        for name, parse in parsers.items():
            if name in d:
                try:
                    kwargs[name] = parse(d[name])
                except (TypeError, ValueError, KeyError) as exc:
                    raise ValueError(f"invalid config field '{name}': {exc}") from None
        scheme = kwargs.get("scheme", REFERENCE_SCHEME)
        if "pulses" in d:
            try:
                pulses = default_pulses(scheme)
                for label, spec in d["pulses"].items():
                    pulses[label] = PulseSpectrum(**{**asdict(pulses[label]), **spec, "label": label})
                kwargs["pulses"] = pulses
            except (TypeError, ValueError, KeyError) as exc:
                raise ValueError(f"invalid config field 'pulses': {exc}") from None
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise ValueError(f"invalid config: {exc}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def simulate(config: SimulationConfig) -> tuple[list[ProcessMatrix], SignalSet, dict[str, TGSpectrum]]:
    """Ground-truth trajectory, noiseless windowed signals and (possibly noisy) spectra."""
    chi = model_chi(config.kinetics, config.waiting_times)
    signals = synthesize_signals(chi, config.dipoles, config.pulses, config.scheme, config.waiting_times)
    spectra = spectra_from_signals(signals, config.axis(), config.lineshape_fwhm)
    spectra = add_spectral_noise(spectra, config.noise, config.seed)
    return chi, signals, spectra


def trajectory_to_dict(times: Sequence[float], chi_traj: Sequence[ProcessMatrix]) -> dict:
    return {"waiting_times": [float(t) for t in times],
            "chi": [chi.to_dict() for chi in chi_traj]}


def trajectory_from_dict(d: Mapping) -> tuple[np.ndarray, list[ProcessMatrix]]:
    from .core import PARAMETER_NAMES

    times = np.asarray(d["waiting_times"], dtype=float)
    chi = [ProcessMatrix([entry[name] for name in PARAMETER_NAMES]) for entry in d["chi"]]
    return times, chi


__all__ = [
    "PulseSpectrum", "KineticsModel", "SimulationConfig", "model_chi", "random_process", "random_trajectory",
    "synthesize_signals", "synthesize_spectra", "spectra_from_signals", "add_noise", "add_spectral_noise",
    "preparation_factor", "detection_weights", "default_pulses", "default_frequency_axis", "simulate",
]
