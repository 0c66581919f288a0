import numpy as np
import pytest

from tgqpt.core import STANDARD_GRID, REFERENCE_SCHEME, DipoleSet
from tgqpt.forward import (
    KineticsModel,
    default_frequency_axis,
    default_pulses,
    model_chi,
    synthesize_signals,
    synthesize_spectra,
)
from tgqpt.spectra import TGSpectrum

# Measured T = 0 peak positions per triad, in cm^-1.
MEASURED_PEAKS = {
    "OOO": 17068.0, "III": 16635.0, "IOO": 17452.0, "OII": 16118.0,
    "OOI": 16572.0, "IIO": 17025.0, "IOI": 17012.0, "OIO": 16635.0,
}


def peak_spectra(peaks, axis=None, fwhm=100.0, times=(0.0,)):
    """One Gaussian band per triad at the given centre, constant in T."""
    axis = np.arange(15500.0, 18001.0, 1.0) if axis is None else axis
    sigma = fwhm / (2 * np.sqrt(2 * np.log(2)))
    out = {}
    for triad, centre in peaks.items():
        row = np.exp(-0.5 * ((axis - centre) / sigma) ** 2)
        out[triad] = TGSpectrum(triad, axis, np.asarray(times), np.tile(row, (len(times), 1)))
    return out


@pytest.fixture(scope="session")
def dipoles():
    return DipoleSet()


@pytest.fixture(scope="session")
def pulses():
    return default_pulses(REFERENCE_SCHEME)


@pytest.fixture(scope="session")
def reference_chi():
    return model_chi(KineticsModel(), STANDARD_GRID)


@pytest.fixture(scope="session")
def reference_signals(reference_chi, dipoles, pulses):
    return synthesize_signals(reference_chi, dipoles, pulses, REFERENCE_SCHEME, STANDARD_GRID.array())


@pytest.fixture(scope="session")
def reference_spectra(reference_chi, dipoles, pulses):
    return synthesize_spectra(reference_chi, dipoles, pulses, REFERENCE_SCHEME, STANDARD_GRID.array(),
                              default_frequency_axis(REFERENCE_SCHEME))


@pytest.fixture(scope="session")
def measured_peak_spectra():
    return peak_spectra(MEASURED_PEAKS)


# Acceptance criteria outcomes, printed at the end of the run.
ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
