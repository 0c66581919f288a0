"""Process tomography of two-exciton dynamics from frequency-resolved transient-grating spectra."""
from .core import DipoleSet, EnergyLevelScheme, ProcessMatrix, WaitingTimeGrid
from .forward import KineticsModel, SimulationConfig, simulate
from .inversion import CoefficientSet, InversionResult, invert, normalize_signal
from .spectra import SignalSet, TGSpectrum

__version__ = "0.1.0"

__all__ = [
    "DipoleSet", "EnergyLevelScheme", "ProcessMatrix", "WaitingTimeGrid", "KineticsModel",
    "SimulationConfig", "simulate", "CoefficientSet", "InversionResult", "invert", "normalize_signal",
    "SignalSet", "TGSpectrum",
]
