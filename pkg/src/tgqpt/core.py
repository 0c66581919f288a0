"""Shared domain types for two-band exciton process tomography.

Conventions
-----------
* Energies are wavenumbers (cm^-1), times are femtoseconds.
* The single-exciton basis is ``(O, I)`` and is indexed ``O -> 0``, ``I -> 1``.
* ``chi[i, j, q, p]`` is the amplitude for the initial coherence/population
  ``|q><p|`` to end up in ``|i><j|`` after the waiting time, i.e.
  ``rho_ij(T) = sum_qp chi[i, j, q, p] rho_qp(0)``.  Final indices come first.
* The Choi matrix has row index ``(i, q)`` and column index ``(j, p)``,
  flattened as ``2*i + q`` and ``2*j + p``.  :func:`choi_from_process` and
  :func:`process_from_choi` are the only places this reshape happens.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SPEED_OF_LIGHT_CM_PER_FS = 2.99792458e-5

LABELS = ("O", "I")
_IDX = {"O": 0, "I": 1}

HERMITICITY_TOL = 1e-12

# Layout of the 16 real parameters: [X_OO | X_II | X_OI].
PARAMETER_NAMES = (
    "chi_OOOO", "chi_IIOO", "Re chi_OIOO", "Im chi_OIOO",
    "chi_OOII", "chi_IIII", "Re chi_OIII", "Im chi_OIII",
    "Re chi_OOOI", "Re chi_IIOI", "Re chi_OIOI", "Re chi_IOOI",
    "Im chi_OOOI", "Im chi_IIOI", "Im chi_OIOI", "Im chi_IOOI",
)

ALL_ENTRIES = tuple(a + b + c + d for a in LABELS for b in LABELS for c in LABELS for d in LABELS)

POPULATION_ENTRIES = ("OOOO", "IIOO", "IIII", "OOII")
COHERENCE_ENTRIES = ("OIOI",)
NONSECULAR_ENTRIES = ("OIOO", "OIII", "IOOI", "OOOI", "IIOI")


class HermiticityError(ValueError):
    """Raised when a tensor violates chi_ijqp = conj(chi_jipq)."""


def wavenumber_to_angular_frequency(w):
    """Convert a wavenumber in cm^-1 to an angular frequency in rad/fs."""
    return np.multiply(2.0 * np.pi * SPEED_OF_LIGHT_CM_PER_FS, w)


def _index(entry: str) -> tuple[int, int, int, int]:
    if len(entry) != 4 or any(c not in _IDX for c in entry):
        raise KeyError(f"not a process-matrix entry: {entry!r}")
    return tuple(_IDX[c] for c in entry)  # type: ignore[return-value]


@dataclass(frozen=True)
class EnergyLevelScheme:
    """Emission frequencies of the g -> SEM -> DEM ladder.

    Only four frequencies are distinct.  Under the harmonic doubly-excited
    manifold ``w_II_I = w_IO_O = w_Ig`` and ``w_OO_O = w_IO_I = w_Og``.
    """

    w_Ig: float
    w_Og: float
    w_OO_I: float
    w_II_O: float

    def __post_init__(self):
        if not self.w_Og > self.w_Ig:
            raise ValueError(f"w_Og ({self.w_Og}) must exceed w_Ig ({self.w_Ig})")
        if not self.w_OO_I > self.w_Og:
            raise ValueError(f"w_OO_I ({self.w_OO_I}) must exceed w_Og ({self.w_Og})")
        if not self.w_II_O < self.w_Ig:
            raise ValueError(f"w_II_O ({self.w_II_O}) must be below w_Ig ({self.w_Ig})")

    @classmethod
    def harmonic(cls, w_Ig: float, w_Og: float) -> "EnergyLevelScheme":
        """Scheme with doubly-excited energies equal to sums of single-exciton energies."""
        return cls(w_Ig=w_Ig, w_Og=w_Og, w_OO_I=2 * w_Og - w_Ig, w_II_O=2 * w_Ig - w_Og)

    @property
    def w_II_I(self) -> float:
        return self.w_Ig

    @property
    def w_IO_O(self) -> float:
        return self.w_Ig

    @property
    def w_OO_O(self) -> float:
        return self.w_Og

    @property
    def w_IO_I(self) -> float:
        return self.w_Og

    def emission(self, label: str) -> float:
        """Frequency for an emission label ``'Ig'``, ``'Og'``, ``'OO_I'`` or ``'II_O'``."""
        return float(getattr(self, "w_" + label))

    def distinct(self) -> tuple[float, float, float, float]:
        return (self.w_II_O, self.w_Ig, self.w_Og, self.w_OO_I)

    def check_separation(self, sigma4: float) -> None:
        """Raise if any two distinct frequencies are closer than the window width 2*sigma4."""
        w = sorted(self.distinct())
        gaps = np.diff(w)
        if np.any(gaps < 2 * sigma4):
            raise ValueError(f"emission frequencies {w} are not separated by 2*sigma4 = {2 * sigma4}")

    def to_dict(self) -> dict:
        return {"w_Ig": self.w_Ig, "w_Og": self.w_Og, "w_OO_I": self.w_OO_I, "w_II_O": self.w_II_O}

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyLevelScheme":
        return cls(**{k: float(d[k]) for k in ("w_Ig", "w_Og", "w_OO_I", "w_II_O")})


# Level values assigned from the T = 0 spectra; DEM values follow the harmonic rule.
REFERENCE_SCHEME = EnergyLevelScheme.harmonic(16635.0, 17068.0)


def _complex(value) -> complex:
    if isinstance(value, (list, tuple)):
        return complex(float(value[0]), float(value[1]))
    return complex(value)


@dataclass(frozen=True)
class DipoleSet:
    """Transition dipole magnitudes in units of mu_Ig, plus pulse-overlap factors f_pq."""

    mu_Og: float = 1.1
    mu_II_I: float = 1.0
    mu_II_O: float = 0.8
    mu_OO_O: float = 1.1
    mu_OO_I: float = 0.05
    mu_IO_I: float = 0.6
    mu_IO_O: float = 0.5
    mu_Ig: float = 1.0
    f_OO: complex = 1.0
    f_II: complex = 1.0
    f_OI: complex = 1.0
    f_IO: complex = 1.0

    def __post_init__(self):
        if self.mu_Ig != 1.0:
            raise ValueError("dipoles are expressed in units of mu_Ig, so mu_Ig must be exactly 1")
        for name in ("mu_Og", "mu_II_I", "mu_II_O", "mu_OO_O", "mu_OO_I", "mu_IO_I", "mu_IO_O"):
            value = getattr(self, name)
            if isinstance(value, complex) or not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite non-negative real, got {value!r}")
        for name in ("f_OO", "f_II", "f_OI", "f_IO"):
            object.__setattr__(self, name, _complex(getattr(self, name)))

    def ground(self, label: str) -> float:
        """Dipole for the g -> label transition."""
        return self.mu_Og if label == "O" else self.mu_Ig

    def overlap(self, p: str, q: str) -> complex:
        return getattr(self, f"f_{p}{q}")

    def to_dict(self) -> dict:
        d = {}
        for name in ("mu_Ig", "mu_Og", "mu_II_I", "mu_II_O", "mu_OO_O", "mu_OO_I", "mu_IO_I", "mu_IO_O"):
            d[name] = getattr(self, name)
        for name in ("f_OO", "f_II", "f_OI", "f_IO"):
            v = getattr(self, name)
            d[name] = [v.real, v.imag]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DipoleSet":
        kwargs = {}
        for k, v in d.items():
            kwargs[k] = _complex(v) if k.startswith("f_") else float(v)
        return cls(**kwargs)


class ProcessMatrix:
    """Process matrix on the (O, I) single-exciton basis.

    Stored as the 16 independent real parameters (see ``PARAMETER_NAMES``);
    the conjugate partners are synthesized on access, so the Hermiticity
    symmetry ``chi_ijqp = conj(chi_jipq)`` holds by construction.
    """

    __slots__ = ("_x", "_tensor")

    def __init__(self, parameters: Sequence[float]):
        x = np.array(parameters, dtype=float).reshape(-1)
        if x.shape != (16,):
            raise ValueError(f"expected 16 real parameters, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("process-matrix parameters must be finite")
        x.flags.writeable = False
        self._x = x
        self._tensor = None

    # -- constructors -----------------------------------------------------
    @classmethod
    def identity(cls) -> "ProcessMatrix":
        return cls.from_tensor(_identity_tensor())

    @classmethod
    def zero(cls) -> "ProcessMatrix":
        return cls(np.zeros(16))

    @classmethod
    def from_entries(cls, **entries: complex) -> "ProcessMatrix":
        """Build from named independent entries, e.g. ``from_entries(OOOO=1, OIOI=0.5j)``.

        Conjugate partners (``IOIO`` for ``OIOI`` ...) may be given instead of
        the canonical name; unspecified entries are zero.
        """
        t = np.zeros((2, 2, 2, 2), dtype=complex)
        for name, value in entries.items():
            i, j, q, p = _index(name)
            t[i, j, q, p] = value
            t[j, i, p, q] = np.conj(value)
        return cls.from_tensor(t)

    @classmethod
    def from_tensor(cls, tensor, atol: float = HERMITICITY_TOL) -> "ProcessMatrix":
        t = np.asarray(tensor, dtype=complex).reshape(2, 2, 2, 2)
        check_hermiticity(t, atol)
        return cls(_parameters_from_tensor(t))

    # -- views -------------------------------------------------------------
    @property
    def parameters(self) -> np.ndarray:
        return self._x

    @property
    def tensor(self) -> np.ndarray:
        if self._tensor is None:
            t = _tensor_from_parameters(self._x)
            t.flags.writeable = False
            self._tensor = t
        return self._tensor

    def __getitem__(self, entry: str) -> complex:
        return complex(self.tensor[_index(entry)])

    def population_sums(self) -> np.ndarray:
        """``chi_OOqq + chi_IIqq`` for q = O, I."""
        t = self.tensor
        return np.array([(t[0, 0, q, q] + t[1, 1, q, q]).real for q in range(2)])

    def leakage_block(self) -> np.ndarray:
        """``1 - sum_i chi_iiqp``: the 2x2 block carried off to the ground state."""
        t = self.tensor
        return np.eye(2) - (t[0, 0] + t[1, 1])

    def choi_eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(choi_from_process(self))

    def is_completely_positive(self, tol: float = 1e-9) -> bool:
        return bool(self.choi_eigenvalues().min() >= -tol)

    def is_trace_nonincreasing(self, tol: float = 1e-9) -> bool:
        return bool(np.linalg.eigvalsh(self.leakage_block()).min() >= -tol)

    def __add__(self, other: "ProcessMatrix") -> "ProcessMatrix":
        return ProcessMatrix(self._x + other._x)

    def __sub__(self, other: "ProcessMatrix") -> "ProcessMatrix":
        return ProcessMatrix(self._x - other._x)

    def __mul__(self, scalar: float) -> "ProcessMatrix":
        return ProcessMatrix(float(scalar) * self._x)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        return isinstance(other, ProcessMatrix) and np.array_equal(self._x, other._x)

    def __hash__(self):
        return hash(self._x.tobytes())

    def __repr__(self) -> str:
        return f"ProcessMatrix({np.array2string(self._x, precision=4)})"

    def to_dict(self) -> dict:
        return dict(zip(PARAMETER_NAMES, (float(v) for v in self._x)))


def check_hermiticity(tensor: np.ndarray, atol: float = HERMITICITY_TOL) -> None:
    t = np.asarray(tensor).reshape(2, 2, 2, 2)
    partner = np.conj(t.transpose(1, 0, 3, 2))
    err = np.max(np.abs(t - partner))
    if not err <= atol:
        raise HermiticityError(f"chi_ijqp != conj(chi_jipq): max deviation {err:.3e} > {atol:.1e}")


def _identity_tensor() -> np.ndarray:
    t = np.zeros((2, 2, 2, 2), dtype=complex)
    for i in range(2):
        for j in range(2):
            t[i, j, i, j] = 1.0
    return t


_O, _I = 0, 1


def _tensor_from_parameters(x: np.ndarray) -> np.ndarray:
    t = np.zeros((2, 2, 2, 2), dtype=complex)

    def put(entry, value):
        i, j, q, p = _index(entry)
        t[i, j, q, p] = value
        t[j, i, p, q] = np.conj(value)

    put("OOOO", x[0])
    put("IIOO", x[1])
    put("OIOO", x[2] + 1j * x[3])
    put("OOII", x[4])
    put("IIII", x[5])
    put("OIII", x[6] + 1j * x[7])
    put("OOOI", x[8] + 1j * x[12])
    put("IIOI", x[9] + 1j * x[13])
    put("OIOI", x[10] + 1j * x[14])
    put("IOOI", x[11] + 1j * x[15])
    return t


def _parameters_from_tensor(t: np.ndarray) -> np.ndarray:
    def g(entry):
        return t[_index(entry)]

    ooio, iioi, oioi, iooi = g("OOOI"), g("IIOI"), g("OIOI"), g("IOOI")
    return np.array([
        g("OOOO").real, g("IIOO").real, g("OIOO").real, g("OIOO").imag,
        g("OOII").real, g("IIII").real, g("OIII").real, g("OIII").imag,
        ooio.real, iioi.real, oioi.real, iooi.real,
        ooio.imag, iioi.imag, oioi.imag, iooi.imag,
    ])


def choi_from_process(chi) -> np.ndarray:
    """Reshape a process matrix into its 4x4 Choi matrix ``C[(i,q),(j,p)] = chi_ijqp``.

    Accepts a :class:`ProcessMatrix` or a raw ``(2, 2, 2, 2)`` tensor; raw
    tensors are checked for the Hermiticity symmetry first.
    """
    if isinstance(chi, ProcessMatrix):
        t = chi.tensor
    else:
        t = np.asarray(chi, dtype=complex).reshape(2, 2, 2, 2)
        check_hermiticity(t)
    return np.ascontiguousarray(t.transpose(0, 2, 1, 3).reshape(4, 4))


def process_from_choi(choi, atol: float = HERMITICITY_TOL) -> ProcessMatrix:
    """Inverse of :func:`choi_from_process` (a pure index permutation)."""
    c = np.asarray(choi, dtype=complex)
    if c.shape != (4, 4):
        raise ValueError(f"Choi matrix must be 4x4, got {c.shape}")
    err = np.max(np.abs(c - c.conj().T))
    if not err <= atol:
        raise HermiticityError(f"Choi matrix is not Hermitian: max deviation {err:.3e}")
    return ProcessMatrix.from_tensor(c.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3), atol=atol)


def quadratic_form(chi, z: np.ndarray) -> float:
    """``sum_ijqp conj(z_iq) chi_ijqp z_jp`` for a complex 2x2 matrix ``z``."""
    t = chi.tensor if isinstance(chi, ProcessMatrix) else np.asarray(chi)
    return complex(np.einsum("iq,ijqp,jp->", np.conj(z), t, z)).real


@dataclass(frozen=True)
class WaitingTimeGrid:
    """Strictly increasing waiting times in fs, starting at exactly T = 0."""

    points: tuple = field(default_factory=tuple)

    def __post_init__(self):
        pts = tuple(float(t) for t in self.points)
        if not pts:
            raise ValueError("waiting-time grid is empty")
        if pts[0] != 0.0:
            raise ValueError(f"waiting-time grid must start at T = 0, got {pts[0]}")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError("waiting-time grid must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, t_max: float = 510.0, n: int = 33) -> "WaitingTimeGrid":
        return cls(tuple(np.linspace(0.0, t_max, n)))

    @classmethod
    def from_iterable(cls, values: Iterable[float]) -> "WaitingTimeGrid":
        return cls(tuple(values))

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def array(self) -> np.ndarray:
        return np.asarray(self.points)


# 33 points from 0 to 510 fs.
STANDARD_GRID = WaitingTimeGrid.uniform(510.0, 33)


def parameter_basis() -> tuple[np.ndarray, np.ndarray]:
    """Choi matrices and (sum_i chi_ii..) blocks of the 16 unit parameter vectors.

    Returns arrays of shape ``(16, 4, 4)`` and ``(16, 2, 2)``; both maps are linear in the parameters.
    """
    choi = np.empty((16, 4, 4), dtype=complex)
    trace = np.empty((16, 2, 2), dtype=complex)
    for k in range(16):
        e = np.zeros(16)
        e[k] = 1.0
        t = _tensor_from_parameters(e)
        choi[k] = t.transpose(0, 2, 1, 3).reshape(4, 4)
        trace[k] = t[0, 0] + t[1, 1]
    return choi, trace
