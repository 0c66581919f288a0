"""Reconstruction of chi(T) from the 24 windowed TG signals.

Pipeline: normalize each signal by its pulse/dipole prefactor, read the
eight T = 0 coefficients A..H, assemble the block-diagonal 24 x 16 system
``M X(T) = S(T)`` and solve it per waiting time as a least-squares problem
over physical process matrices (positive Choi matrix, optionally
trace-nonincreasing).

Sign convention: the coefficients are the measured T = 0 values, so F and H
carry the negative sign of the excited-state-absorption pathways that
produce them.  With this choice the printed block structure of M closes
exactly against the forward model.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .core import PARAMETER_NAMES, DipoleSet, ProcessMatrix, parameter_basis
from .spectra import IntegratedSignal, SignalSet, emission_labels

COEFFICIENT_NAMES = ("A", "B", "C", "D", "E", "F", "G", "H")

# Row order of S(T): [S_OO | S_II | S_OI].
SIGNAL_ORDER = ("OOO", "OOI", "IIO", "III", "OIO", "OII", "IOO", "IOI")
SIGNAL_ROWS = tuple((t, lab) for t in SIGNAL_ORDER for lab in emission_labels(t))

# Where each coefficient is read at T = 0.
COEFFICIENT_SOURCES = {
    "A": ("OOO", "Og"), "B": ("IIO", "Og"), "C": ("OOI", "Ig"), "D": ("III", "Ig"),
    "E": ("IOI", "Og"), "F": ("IOO", "OO_I"), "G": ("OIO", "Ig"), "H": ("OII", "II_O"),
}

SIGN_CONVENTION = "coefficients are measured T=0 values; F and H carry the ESA minus sign"

FEASIBILITY_TOL = 1e-12
RANK_DEFICIENT_COND = 1e12


class InversionError(RuntimeError):
    pass


class RankDeficientError(InversionError):
    pass


class ConvergenceError(InversionError):
    """Raised when the splitting iteration stalls; ``best`` holds the last solutions."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class CoefficientSet:
    A: complex
    B: complex
    C: complex
    D: complex
    E: complex
    F: complex
    G: complex
    H: complex

    def __post_init__(self):
        for name in COEFFICIENT_NAMES:
            v = complex(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"coefficient {name} is not finite")
            object.__setattr__(self, name, v)

    def scaled(self, name: str, factor: float) -> "CoefficientSet":
        return replace(self, **{name: getattr(self, name) * factor})

    def conj(self) -> "CoefficientSet":
        return CoefficientSet(*(np.conj(getattr(self, n)) for n in COEFFICIENT_NAMES))

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in COEFFICIENT_NAMES}

    def to_json(self) -> dict:
        return {n: [getattr(self, n).real, getattr(self, n).imag] for n in COEFFICIENT_NAMES}

    @classmethod
    def from_json(cls, d: Mapping) -> "CoefficientSet":
        vals = []
        for n in COEFFICIENT_NAMES:
            v = d[n]
            vals.append(complex(v[0], v[1]) if isinstance(v, (list, tuple)) else complex(v))
        return cls(*vals)


# ---------------------------------------------------------------------------
# normalization and system assembly
# ---------------------------------------------------------------------------

def dipole_ratio_from_absorption(frequency_axis, absorbance, w_Og: float, w_Ig: float) -> float:
    """``mu_Og / mu_Ig`` estimated as ``sqrt(A(w_Og) / A(w_Ig))`` from a linear absorption spectrum."""
    a_og = float(np.interp(w_Og, frequency_axis, absorbance))
    a_ig = float(np.interp(w_Ig, frequency_axis, absorbance))
    if not a_ig > 0 or a_og < 0:
        raise ValueError("absorbance must be positive at w_Ig and non-negative at w_Og")
    return float(np.sqrt(a_og / a_ig))


def normalization_factor(triad: str, pulses: Mapping, dipoles: DipoleSet) -> float:
    p, q, r = triad
    amp = _peak(pulses[p]) * _peak(pulses[q]) * _peak(pulses[r])
    return amp * dipoles.ground(p) * dipoles.ground(q)


def _peak(pulse) -> float:
    return float(getattr(pulse, "peak_amplitude", pulse))


def normalize_signal(raw, pulses: Mapping, dipoles: DipoleSet):
    """Divide a series by ``max(E_p) max(E_q) max(E_r) mu_pg mu_qg`` of its triad.

    ``raw`` is an :class:`IntegratedSignal` or a whole :class:`SignalSet`;
    ``pulses`` maps ``'O'``/``'I'`` to a pulse spectrum or directly to its peak amplitude.
    """
    def scale(triad, series):
        denom = normalization_factor(triad, pulses, dipoles)
        if denom == 0:
            raise ZeroDivisionError(f"normalization denominator of triad {triad} is zero")
        return np.asarray(series) / denom

    if isinstance(raw, IntegratedSignal):
        return replace(raw, series=scale(raw.triad, raw.series))
    return raw.map(lambda key, series: scale(key[0], series))


def extract_coefficients(normalized: SignalSet) -> CoefficientSet:
    """Read the eight T = 0 coefficients from normalized signals."""
    if normalized.waiting_times.size == 0 or normalized.waiting_times[0] != 0.0:
        raise ValueError("coefficient extraction needs the T = 0 point first in every series")
    missing = [f"{t}:{lab}" for t, lab in COEFFICIENT_SOURCES.values() if (t, lab) not in normalized]
    if missing:
        raise KeyError(f"missing integrated signals: {', '.join(missing)}")
    coeffs = CoefficientSet(*(normalized[COEFFICIENT_SOURCES[n]][0] for n in COEFFICIENT_NAMES))
    biggest = max(abs(v) for v in coeffs.as_dict().values())
    for name in ("A", "D"):
        if not abs(getattr(coeffs, name)) > 1e-10 * biggest:
            raise ValueError(f"coefficient {name} vanishes: population block is degenerate")
    for name, value in coeffs.as_dict().items():
        if abs(value) <= 1e-10 * biggest:
            warnings.warn(f"coefficient {name} is zero; its rows carry no information", stacklevel=2)
    return coeffs


def build_blocks(coeffs: CoefficientSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    A, B, C, D, E, F, G, H = (getattr(coeffs, n) for n in COEFFICIENT_NAMES)
    i = 1j
    m_oo = np.array([
        [0, 0, G, -i * G],
        [A, B, 0, 0],
        [0, 0, F, i * F],
        [0, 0, H, -i * H],
        [C, D, 0, 0],
        [0, 0, E, i * E],
    ], dtype=complex)
    m_oi = np.array([
        [0, 0, G, 0, 0, 0, -i * G, 0],
        [A, B, 0, 0, -i * A, -i * B, 0, 0],
        [0, 0, 0, F, 0, 0, 0, -i * F],
        [0, 0, H, 0, 0, 0, -i * H, 0],
        [C, D, 0, 0, -i * C, -i * D, 0, 0],
        [0, 0, 0, E, 0, 0, 0, -i * E],
        [0, 0, 0, G, 0, 0, 0, i * G],
        [A, B, 0, 0, i * A, i * B, 0, 0],
        [0, 0, F, 0, 0, 0, i * F, 0],
        [0, 0, 0, H, 0, 0, 0, i * H],
        [C, D, 0, 0, i * C, i * D, 0, 0],
        [0, 0, E, 0, 0, 0, i * E, 0],
    ], dtype=complex)
    return m_oo, m_oo.copy(), m_oi


def build_M(coeffs: CoefficientSet) -> np.ndarray:
    """The 24 x 16 block-diagonal system matrix ``M_OO (+) M_II (+) M_OI``."""
    return scipy.linalg.block_diag(*build_blocks(coeffs))


def assemble_S(normalized: SignalSet, t_index: int | None = None) -> np.ndarray:
    """Signal vector(s) in the row order of M: shape ``(24,)`` for one T, ``(n_T, 24)`` otherwise."""
    normalized.require_complete()
    S = np.stack([normalized[key] for key in SIGNAL_ROWS], axis=-1)
    return S if t_index is None else S[t_index]


def condition_number(M: np.ndarray) -> float:
    """Ratio of extreme singular values.

    Returns ``inf`` when the matrix is numerically singular, i.e. the
    smallest singular value is below the rank tolerance ``max(m, n) eps s_max``.
    """
    M = np.asarray(M)
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0:
        raise ValueError("condition number of the zero matrix is undefined")
    if s[-1] <= max(M.shape) * np.finfo(float).eps * s[0]:
        return float("inf")
    return float(s[0] / s[-1])


# ---------------------------------------------------------------------------
# constrained least squares
# ---------------------------------------------------------------------------

def _hvec_basis(n: int) -> np.ndarray:
    """Orthonormal real coordinates for n x n Hermitian matrices, shape (n*n, n, n)."""
    basis = []
    for k in range(n):
        e = np.zeros((n, n), dtype=complex)
        e[k, k] = 1.0
        basis.append(e)
    for k in range(n):
        for l in range(k + 1, n):
            e = np.zeros((n, n), dtype=complex)
            e[k, l] = e[l, k] = 1 / np.sqrt(2)
            basis.append(e)
            e = np.zeros((n, n), dtype=complex)
            e[k, l] = -1j / np.sqrt(2)
            e[l, k] = 1j / np.sqrt(2)
            basis.append(e)
    return np.array(basis)


_H4 = _hvec_basis(4)
_H2 = _hvec_basis(2)


def _hvec(mats: np.ndarray, basis: np.ndarray) -> np.ndarray:
    return np.einsum("kab,...ab->...k", basis.conj(), mats).real


def _hmat(vecs: np.ndarray, basis: np.ndarray) -> np.ndarray:
    return np.einsum("...k,kab->...ab", vecs, basis)


def _constraint_maps(trace_constraint: bool):
    """Linear map x -> stacked hvec coordinates of (Choi(x), I - Tr_out(x)) = A x + b."""
    choi_basis, trace_basis = parameter_basis()
    a_choi = _hvec(choi_basis, _H4).T  # (16, 16)
    if not trace_constraint:
        return a_choi, np.zeros(16), (16,)
    a_tr = -_hvec(trace_basis, _H2).T  # (4, 16)
    b_tr = _hvec(np.eye(2, dtype=complex), _H2)
    return np.vstack([a_choi, a_tr]), np.concatenate([np.zeros(16), b_tr]), (16, 4)


def _project_psd(v: np.ndarray, sizes) -> np.ndarray:
    out = np.empty_like(v)
    start = 0
    for size, basis, n in zip(sizes, (_H4, _H2), (4, 2)):
        block = v[..., start:start + size]
        w, u = np.linalg.eigh(_hmat(block, basis))
        w = np.clip(w, 0.0, None)
        proj = np.einsum("...ak,...k,...bk->...ab", u, w, u.conj())
        out[..., start:start + size] = _hvec(proj, basis)
        start += size
    return out


def _min_eigs(x: np.ndarray, a: np.ndarray, b: np.ndarray, sizes) -> np.ndarray:
    """Smallest eigenvalue of each constrained block, shape (..., n_blocks)."""
    v = x @ a.T + b
    mins = []
    start = 0
    for size, basis in zip(sizes, (_H4, _H2)):
        mins.append(np.linalg.eigvalsh(_hmat(v[..., start:start + size], basis))[..., 0])
        start += size
    return np.stack(mins, axis=-1)


# chi with Choi = I/4: strictly inside both cones (Choi eigenvalues 1/4, leakage 1/2).
_INTERIOR = np.array([0.25, 0.25, 0, 0, 0.25, 0.25] + [0] * 10, dtype=float)


def _restore_feasibility(x: np.ndarray, a, b, sizes) -> np.ndarray:
    """Smallest step toward the interior point that clears residual cone violations."""
    if _min_eigs(x, a, b, sizes).min() >= 0:
        return x
    lo, hi = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _min_eigs((1 - mid) * x + mid * _INTERIOR, a, b, sizes).min() >= 0:
            hi = mid
        else:
            lo = mid
    return (1 - hi) * x + hi * _INTERIOR


@dataclass(frozen=True)
class Solution:
    """Constrained least-squares solution at one waiting time."""

    chi: ProcessMatrix
    objective: float
    choi_eigenvalues: np.ndarray
    leakage_eigenvalues: np.ndarray
    primal_residual: float
    dual_residual: float
    iterations: int
    converged: bool
    method: str

    @property
    def x(self) -> np.ndarray:
        return self.chi.parameters

    def to_dict(self) -> dict:
        return {
            "X": dict(zip(PARAMETER_NAMES, map(float, self.x))),
            "choi_eigenvalues": [float(v) for v in self.choi_eigenvalues],
            "leakage_eigenvalues": [float(v) for v in self.leakage_eigenvalues],
            "population_sums": [float(v) for v in self.chi.population_sums()],
            "objective": self.objective,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "method": self.method,
        }


@dataclass(frozen=True)
class SolverOptions:
    trace_constraint: bool = True
    tol: float = 1e-9
    max_iter: int = 50_000
    relaxation: float = 1.7
    rho: float = 1.0
    strict: bool = False


def solve_constrained(M: np.ndarray, S: np.ndarray, options: SolverOptions | None = None,
                      **kwargs) -> list[Solution]:
    """Least squares ``min ||M X - S||^2`` over physical process matrices, per row of ``S``.

    The 24 complex equations are expanded to 48 real ones.  If the plain
    least-squares minimizer is already physical it is returned as is;
    otherwise an over-relaxed ADMM iteration alternates a linear solve with
    eigenvalue clipping of the Choi matrix and of the 2 x 2 leakage block.
    """
    opts = replace(options or SolverOptions(), **kwargs)
    M = np.asarray(M, dtype=complex)
    S2 = np.atleast_2d(np.asarray(S, dtype=complex))
    if M.shape != (24, 16) or S2.shape[1] != 24:
        raise ValueError(f"expected M (24, 16) and S (..., 24), got {M.shape} and {S2.shape}")
    kappa = condition_number(M)
    if not kappa < RANK_DEFICIENT_COND:
        raise RankDeficientError(f"system matrix is rank deficient (condition number {kappa:.3g})")

    R = np.vstack([M.real, M.imag])  # (48, 16)
    s = np.hstack([S2.real, S2.imag])  # (n, 48)
    a, b, sizes = _constraint_maps(opts.trace_constraint)

    x_ls = np.linalg.lstsq(R, s.T, rcond=None)[0].T  # (n, 16)
    feasible = _min_eigs(x_ls, a, b, sizes).min(axis=-1) >= -FEASIBILITY_TOL
    x = x_ls.copy()
    iters = np.zeros(len(s), dtype=int)
    r_prim = np.zeros(len(s))
    r_dual = np.zeros(len(s))
    converged = np.ones(len(s), dtype=bool)
    todo = np.flatnonzero(~feasible)
    if todo.size:
        xa, it, rp, rd, ok = _admm(R, s[todo], a, b, sizes, x_ls[todo], opts)
        x[todo] = xa
        iters[todo], r_prim[todo], r_dual[todo], converged[todo] = it, rp, rd, ok
        for k in todo:
            x[k] = _restore_feasibility(x[k], a, b, sizes)

    solutions = []
    for k in range(len(s)):
        chi = ProcessMatrix(x[k])
        resid = R @ x[k] - s[k]
        solutions.append(Solution(
            chi=chi,
            objective=float(resid @ resid),
            choi_eigenvalues=chi.choi_eigenvalues(),
            leakage_eigenvalues=np.linalg.eigvalsh(chi.leakage_block()),
            primal_residual=float(r_prim[k]),
            dual_residual=float(r_dual[k]),
            iterations=int(iters[k]),
            converged=bool(converged[k]),
            method="lstsq" if feasible[k] else "admm",
        ))
    if opts.strict and not converged.all():
        bad = np.flatnonzero(~converged)
        raise ConvergenceError(f"ADMM did not converge for rows {bad.tolist()} in {opts.max_iter} iterations",
                               solutions)
    return solutions


def _admm(R, s, a, b, sizes, x0, opts: SolverOptions):
    """Batched scaled-form ADMM with residual balancing; rows are independent problems."""
    n = len(s)
    alpha = opts.relaxation
    rtr = R.T @ R
    ata = a.T @ a
    rts = s @ R  # (n, 16)
    rho = np.full(n, opts.rho)

    def factor(r):
        return np.linalg.inv(rtr[None] + r[:, None, None] * ata[None])

    kinv = factor(rho)
    x = x0.copy()
    z = _project_psd(x @ a.T + b, sizes)
    u = np.zeros_like(z)
    active = np.ones(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    r_prim = np.full(n, np.inf)
    r_dual = np.full(n, np.inf)
    for it in range(1, opts.max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        rhs = rts[idx] + rho[idx, None] * ((z[idx] - b - u[idx]) @ a)
        xi = np.einsum("nij,nj->ni", kinv[idx], rhs)
        ax = xi @ a.T + b
        h = alpha * ax + (1 - alpha) * z[idx]
        z_new = _project_psd(h + u[idx], sizes)
        u[idx] = u[idx] + h - z_new
        rp = np.linalg.norm(ax - z_new, axis=1)
        rd = rho[idx] * np.linalg.norm((z_new - z[idx]) @ a, axis=1)
        x[idx], z[idx] = xi, z_new
        r_prim[idx], r_dual[idx], iters[idx] = rp, rd, it
        done = (rp < opts.tol) & (rd < opts.tol)
        active[idx[done]] = False
        if it % 25 == 0:
            grow = (rp > 10 * rd) & ~done
            shrink = (rd > 10 * rp) & ~done
            if grow.any() or shrink.any():
                g, sh = idx[grow], idx[shrink]
                rho[g] *= 2.0
                u[g] /= 2.0
                rho[sh] /= 2.0
                u[sh] *= 2.0
                changed = np.concatenate([g, sh])
                kinv[changed] = factor(rho[changed])
    return x, iters, r_prim, r_dual, ~active


# ---------------------------------------------------------------------------
# whole-dataset inversion
# ---------------------------------------------------------------------------

@dataclass
class InversionResult:
    waiting_times: np.ndarray
    coefficients: CoefficientSet
    M: np.ndarray
    condition_number: float
    solutions: list
    trace_constraint: bool = True
    normalized: SignalSet | None = field(default=None, repr=False)
    options: SolverOptions = field(default_factory=SolverOptions)

    @property
    def chi(self) -> list[ProcessMatrix]:
        return [s.chi for s in self.solutions]

    def tensors(self) -> np.ndarray:
        return np.stack([c.tensor for c in self.chi])

    def to_dict(self) -> dict:
        return {
            "sign_convention": SIGN_CONVENTION,
            "parameter_names": list(PARAMETER_NAMES),
            "trace_constraint": self.trace_constraint,
            "solver": asdict(self.options),
            "condition_number": self.condition_number,
            "coefficients": self.coefficients.to_json(),
            "waiting_times": [float(t) for t in self.waiting_times],
            "solutions": [dict(T=float(t), **s.to_dict()) for t, s in zip(self.waiting_times, self.solutions)],
        }


def invert(normalized: SignalSet, coefficients: CoefficientSet | None = None,
           options: SolverOptions | None = None, **kwargs) -> InversionResult:
    """Invert normalized signals for every waiting time."""
    opts = replace(options or SolverOptions(), **kwargs)
    normalized.require_complete()
    coeffs = coefficients if coefficients is not None else extract_coefficients(normalized)
    M = build_M(coeffs)
    sols = solve_constrained(M, assemble_S(normalized), opts)
    return InversionResult(
        waiting_times=normalized.waiting_times,
        coefficients=coeffs,
        M=M,
        condition_number=condition_number(M),
        solutions=sols,
        trace_constraint=opts.trace_constraint,
        normalized=normalized,
        options=opts,
    )


def chi_rows(times: Sequence[float], chi_traj: Sequence[ProcessMatrix]):
    """Flat ``(T, entry, re, im)`` rows over all 16 index tuples."""
    from .core import ALL_ENTRIES

    for t, chi in zip(times, chi_traj):
        for entry in ALL_ENTRIES:
            v = chi[entry]
            yield float(t), "chi_" + entry, v.real, v.imag
