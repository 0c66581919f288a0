import warnings

import cvxpy as cp
import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgqpt.core import STANDARD_GRID, REFERENCE_SCHEME, DipoleSet, ProcessMatrix, parameter_basis
from tgqpt.forward import (
    KineticsModel,
    add_noise,
    default_pulses,
    model_chi,
    random_process,
    random_trajectory,
    synthesize_signals,
)
from tgqpt.inversion import (
    COEFFICIENT_NAMES,
    SIGNAL_ROWS,
    CoefficientSet,
    ConvergenceError,
    RankDeficientError,
    SolverOptions,
    assemble_S,
    build_blocks,
    build_M,
    chi_rows,
    condition_number,
    dipole_ratio_from_absorption,
    extract_coefficients,
    invert,
    normalize_signal,
    solve_constrained,
)
from tgqpt.spectra import IntegratedSignal

T = STANDARD_GRID.array()
NONSECULAR = ("OIOO", "OIII", "OOOI", "IIOI", "IOOI")
ONES = CoefficientSet(*[1.0] * 8)


def normalized_for(chi, dipoles=None, pulses=None, times=None):
    d = dipoles or DipoleSet()
    p = pulses or default_pulses(REFERENCE_SCHEME)
    times = T[: len(chi)] if times is None else times
    return normalize_signal(synthesize_signals(chi, d, p, REFERENCE_SCHEME, times), p, d)


@pytest.fixture(scope="module")
def reference_normalized(reference_signals, pulses, dipoles):
    return normalize_signal(reference_signals, pulses, dipoles)


@pytest.fixture(scope="module")
def M_default(reference_normalized):
    return build_M(extract_coefficients(reference_normalized))


def real_system(M, S):
    return np.vstack([M.real, M.imag]), np.concatenate([S.real, S.imag])


def oracle_solve(M, S, trace_constraint=True):
    """Same convex program through cvxpy, using the real embedding of each Hermitian cone."""
    R, s = real_system(M, S)
    choi_b, trace_b = parameter_basis()
    x = cp.Variable(16)

    def embed(basis, const):
        re = sum(x[k] * basis[k].real for k in range(16)) + const.real
        im = sum(x[k] * basis[k].imag for k in range(16)) + const.imag
        return cp.bmat([[re, -im], [im, re]])

    cons = [embed(choi_b, np.zeros((4, 4), complex)) >> 0]
    if trace_constraint:
        cons.append(embed(-trace_b, np.eye(2, dtype=complex)) >> 0)
    prob = cp.Problem(cp.Minimize(cp.sum_squares(R @ x - s)), cons)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        prob.solve(solver=cp.CLARABEL)
    return x.value, prob.value


def objective(M, S, x):
    R, s = real_system(M, S)
    r = R @ x - s
    return float(r @ r)


def is_feasible(x, tol=0.0):
    chi = ProcessMatrix(x)
    return chi.choi_eigenvalues().min() >= -tol and np.linalg.eigvalsh(chi.leakage_block()).min() >= -tol


# --- coefficients and normalization ----------------------------------------------

def test_unit_normalization_is_identity():
    sig = IntegratedSignal("OOO", "Og", 17068.0, np.array([1.0, 2.0 + 1j]))
    d = DipoleSet(mu_Og=1.0)
    out = normalize_signal(sig, {"O": 1.0, "I": 1.0}, d)
    assert np.array_equal(out.series, sig.series)


def test_normalization_divides_by_prefactor():
    sig = IntegratedSignal("OII", "II_O", 16118.0, np.array([6.0]))
    out = normalize_signal(sig, {"O": 2.0, "I": 1.5}, DipoleSet(mu_Og=2.0))
    # 2 * 1.5 * 1.5 * mu_Og * mu_Ig
    assert out.series[0] == pytest.approx(6.0 / 9.0, rel=1e-15)


def test_zero_denominator_is_error():
    sig = IntegratedSignal("OOO", "Og", 17068.0, np.array([1.0]))
    with pytest.raises(ZeroDivisionError):
        normalize_signal(sig, {"O": 0.0, "I": 1.0}, DipoleSet())


def test_absorption_ratio():
    axis = np.arange(16000.0, 17500.0, 1.0)
    sigma = 40.0
    a = 4 * np.exp(-0.5 * ((axis - 17068) / sigma) ** 2) + np.exp(-0.5 * ((axis - 16635) / sigma) ** 2)
    assert dipole_ratio_from_absorption(axis, a, 17068.0, 16635.0) == pytest.approx(2.0, rel=1e-12)


def test_coefficients_equal_t0_signal_values(reference_normalized):
    c = extract_coefficients(reference_normalized)
    # plugging the default dipoles into the closed forms
    expected = dict(A=1.21, B=0.85, C=0.75, D=1.0, E=0.8, F=-0.055, G=0.8, H=-0.8)
    for name in COEFFICIENT_NAMES:
        assert getattr(c, name) == pytest.approx(expected[name], abs=1e-15)


def test_a_for_equal_dipoles():
    c = extract_coefficients(normalized_for([ProcessMatrix.identity()], DipoleSet(mu_Og=1.1, mu_OO_O=1.1)))
    assert c.A == pytest.approx(2 * 1.1 ** 2 - 1.1 ** 2, abs=1e-15)


def test_zero_b_warns():
    d = DipoleSet(mu_Og=0.6, mu_IO_I=0.6)
    norm = normalized_for([ProcessMatrix.identity()], d)
    with pytest.warns(UserWarning, match="coefficient B"):
        c = extract_coefficients(norm)
    assert c.B == 0


def test_degenerate_population_block_is_error():
    norm = normalized_for([ProcessMatrix.identity()])
    d = dict(norm.signals)
    d[("OOO", "Og")] = np.zeros(1, complex)
    with pytest.raises(ValueError, match="coefficient A"):
        extract_coefficients(type(norm)(norm.waiting_times, norm.scheme, d))


def test_coefficient_json_round_trip():
    c = CoefficientSet(1 + 2j, 2, 3, 4, 5, -6, 7, -8j)
    assert CoefficientSet.from_json(c.to_json()) == c


def test_coefficients_must_be_finite():
    with pytest.raises(ValueError, match="C"):
        CoefficientSet(1, 1, np.nan, 1, 1, 1, 1, 1)


# --- system matrix ---------------------------------------------------------------

def test_unit_coefficient_rows():
    m_oo, m_ii, m_oi = build_blocks(ONES)
    assert np.array_equal(m_oo[1], [1, 1, 0, 0])
    assert np.array_equal(m_oi[1], [1, 1, 0, 0, -1j, -1j, 0, 0])
    assert np.array_equal(m_oo, m_ii)


@settings(max_examples=30)
@given(st.lists(st.complex_numbers(max_magnitude=100, allow_nan=False, allow_infinity=False), min_size=8, max_size=8))
def test_block_structure(vals):
    M = build_M(CoefficientSet(*vals))
    assert M.shape == (24, 16)
    mask = np.zeros((24, 16), bool)
    mask[:6, :4] = mask[6:12, 4:8] = mask[12:, 8:] = True
    assert np.all(M[~mask] == 0)
    assert np.array_equal(M[:6, :4], M[6:12, 4:8])


def test_row_order():
    assert SIGNAL_ROWS[:6] == (("OOO", "Ig"), ("OOO", "Og"), ("OOO", "OO_I"),
                               ("OOI", "II_O"), ("OOI", "Ig"), ("OOI", "Og"))
    assert [t for t, _ in SIGNAL_ROWS[12::3]] == ["OIO", "OII", "IOO", "IOI"]


def test_identity_s_has_eight_entries():
    S = assemble_S(normalized_for([ProcessMatrix.identity()]), 0)
    assert S.shape == (24,)
    assert np.count_nonzero(S) == 8


def test_zero_signals_give_zero_s():
    S = assemble_S(normalized_for([ProcessMatrix.zero()] * 2))
    assert S.shape == (2, 24) and not S.any()


def test_s_at_population_time_constant():
    # 212 fs is not on the default grid
    norm = normalized_for(model_chi(KineticsModel(), [0.0, 212.0]), times=np.array([0.0, 212.0]))
    S = assemble_S(norm, 1)
    e = np.exp(-1.0)
    assert S[SIGNAL_ROWS.index(("OOO", "Og"))] == pytest.approx(1.21 * e + 0.85 * (1 - e), abs=1e-14)


def test_default_system_reproduces_signals(reference_normalized, reference_chi, M_default):
    X = np.stack([c.parameters for c in reference_chi])
    assert np.abs(X @ M_default.T - assemble_S(reference_normalized)).max() < 1e-14


# --- condition number ------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_condition_number_matches_mpmath(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(5, 4)) + 1j * rng.normal(size=(5, 4))
    mpmath.mp.dps = 30
    s = mpmath.svd_c(mpmath.matrix(A.tolist()), compute_uv=False)
    sv = [float(abs(v)) for v in s]
    assert condition_number(A) == pytest.approx(max(sv) / min(sv), rel=1e-10)


def test_condition_number_of_orthogonal_columns():
    # columns with norms 1, 2, 3, 4
    A = np.zeros((5, 4))
    A[np.arange(4), np.arange(4)] = [1.0, 2.0, 3.0, 4.0]
    assert condition_number(A) == pytest.approx(4.0, rel=1e-15)


@given(st.floats(1e-6, 1e6), st.floats(0, 2 * np.pi))
def test_condition_number_is_scale_invariant(scale, phase):
    M = build_M(CoefficientSet(1.21, 0.85, 0.75, 1, 0.8, -0.055, 0.8, -0.8))
    assert condition_number(M * scale * np.exp(1j * phase)) == pytest.approx(condition_number(M), rel=1e-10)


def test_singular_matrix_is_infinite():
    assert condition_number(np.array([[1.0, 1.0], [1.0, 1.0]])) == float("inf")


def test_zero_matrix_is_error():
    with pytest.raises(ValueError):
        condition_number(np.zeros((3, 2)))


def test_default_condition_number(M_default):
    assert condition_number(M_default) == pytest.approx(9.04, abs=0.01)


def test_rank_deficient_system_is_rejected():
    M = build_M(CoefficientSet(1, 1, 1, 1, 0, 0, 0, 0))
    with pytest.raises(RankDeficientError):
        solve_constrained(M, np.zeros(24))


# --- constrained solve ------------------------------------------------------------

def test_noiseless_round_trip(dipoles, pulses):
    rng = np.random.default_rng(5)
    chi = random_trajectory(STANDARD_GRID, rng)
    result = invert(normalized_for(chi, dipoles, pulses))
    err = np.abs(np.stack([c.parameters for c in chi]) - np.stack([c.parameters for c in result.chi])).max()
    assert err <= 1e-6
    assert all(s.method == "lstsq" for s in result.solutions)


def test_zero_s_gives_zero_process(M_default):
    (sol,) = solve_constrained(M_default, np.zeros(24))
    assert sol.chi == ProcessMatrix.zero()
    assert sol.objective == 0.0


def test_infeasible_population_is_clipped(M_default):
    target = ProcessMatrix.from_entries(OOOO=1.05, IIII=1.0, OIOI=1.0)
    (sol,) = solve_constrained(M_default, M_default @ target.parameters)
    assert sol.chi["OOOO"].real <= 1 + 1e-9
    assert sol.chi.population_sums().max() <= 1 + 1e-9
    assert sol.objective > 0
    assert sol.method == "admm" and sol.converged


def test_positivity_only_mode_keeps_excess_population(M_default):
    target = ProcessMatrix.from_entries(OOOO=1.05, IIII=1.0, OIOI=1.0)
    (sol,) = solve_constrained(M_default, M_default @ target.parameters, trace_constraint=False)
    assert np.allclose(sol.x, target.parameters, atol=1e-9)
    assert sol.method == "lstsq"


def noisy_problems(M, n, sigma, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        x = random_process(rng).parameters
        S = M @ x
        out.append(S + sigma * (rng.normal(size=24) + 1j * rng.normal(size=24)))
    return np.stack(out)


@pytest.mark.parametrize("trace_constraint", [True, False])
def test_matches_sdp_oracle(M_default, trace_constraint):
    S = noisy_problems(M_default, 12, 0.2, 42)
    sols = solve_constrained(M_default, S, trace_constraint=trace_constraint)
    assert any(s.method == "admm" for s in sols)
    for s_row, sol in zip(S, sols):
        x_ref, f_ref = oracle_solve(M_default, s_row, trace_constraint)
        assert sol.objective <= f_ref + 1e-8
        assert np.abs(sol.x - x_ref).max() <= 1e-4


def test_optimality_certificate(M_default):
    rng = np.random.default_rng(9)
    S = noisy_problems(M_default, 5, 0.3, 3)
    for s_row, sol in zip(S, solve_constrained(M_default, S)):
        f0 = objective(M_default, s_row, sol.x)
        worst = 0.0
        for _ in range(1000):
            # feasible directions: toward a random point of the convex feasible set
            d = random_process(rng).parameters - sol.x
            d *= 1e-4 / np.linalg.norm(d)
            assert is_feasible(sol.x + d)
            worst = max(worst, f0 - objective(M_default, s_row, sol.x + d))
        assert worst <= 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_solutions_are_feasible(seed, sigma):
    M = build_M(CoefficientSet(1.21, 0.85, 0.75, 1, 0.8, -0.055, 0.8, -0.8))
    for sol in solve_constrained(M, noisy_problems(M, 4, sigma, seed)):
        assert sol.choi_eigenvalues.min() >= -1e-9
        assert sol.chi.population_sums().max() <= 1 + 1e-9
        assert sol.leakage_eigenvalues.min() >= -1e-9


def test_monotone_noise_response(reference_signals, pulses, dipoles):
    levels = [0.0, 0.002, 0.01, 0.03, 0.1]
    means = []
    for sigma in levels:
        obj = [np.mean([s.objective for s in invert(normalize_signal(add_noise(reference_signals, sigma, seed),
                                                                     pulses, dipoles)).solutions])
               for seed in range(20)]
        means.append(np.mean(obj))
    assert all(b >= a for a, b in zip(means, means[1:]))


def test_nonsecular_entries_stay_small(reference_normalized):
    worst = max(abs(c[e]) for c in invert(reference_normalized).chi for e in NONSECULAR)
    assert worst < 0.01


def test_nonsecular_entries_under_noise(reference_signals, pulses, dipoles):
    # noise leaks into the nonsecular columns linearly, about 4.4 per unit relative noise
    for seed in range(5):
        result = invert(normalize_signal(add_noise(reference_signals, 0.01, seed), pulses, dipoles))
        worst = max(abs(c[e]) for c in result.chi for e in NONSECULAR)
        assert worst < 0.08


def test_strict_mode_raises_with_best(M_default):
    S = noisy_problems(M_default, 3, 0.3, 1)
    with pytest.raises(ConvergenceError) as info:
        solve_constrained(M_default, S, max_iter=2, strict=True)
    assert len(info.value.best) == 3
    sols = solve_constrained(M_default, S, max_iter=2)
    assert not all(s.converged for s in sols)
    assert all(is_feasible(s.x, 1e-12) for s in sols)


def test_shape_validation(M_default):
    with pytest.raises(ValueError, match="24"):
        solve_constrained(M_default, np.zeros(23))


def test_reference_initial_condition(reference_normalized):
    result = invert(reference_normalized)
    assert np.abs(result.chi[0].parameters - ProcessMatrix.identity().parameters).max() <= 1e-6


def test_reference_model_projection(reference_normalized, reference_chi):
    result = invert(reference_normalized)
    projected = [k for k, s in enumerate(result.solutions) if s.method == "admm"]
    # the model leaves the CP set late in the trajectory
    assert projected and min(T[projected]) > 390.0
    err = np.abs(np.stack([c.parameters for c in reference_chi]) - np.stack([c.parameters for c in result.chi]))
    assert err.max() < 1e-3


def test_result_serialization(reference_normalized):
    result = invert(reference_normalized)
    d = result.to_dict()
    assert d["trace_constraint"] is True and len(d["solutions"]) == 33
    assert d["solver"]["relaxation"] == 1.7 and d["solver"]["tol"] == 1e-9
    assert set(d["coefficients"]) == set(COEFFICIENT_NAMES)
    assert "F and H" in d["sign_convention"]
    rows = list(chi_rows(result.waiting_times[:1], result.chi[:1]))
    assert len(rows) == 16 and rows[0][1].startswith("chi_")


def test_solver_options_defaults():
    o = SolverOptions()
    assert (o.tol, o.max_iter, o.relaxation, o.trace_constraint) == (1e-9, 50_000, 1.7, True)
