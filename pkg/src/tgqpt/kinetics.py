"""Stretched-exponential and damped-oscillation fits of chi(T) series."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, stats

from .core import NONSECULAR_ENTRIES, ProcessMatrix

MODELS = ("stretched_decay", "complement_rise", "damped_oscillation", "constant")

TAU_STARTS = (50.0, 100.0, 200.0, 400.0)
BETA_STARTS = (1.0, 2.0, 3.0)
BETA_BOUNDS = (0.5, 5.0)
MIN_POINTS = 8
PEAK_TO_MEAN = 5.0

_LSQ_TOL = dict(ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=2000)


class FitError(RuntimeError):
    """All starts failed; ``diagnostics`` lists what each attempt returned."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


@dataclass
class FitResult:
    model: str
    params: dict
    covariance: np.ndarray
    residual_rms: float
    ci95: dict = field(default_factory=dict)
    n_points: int = 0
    rss: float = 0.0
    starts: int = 0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown fit model {self.model!r}")

    @property
    def period(self) -> float | None:
        """``2 pi / omega`` for oscillation fits, in fs."""
        w = self.params.get("omega")
        return None if w is None else 2 * np.pi / w

    @property
    def period_ci95(self) -> float | None:
        w = self.params.get("omega")
        if w is None:
            return None
        return 2 * np.pi / w ** 2 * self.ci95["omega"]

    def predict(self, t):
        t = np.asarray(t, dtype=float)
        p = self.params
        if self.model == "constant":
            return np.full(t.shape, p["c"])
        decay = np.exp(-(t / p["tau"]) ** p["beta"])
        if self.model == "stretched_decay":
            return decay
        if self.model == "complement_rise":
            return 1.0 - decay
        return np.exp(-1j * p["omega"] * t) * decay

    def to_dict(self) -> dict:
        out = {
            "model": self.model,
            "params": dict(self.params),
            "ci95": dict(self.ci95),
            "covariance": self.covariance.tolist(),
            "residual_rms": self.residual_rms,
            "n_points": self.n_points,
        }
        if self.period is not None:
            out["period"] = self.period
            out["period_ci95"] = self.period_ci95
        return out


# ---------------------------------------------------------------------------
# residual models with analytic Jacobians
# ---------------------------------------------------------------------------

def _decay_and_grads(t, tau, beta):
    """``d = exp(-(t/tau)^beta)`` and its partial derivatives in tau and beta."""
    u = np.where(t > 0, t / tau, 1.0)
    ub = np.where(t > 0, u ** beta, 0.0)
    d = np.exp(-ub)
    d_tau = d * ub * beta / tau
    d_beta = -d * ub * np.log(u)
    return d, d_tau, d_beta


def _population_problem(form, t, y, beta_fixed):
    sign = 1.0 if form == "stretched_decay" else -1.0
    offset = 0.0 if form == "stretched_decay" else 1.0

    def unpack(p):
        return (p[0], beta_fixed) if beta_fixed is not None else (p[0], p[1])

    def fun(p):
        d = _decay_and_grads(t, *unpack(p))[0]
        return offset + sign * d - y

    def jac(p):
        _, d_tau, d_beta = _decay_and_grads(t, *unpack(p))
        cols = [sign * d_tau] if beta_fixed is not None else [sign * d_tau, sign * d_beta]
        return np.column_stack(cols)

    return fun, jac


def _coherence_problem(t, z, beta_fixed):
    def unpack(p):
        return p[0], p[1], (beta_fixed if beta_fixed is not None else p[2])

    def fun(p):
        w, tau, beta = unpack(p)
        r = np.exp(-1j * w * t) * _decay_and_grads(t, tau, beta)[0] - z
        return np.concatenate([r.real, r.imag])

    def jac(p):
        w, tau, beta = unpack(p)
        d, d_tau, d_beta = _decay_and_grads(t, tau, beta)
        ph = np.exp(-1j * w * t)
        cols = [-1j * t * ph * d, ph * d_tau]
        if beta_fixed is None:
            cols.append(ph * d_beta)
        j = np.column_stack(cols)
        return np.vstack([j.real, j.imag])

    return fun, jac


def _covariance(jac: np.ndarray, rss: float, n_obs: int) -> tuple[np.ndarray, float]:
    k = jac.shape[1]
    dof = max(n_obs - k, 1)
    cov = np.linalg.pinv(jac.T @ jac) * (rss / dof)
    cov = 0.5 * (cov + cov.T)
    return cov, float(stats.t.ppf(0.975, dof))


def _multistart(fun, jac, starts, lower, upper):
    best, tried = None, []
    for x0 in starts:
        x0 = np.clip(x0, lower, upper)
        try:
            res = optimize.least_squares(fun, x0, jac=jac, bounds=(lower, upper), method="trf", **_LSQ_TOL)
        except (ValueError, np.linalg.LinAlgError) as exc:
            tried.append({"start": list(map(float, x0)), "error": str(exc)})
            continue
        cost = float(res.fun @ res.fun)
        tried.append({"start": list(map(float, x0)), "rss": cost, "status": int(res.status)})
        if np.isfinite(cost) and res.status > 0 and (best is None or cost < best[1]):
            best = (res, cost)
    if best is None:
        raise FitError("every start of the nonlinear fit failed", tried)
    return best[0], best[1], len(tried)


def _check_series(times, values):
    t = np.asarray(times, dtype=float)
    v = np.asarray(values)
    if t.ndim != 1 or v.shape != t.shape:
        raise ValueError("times and values must be 1-D arrays of equal length")
    if t.size < MIN_POINTS:
        raise ValueError(f"need at least {MIN_POINTS} waiting times, got {t.size}")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
        raise ValueError("series contains non-finite values")
    return t, v


def fit_constant(times, values) -> FitResult:
    t, y = _check_series(times, values)
    y = np.real(y).astype(float)
    c = float(y.mean())
    rss = float(((y - c) ** 2).sum())
    cov, tq = _covariance(np.ones((t.size, 1)), rss, t.size)
    return FitResult("constant", {"c": c}, cov, float(np.sqrt(rss / t.size)),
                     {"c": tq * float(np.sqrt(cov[0, 0]))}, t.size, rss, 1)


def fit_population(times, values, form: str = "stretched_decay", beta: float | None = None,
                   allow_constant: bool = True) -> FitResult:
    """Fit ``exp(-(T/tau)^beta)`` (or one minus it) to a real population series.

    Multistart least squares over the grid ``tau x beta`` of starting points
    with ``beta`` bounded to ``[0.5, 5]``.  Passing ``beta`` fixes the
    stretching exponent.  When ``allow_constant`` is set, a flat model is
    returned instead if it explains the series at least as well by the
    Akaike criterion.
    """
    if form not in ("stretched_decay", "complement_rise"):
        raise ValueError(f"population form must be stretched_decay or complement_rise, got {form!r}")
    t, y = _check_series(times, values)
    if np.iscomplexobj(y):
        if np.abs(y.imag).max() > 1e-9 * max(1.0, np.abs(y).max()):
            raise ValueError("population series must be real")
        y = y.real
    y = y.astype(float)
    if y.min() < -0.1 or y.max() > 1.1:
        raise ValueError("population values must lie in [-0.1, 1.1]")

    fun, jac = _population_problem(form, t, y, beta)
    if beta is None:
        starts = [np.array([a, b]) for a in TAU_STARTS for b in BETA_STARTS]
        lower, upper = np.array([1e-6, BETA_BOUNDS[0]]), np.array([np.inf, BETA_BOUNDS[1]])
    else:
        starts = [np.array([a]) for a in TAU_STARTS]
        lower, upper = np.array([1e-6]), np.array([np.inf])
    res, rss, n_starts = _multistart(fun, jac, starts, lower, upper)

    names = ["tau", "beta"] if beta is None else ["tau"]
    cov, tq = _covariance(jac(res.x), rss, t.size)
    params = dict(zip(names, map(float, res.x)))
    ci = {n: tq * float(np.sqrt(max(cov[i, i], 0.0))) for i, n in enumerate(names)}
    if beta is not None:
        params["beta"] = float(beta)
        ci["beta"] = 0.0
    fit = FitResult(form, params, cov, float(np.sqrt(rss / t.size)), ci, t.size, rss, n_starts)

    if allow_constant:
        flat = fit_constant(t, y)
        if _prefer_simpler(flat, fit, t.size, len(names)):
            return flat
    return fit


def _prefer_simpler(simple: FitResult, full: FitResult, n: int, k_full: int) -> bool:
    """Akaike comparison with a floor on the residual so exact fits remain comparable."""
    floor = n * 1e-24
    aic = lambda rss, k: n * np.log((rss + floor) / n) + 2 * k
    return aic(simple.rss, 1) <= aic(full.rss, k_full)


def dft_peak(times, series) -> tuple[float, float]:
    """Angular frequency ``w`` maximizing ``|sum_T z(T) exp(+i w T)|`` and the peak-to-mean power ratio.

    A component ``exp(-i w T)`` peaks at positive ``w``.  The scan is over
    ``(-pi/dT, pi/dT]`` with eight-fold zero padding.
    """
    t = np.asarray(times, dtype=float)
    z = np.asarray(series, dtype=complex)
    dt = float(np.min(np.diff(t)))
    n = 8 * t.size
    w = np.linspace(-np.pi / dt, np.pi / dt, n, endpoint=False)
    power = np.abs(np.exp(1j * np.outer(w, t)) @ z) ** 2
    mean = power.mean()
    k = int(np.argmax(power))
    return float(w[k]), float(power[k] / mean) if mean > 0 else 0.0


def fit_coherence(times, values, beta: float | None = None) -> FitResult:
    """Fit ``exp(-i w T) exp(-(T/tau)^beta)`` jointly to the real and imaginary parts."""
    t, z = _check_series(times, values)
    if not np.iscomplexobj(z):
        raise ValueError("coherence fits need a complex series")
    w0, ratio = dft_peak(t, z)
    if not ratio > PEAK_TO_MEAN:
        raise FitError(f"no spectral peak above the noise floor (peak/mean power {ratio:.3g})")

    fun, jac = _coherence_problem(t, z, beta)
    if beta is None:
        starts = [np.array([w0, a, b]) for a in TAU_STARTS for b in BETA_STARTS]
        lower = np.array([-np.inf, 1e-6, BETA_BOUNDS[0]])
        upper = np.array([np.inf, np.inf, BETA_BOUNDS[1]])
    else:
        starts = [np.array([w0, a]) for a in TAU_STARTS]
        lower, upper = np.array([-np.inf, 1e-6]), np.array([np.inf, np.inf])
    res, rss, n_starts = _multistart(fun, jac, starts, lower, upper)

    names = ["omega", "tau", "beta"] if beta is None else ["omega", "tau"]
    cov, tq = _covariance(jac(res.x), rss, 2 * t.size)
    params = dict(zip(names, map(float, res.x)))
    ci = {n: tq * float(np.sqrt(max(cov[i, i], 0.0))) for i, n in enumerate(names)}
    if beta is not None:
        params["beta"] = float(beta)
        ci["beta"] = 0.0
    return FitResult("damped_oscillation", params, cov, float(np.sqrt(rss / t.size)), ci, t.size, rss, n_starts)


# ---------------------------------------------------------------------------
# trajectory report
# ---------------------------------------------------------------------------

@dataclass
class KineticsReport:
    """Summary of the fitted timescales of one reconstructed trajectory."""

    rows: list

    def to_dict(self) -> dict:
        return {"rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'process':<24}{'fit':<20}{'parameters':<72}description"]
        for row in self.rows:
            lines.append(f"{row['process']:<24}{row['fit']:<20}{_format_params(row):<72}{row['description']}")
        return "\n".join(lines) + "\n"


def _format_params(row: Mapping) -> str:
    if "bound" in row:
        return f"max |chi| = {row['bound']:.3g}"
    p, ci = row.get("params", {}), row.get("ci95", {})
    parts = []
    if "period" in row:
        parts.append(f"2pi/omega = {row['period']:.4g} +/- {row['period_ci95']:.2g} fs")
    for name, unit in (("tau", " fs"), ("beta", ""), ("c", "")):
        if name in p:
            parts.append(f"{name} = {p[name]:.4g} +/- {ci.get(name, 0.0):.2g}{unit}")
    return ", ".join(parts)


def fit_trajectory(times: Sequence[float], chi: Sequence[ProcessMatrix]) -> KineticsReport:
    """Fit every fitted channel of a reconstructed trajectory."""
    t = np.asarray(times, dtype=float)
    series = {e: np.array([c[e] for c in chi]) for e in ("OOOO", "IIOO", "IIII", "OOII", "OIOI")}
    rows = []

    def add(process, entry, fit, description):
        row = {"process": process, "entry": entry, "fit": fit.model, "description": description}
        row.update(fit.to_dict())
        rows.append(row)

    add("chi_OOOO", "OOOO", fit_population(t, series["OOOO"].real, "stretched_decay"), "population decay")
    add("chi_IIOO", "IIOO", fit_population(t, series["IIOO"].real, "complement_rise"), "population transfer")
    add("chi_IIII", "IIII", fit_population(t, series["IIII"].real, "stretched_decay"), "population decay")
    add("chi_OOII", "OOII", fit_constant(t, series["OOII"].real), "population transfer")
    add("chi_OIOI", "OIOI", fit_coherence(t, series["OIOI"]), "decoherence")
    bound = max(float(np.abs([c[e] for c in chi]).max()) for e in NONSECULAR_ENTRIES)
    rows.append({"process": "nonsecular", "entry": ",".join(NONSECULAR_ENTRIES), "fit": "bound",
                 "bound": bound, "description": "nonsecular terms"})
    return KineticsReport(rows)
