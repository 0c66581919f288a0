import csv
import json
import shutil

import numpy as np
import pytest

from tgqpt.cli import EXIT_IO, EXIT_OK, EXIT_SOLVER, EXIT_VALIDATION, main
from tgqpt.core import REFERENCE_SCHEME, ProcessMatrix
from tgqpt.forward import trajectory_from_dict
from tgqpt.kinetics import fit_trajectory
from tgqpt.spectra import TRIADS, TGSpectrum, peak_frequency, read_spectra, spectrum_filename, write_spectra


def run(*argv):
    return main([str(a) for a in argv])


def read_chi_csv(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return rows


def load_inverted(path):
    doc = json.loads(path.read_text())
    names = doc["parameter_names"]
    return [np.array([s["X"][n] for n in names]) for s in doc["solutions"]]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    sim, red, inv = root / "sim", root / "red", root / "inv"
    assert run("simulate", "--out", sim, "--seed", 3) == EXIT_OK
    assert run("reduce", "--in", sim, "--out", red) == EXIT_OK
    assert run("invert", "--signals", red / "signals.csv", "--out", inv) == EXIT_OK
    return root


# --- simulate ------------------------------------------------------------------

def test_simulate_outputs(pipeline):
    sim = pipeline / "sim"
    for triad in TRIADS:
        assert (sim / spectrum_filename(triad)).exists()
    assert (sim / "manifest.json").exists() and (sim / "chi_true.json").exists()
    spectra = read_spectra(sim)
    assert abs(peak_frequency(spectra["III"]) - 16635.0) <= spectra["III"].spacing
    assert len(spectra["III"].waiting_times) == 33


def test_simulate_is_deterministic(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"noise": 0.01}))
    for name in ("a", "b"):
        assert run("simulate", "--config", cfg, "--seed", 11, "--out", tmp_path / name) == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 10
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_pipeline_is_deterministic(tmp_path, pipeline):
    red, inv = tmp_path / "red", tmp_path / "inv"
    assert run("reduce", "--in", pipeline / "sim", "--out", red) == EXIT_OK
    assert run("invert", "--signals", red / "signals.csv", "--out", inv) == EXIT_OK
    for d, ref in ((red, pipeline / "red"), (inv, pipeline / "inv")):
        for f in d.iterdir():
            assert f.read_bytes() == (ref / f.name).read_bytes()


def test_simulate_nonsecular_peak(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"kinetics": {"nonsecular_amplitude": 0.2}}))
    assert run("simulate", "--config", cfg, "--out", tmp_path / "ns") == EXIT_OK
    ooo = read_spectra(tmp_path / "ns")["OOO"]
    axis = ooo.frequency_axis
    late = np.abs(ooo.values[-1])
    near = np.abs(axis - REFERENCE_SCHEME.w_Ig) < 100
    assert late[near].max() > 0.05 * late.max()
    assert abs(axis[near][np.argmax(late[near])] - REFERENCE_SCHEME.w_Ig) <= 5


def test_simulate_bad_field(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"kinetics": {"tau_OO": -3}}))
    assert run("simulate", "--config", cfg, "--out", tmp_path / "x") == EXIT_VALIDATION
    assert "tau_OO" in capsys.readouterr().err


# --- reduce ------------------------------------------------------------------------

def test_reduce_outputs(pipeline):
    red = pipeline / "red"
    for name in ("signals.csv", "scheme.json", "level_assignment.json", "contribution_table.csv", "manifest.json"):
        assert (red / name).exists()
    fractions = {}
    with open(red / "contribution_table.csv") as fh:
        for r in csv.DictReader(fh):
            fractions.setdefault(r["triad"], []).append(float(r["fraction"]))
    for triad in ("OOO", "III", "OOI", "IIO", "OIO", "OII"):
        assert max(fractions[triad]) > 0.97


def test_reduce_zero_spectra_flags_rows(tmp_path, capsys):
    axis = np.arange(15700.0, 18000.0, 5.0)
    zero = {t: TGSpectrum(t, axis, np.array([0.0, 10.0]), np.zeros((2, axis.size))) for t in TRIADS}
    write_spectra(zero, tmp_path / "z")
    scheme = tmp_path / "scheme.json"
    scheme.write_text(json.dumps(REFERENCE_SCHEME.to_dict()))
    assert run("reduce", "--in", tmp_path / "z", "--out", tmp_path / "r", "--scheme", scheme) == EXIT_OK
    assert "undefined contribution rows" in capsys.readouterr().err
    assert "nan" in (tmp_path / "r" / "contribution_table.csv").read_text()


def test_reduce_zero_spectra_without_scheme(tmp_path, capsys):
    axis = np.arange(15700.0, 18000.0, 5.0)
    zero = {t: TGSpectrum(t, axis, np.array([0.0]), np.zeros((1, axis.size))) for t in TRIADS}
    write_spectra(zero, tmp_path / "z")
    assert run("reduce", "--in", tmp_path / "z", "--out", tmp_path / "r") == EXIT_VALIDATION


def test_reduce_truncated_file(tmp_path, pipeline, capsys):
    shutil.copytree(pipeline / "sim", tmp_path / "sim")
    path = tmp_path / "sim" / spectrum_filename("IOI")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:20]) + "\n")
    assert run("reduce", "--in", tmp_path / "sim", "--out", tmp_path / "r") == EXIT_VALIDATION
    assert "line 21" in capsys.readouterr().err


def test_reduce_cross_check_failure_names_spectrum(tmp_path, pipeline, capsys):
    shutil.copytree(pipeline / "sim", tmp_path / "sim")
    spectra = read_spectra(tmp_path / "sim")
    ioi = spectra["IOI"]
    shift = np.roll(ioi.values, -60, axis=1)  # 300 cm^-1 down
    spectra["IOI"] = TGSpectrum("IOI", ioi.frequency_axis, ioi.waiting_times, shift)
    write_spectra(spectra, tmp_path / "sim")
    assert run("reduce", "--in", tmp_path / "sim", "--out", tmp_path / "r") == EXIT_VALIDATION
    assert "IOI" in capsys.readouterr().err


def test_reduce_missing_directory(tmp_path):
    assert run("reduce", "--in", tmp_path / "nope", "--out", tmp_path / "r") == EXIT_IO


# --- invert ------------------------------------------------------------------------

def test_invert_round_trip(pipeline):
    _, truth = trajectory_from_dict(json.loads((pipeline / "sim" / "chi_true.json").read_text()))
    got = load_inverted(pipeline / "inv" / "inversion.json")
    err = max(np.abs(g - t.parameters).max() for g, t in zip(got, truth) if t.is_completely_positive(0))
    assert err <= 1e-6


def test_invert_outputs(pipeline):
    inv = pipeline / "inv"
    doc = json.loads((inv / "inversion.json").read_text())
    assert np.isfinite(doc["condition_number"]) and doc["condition_number"] < 100
    assert len(doc["solutions"]) == 33
    rows = read_chi_csv(inv / "chi.csv")
    assert len(rows) == 33 * 16 and rows[0]["entry"].startswith("chi_")
    assert (inv / "normalized_signals.csv").exists()


def test_invert_noisy_is_feasible(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"noise": 0.01}))
    assert run("simulate", "--config", cfg, "--seed", 5, "--out", tmp_path / "s") == EXIT_OK
    assert run("reduce", "--in", tmp_path / "s", "--out", tmp_path / "r") == EXIT_OK
    assert run("invert", "--signals", tmp_path / "r" / "signals.csv", "--out", tmp_path / "i") == EXIT_OK
    doc = json.loads((tmp_path / "i" / "inversion.json").read_text())
    for s in doc["solutions"]:
        assert min(s["choi_eigenvalues"]) >= -1e-9
        assert max(s["population_sums"]) <= 1 + 1e-9
        assert s["objective"] >= 0


def test_invert_missing_series(tmp_path, pipeline, capsys):
    lines = (pipeline / "red" / "signals.csv").read_text().splitlines()
    kept = [ln for ln in lines if "OII,Og" not in ln and "OII:Og" not in ln]
    assert len(kept) < len(lines)
    (tmp_path / "signals.csv").write_text("\n".join(kept) + "\n")
    assert run("invert", "--signals", tmp_path / "signals.csv", "--out", tmp_path / "i") == EXIT_VALIDATION
    assert "OII:Og" in capsys.readouterr().err


def test_invert_strict_non_convergence(tmp_path, pipeline):
    # the reference model needs the constrained solver late in T; two iterations cannot converge
    code = run("invert", "--signals", pipeline / "red" / "signals.csv", "--out", tmp_path / "i",
               "--max-iter", 2, "--strict")
    assert code == EXIT_SOLVER


def test_invert_positivity_only(tmp_path, pipeline):
    assert run("invert", "--signals", pipeline / "red" / "signals.csv", "--out", tmp_path / "i",
               "--trace-constraint", "off") == EXIT_OK
    doc = json.loads((tmp_path / "i" / "inversion.json").read_text())
    assert doc["trace_constraint"] is False


def test_invert_coefficient_file(tmp_path, pipeline):
    doc = json.loads((pipeline / "inv" / "inversion.json").read_text())
    (tmp_path / "c.json").write_text(json.dumps({"coefficients": doc["coefficients"]}))
    assert run("invert", "--signals", pipeline / "red" / "signals.csv", "--coeffs", tmp_path / "c.json",
               "--out", tmp_path / "i") == EXIT_OK
    again = json.loads((tmp_path / "i" / "inversion.json").read_text())
    assert again["solutions"] == doc["solutions"]


# --- scan, fit, report -------------------------------------------------------------

def test_scan_tables(tmp_path, pipeline):
    out = tmp_path / "scan"
    assert run("scan", "--baseline", pipeline / "inv", "--factors=-1.6,1,4", "--coefficients", "A,F",
               "--jobs", 1, "--out", out) == EXIT_OK
    lines = (out / "error1.csv").read_text().splitlines()
    assert lines[0] == "coefficient,-1.6,1.0,4.0"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["A", "F"]
    assert all(ln.split(",")[2] == "0.00" for ln in lines[1:])
    doc = json.loads((out / "scan.json").read_text())
    assert doc["summary"]["failed_cells"] == 0


def test_fit_recovers_generator(pipeline, capsys):
    assert run("fit", "--chi", pipeline / "inv" / "inversion.json") == EXIT_OK
    assert "chi_OIOI" in capsys.readouterr().out
    rows = {r["process"]: r for r in json.loads((pipeline / "inv" / "kinetics.json").read_text())["rows"]}
    oo = rows["chi_OOOO"]
    assert abs(oo["params"]["tau"] - 212.0) <= max(oo["ci95"]["tau"], 0.02 * 212)
    assert abs(oo["params"]["beta"] - 3.3) <= max(oo["ci95"]["beta"], 0.02 * 3.3)
    oi = rows["chi_OIOI"]
    assert abs(oi["period"] - 70.0) <= max(oi["period_ci95"], 0.02 * 70)


def test_fit_on_ground_truth(pipeline, tmp_path):
    assert run("fit", "--chi", pipeline / "sim" / "chi_true.json", "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "kinetics.txt").read_text().startswith("process")


def test_report_formats(pipeline, tmp_path, capsys):
    assert run("report", "--in", pipeline / "inv") == EXIT_OK
    text = capsys.readouterr().out
    assert "condition number of M" in text and "trace constraint: on" in text
    assert run("report", "--in", pipeline / "inv", "--format", "csv", "--out", tmp_path / "r.csv") == EXIT_OK
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "T_fs,entry,re,im" and len(lines) == 1 + 16 * 33
    assert run("report", "--in", pipeline / "inv", "--format", "json", "--out", tmp_path / "r.json") == EXIT_OK
    assert json.loads((tmp_path / "r.json").read_text())["inversion"]["solutions"]


def test_report_empty_inversion(tmp_path, pipeline):
    doc = json.loads((pipeline / "inv" / "inversion.json").read_text())
    doc["solutions"] = []
    (tmp_path / "inversion.json").write_text(json.dumps(doc))
    assert run("report", "--in", tmp_path) == EXIT_VALIDATION


def test_report_missing_input(tmp_path):
    assert run("report", "--in", tmp_path) == EXIT_IO


def test_pipeline_chi_is_physical(pipeline):
    for x in load_inverted(pipeline / "inv" / "inversion.json"):
        chi = ProcessMatrix(x)
        assert chi.choi_eigenvalues().min() >= -1e-9


def test_kinetics_pipeline_closure(pipeline):
    times, truth = trajectory_from_dict(json.loads((pipeline / "sim" / "chi_true.json").read_text()))
    fitted = fit_trajectory(times, [ProcessMatrix(x) for x in load_inverted(pipeline / "inv" / "inversion.json")])
    rows = {r["process"]: r for r in fitted.rows}
    assert rows["chi_IIII"]["fit"] == "constant"
    assert rows["chi_OIOI"]["params"]["tau"] == pytest.approx(200.0, rel=0.02)
