from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from shadowgrow.cli import TOL_ENV, default_tol, fit_slope, main

from conftest import FIELDS

LINEAR = str(FIELDS / "linear.ode")


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _jsonl(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def _error_record(err):
    lines = [ln for ln in err.splitlines() if ln.strip()]
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture
def traj(tmp_path, capsys):
    path = tmp_path / "traj.csv"
    code, _, _ = _run(capsys, "pseudo", "gen", LINEAR, "--x0", "0.5", "--length", 12,
                      "--kind", "nonuniform", "--delta", "1e-3", "--n", 2, "--seed", 1, "-o", path)
    assert code == 0
    return path


def _tamper(src, dst, k, shift=-0.01):
    """Move sample k outward (1D ball) keeping x and log r consistent."""
    lines = src.read_text().splitlines()
    rows = [i for i, ln in enumerate(lines) if ln and not ln.startswith("#") and ln[0].isdigit()]
    t, x, lr = lines[rows[k]].split(",")
    lr = float(lr) + shift
    lines[rows[k]] = f"{t},{1 - math.exp(lr)!r},{lr!r}"
    dst.write_text("\n".join(lines) + "\n")


def test_exponents_linear(capsys):
    code, out, _ = _run(capsys, "exponents", LINEAR, "--jsonl")
    assert code == 0
    recs = _jsonl(out)
    assert len(recs) == 2
    for r in recs:
        assert r["mu"] == pytest.approx(-2, abs=1e-8)
        assert r["bound"] == "m>1"
        assert r["m_bound"] == pytest.approx(1, abs=1e-8)


def test_gen_then_check_holds(traj, capsys):
    code, out, _ = _run(capsys, "pseudo", "check", "--kind", "nonuniform", traj)
    assert code == 0
    (rec,) = _jsonl(out)
    assert rec["holds"] is True and rec["kind"] == "nonuniform"


def test_check_with_explicit_field_and_kv(traj, capsys):
    code, out, _ = _run(capsys, "pseudo", "check", LINEAR, traj, "--format", "kv")
    assert code == 0
    assert "holds=true" in out.replace("True", "true")


def test_shadow_find_valid(traj, capsys):
    code, out, _ = _run(capsys, "shadow", "find", "--m", 1.5, traj)
    assert code == 0
    recs = _jsonl(out)
    head, rows = recs[0], recs[1:]
    assert head["record"] == "shadow" and head["valid"] is True
    assert [r["k"] for r in rows] == list(range(12))
    for r in rows:
        assert r["error"] <= r["allowance"]
        assert r["margin"] == pytest.approx(r["allowance"] - r["error"], abs=1e-15)


def test_shadow_find_csv(traj, capsys):
    code, out, _ = _run(capsys, "shadow", "find", "--m", 1.5, traj, "--format", "csv")
    assert code == 0
    body = [ln for ln in out.splitlines() if ln and not ln.startswith("#")]
    rows = list(csv.DictReader(body))
    assert {"k", "error", "allowance", "margin"} <= set(rows[0])


def test_tampered_rejected(traj, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    _tamper(traj, bad, 4)
    code, out, err = _run(capsys, "shadow", "find", "--m", 1.5, bad)
    assert code == 1
    rec = _error_record(err)
    assert rec["error"] == "domain"
    assert rec["worst_margin"] < 0
    assert rec["worst_k"] in (3, 4)

    code, _, err = _run(capsys, "pseudo", "check", bad)
    assert code == 1
    assert _error_record(err)["worst_margin"] < 0


def test_unknown_subcommand(capsys):
    code, out, err = _run(capsys, "frobnicate")
    assert code == 2
    assert _error_record(err)["error"] == "usage"
    assert out == ""


def test_missing_subcommand(capsys):
    code, _, err = _run(capsys)
    assert code == 2
    _error_record(err)


def test_unreadable_field(tmp_path, capsys):
    code, _, err = _run(capsys, "exponents", tmp_path / "nope.ode")
    assert code == 1
    rec = _error_record(err)
    assert rec["error"] == "domain" and "unreadable" in rec["message"]


def test_malformed_field(tmp_path, capsys):
    p = tmp_path / "bad.ode"
    p.write_text("dim 1\nx0' = x0 +* 2\n")
    code, _, err = _run(capsys, "exponents", p)
    assert code == 1
    _error_record(err)


@pytest.mark.parametrize("argv", [
    ["shadow", "find", "--m", "1.5", "--level", "0", "TRAJ"],
    ["shadow", "find", "--m", "1.5", "--depth", "-3", "TRAJ"],
    ["pseudo", "gen", LINEAR, "--x0", "0.5", "--length", "5", "--kind", "standard", "--delta", "-1"],
])
def test_out_of_range_parameters(argv, traj, capsys):
    argv = [str(traj) if a == "TRAJ" else a for a in argv]
    code, out, err = _run(capsys, *argv)
    assert code == 2
    assert _error_record(err)["error"] == "usage"
    assert out == ""


def test_weighted_law_as_pointwise_kind_is_usage_error(tmp_path, capsys):
    path = tmp_path / "w.csv"
    code, _, _ = _run(capsys, "pseudo", "gen", LINEAR, "--x0", "0.5", "--length", 8, "--kind",
                      "weighted", "--delta", "1e-4", "--C", 3, "--seed", 2, "-o", path)
    assert code == 0
    code, _, err = _run(capsys, "pseudo", "check", "--kind", "nonuniform", path)
    assert code == 2
    _error_record(err)


def test_deterministic_output(tmp_path, capsys):
    outs = []
    for i in range(2):
        p = tmp_path / f"d{i}.csv"
        assert _run(capsys, "pseudo", "gen", LINEAR, "--x0", "0.3", "--length", 10, "--kind",
                    "nonuniform", "--n", 2, "--delta", "1e-4", "--seed", 7, "-o", p)[0] == 0
        s = tmp_path / f"s{i}.jsonl"
        assert _run(capsys, "shadow", "find", "--m", 1.5, p, "-o", s)[0] == 0
        outs.append((p.read_bytes(), s.read_bytes()))
    assert outs[0] == outs[1]


def test_compactify_linear(capsys):
    code, out, _ = _run(capsys, "compactify", LINEAR, "--format", "jsonl")
    assert code == 0
    recs = _jsonl(out)
    rows = [r for r in recs if "Xbar_0" in r]
    assert rows
    for r in rows:
        # boundary field of x' = x vanishes on S^0
        assert abs(r["Xbar_0"]) < 1e-12


def test_integrate_classifies(capsys):
    code, out, _ = _run(capsys, "integrate", str(FIELDS / "riccati.ode"), "--x0", "1",
                        "--t1", 3, "--format", "jsonl")
    assert code == 0
    last = _jsonl(out)[-1]
    assert last["record"] == "classification"
    assert last["tag"] == "blow_up"
    assert last["escape_time"] == pytest.approx(1.0, abs=1e-6)


def test_tol_env(monkeypatch):
    monkeypatch.delenv(TOL_ENV, raising=False)
    base = default_tol()
    monkeypatch.setenv(TOL_ENV, "1e-7")
    assert default_tol() == 1e-7
    assert base != 1e-7
    monkeypatch.setenv(TOL_ENV, "garbage")
    with pytest.raises(Exception):
        default_tol()


def test_bad_tol_env_exits_2(monkeypatch, capsys):
    monkeypatch.setenv(TOL_ENV, "-1")
    code, _, err = _run(capsys, "integrate", LINEAR, "--x0", "1", "--t1", 1)
    assert code == 2
    _error_record(err)


def test_report_empty(tmp_path, capsys):
    out_dir = tmp_path / "rep"
    code, _, err = _run(capsys, "report", "-o", out_dir)
    assert code == 0 and err == ""
    text = (out_dir / "summary.csv").read_text().splitlines()
    assert len(text) <= 1


def test_report_transfer_slopes(tmp_path, capsys):
    out_dir = tmp_path / "rep"
    assert _run(capsys, "report", "--transfer", "-o", out_dir)[0] == 0
    fit = json.loads((out_dir / "transfer.fit.json").read_text())
    assert fit["expand_slope"] == pytest.approx(-1.5, abs=0.02)
    assert fit["contract_slope"] == pytest.approx(-3.0, abs=0.05)


def test_report_single_run(traj, tmp_path, capsys):
    res = tmp_path / "run.jsonl"
    assert _run(capsys, "shadow", "find", "--m", 1.5, traj, "-o", res)[0] == 0
    out_dir = tmp_path / "rep"
    assert _run(capsys, "report", res, "-o", out_dir)[0] == 0
    summary = list(csv.DictReader((out_dir / "summary.csv").read_text().splitlines()))
    assert len(summary) == 1
    assert (out_dir / "run_error_vs_r.csv").exists()
    fit = json.loads((out_dir / "run_error_vs_r.fit.json").read_text())
    assert math.isfinite(fit["slope"]) and fit["halfwidth"] >= 0


def test_report_schema_mismatch(tmp_path, capsys):
    p = tmp_path / "junk.jsonl"
    p.write_text('{"record": "nonsense"}\n')
    code, _, err = _run(capsys, "report", p, "-o", tmp_path / "rep")
    assert code == 1
    _error_record(err)


def test_fit_slope_exact_line():
    x = np.linspace(0, 1, 9)
    s, h = fit_slope(x, 3 * x - 1)
    assert s == pytest.approx(3) and h == pytest.approx(0, abs=1e-12)
