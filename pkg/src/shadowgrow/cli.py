"""Command-line front end: ``shadowgrow <command> ...``.

Exit status is 0 on success, 1 on domain errors and 2 on usage errors; every
failure writes one JSON error record to stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .compactify import ball_contract_bound, ball_expand_bound, compactified_field, directions, theta
from .flow import FieldFlow, TimeOneMap, classify_growth, integrate
from .hyperbolic import (
    HyperbolicityError,
    admissible_exponents,
    boundary_fixed_points,
    sphere_seeds,
    spectral_profile,
)
from .polyfield import FieldSyntaxError, NotNormalizableError, format_field, parse_field
from .pseudo import KINDS, ErrorLaw, check_pseudo, gen_pseudo, read_pseudo, write_pseudo
from .shadow import _TimeOne, shadow_search_flow, shadow_search_map, weighted_shadow_solve

__all__ = ["main", "RunConfig", "UsageError", "DomainError", "default_tol", "fit_slope"]

TOL_ENV = "SHADOWGROW_TOL"


class UsageError(Exception):
    pass


class DomainError(Exception):
    def __init__(self, message: str, **extra):
        super().__init__(message)
        self.extra = extra


@dataclass(frozen=True)
class RunConfig:
    command: str
    field_path: str | None
    output_path: str | None
    format: str
    params: dict


def default_tol() -> float:
    raw = os.environ.get(TOL_ENV)
    if raw is None:
        return 1e-9
    try:
        tol = float(raw)
    except ValueError:
        raise UsageError(f"{TOL_ENV} must be a number, got {raw!r}") from None
    if not tol > 0:
        raise UsageError(f"{TOL_ENV} must be positive")
    return tol


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.floating, float)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=False)


def _emit(lines: list[str], out: str | None):
    text = "".join(ln + "\n" for ln in lines)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _records(records: list[dict], fmt: str) -> list[str]:
    if fmt == "jsonl":
        return [_dumps(r) for r in records]
    if not records:
        return []
    buf = io.StringIO()
    keys = list(records[0].keys())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in records:
        w.writerow([_jsonable(r.get(k)) for k in keys])
    return buf.getvalue().rstrip("\n").split("\n")


def _kv(rec: dict) -> str:
    def fmt(v):
        v = _jsonable(v)
        if isinstance(v, list):
            return "[" + ",".join(repr(x) if isinstance(x, float) else str(x) for x in v) + "]"
        return repr(v) if isinstance(v, float) else str(v)

    return " ".join(f"{k}={fmt(v)}" for k, v in rec.items())


def _load_field(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DomainError(f"unreadable field file: {exc.strerror}", path=str(path)) from None
    try:
        return parse_field(text)
    except (FieldSyntaxError, NotNormalizableError, ValueError) as exc:
        raise DomainError(str(exc), path=str(path)) from None


FIELD_TAG = "# field "


def _embedded_field(path):
    """Field text stored by ``pseudo gen`` as a ``# field`` comment, or None."""
    with open(path) as fh:
        for ln in fh:
            if ln.startswith(FIELD_TAG):
                return ln[len(FIELD_TAG):].strip().replace(";", "\n")
            if not ln.startswith("#"):
                return None
    return None


def _trajectory_and_field(paths):
    if len(paths) == 1:
        traj = paths[0]
        try:
            text = _embedded_field(traj)
        except OSError as exc:
            raise DomainError(f"unreadable trajectory file: {exc.strerror}", path=str(traj)) from None
        if text is None:
            raise UsageError("trajectory carries no field; pass FIELD TRAJECTORY")
        try:
            F = parse_field(text)
        except (FieldSyntaxError, ValueError) as exc:
            raise DomainError(str(exc)) from None
    elif len(paths) == 2:
        F = _load_field(paths[0])
        traj = paths[1]
    else:
        raise UsageError("expected [FIELD] TRAJECTORY")
    try:
        pt = read_pseudo(traj)
    except OSError as exc:
        raise DomainError(f"unreadable trajectory file: {exc.strerror}", path=str(traj)) from None
    except ValueError as exc:
        raise DomainError(str(exc), path=str(traj)) from None
    if pt.dimension != F.dimension:
        raise DomainError("dimension mismatch between trajectory and field")
    return F, pt


def _floats(text, name):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise UsageError(f"{name} must be comma-separated numbers") from None


def _positive(v, name):
    if not v > 0:
        raise UsageError(f"{name} must be positive")


# ---------------------------------------------------------------- commands

def cmd_compactify(a):
    F = _load_field(a.field)
    cf = compactified_field(F)
    if a.samples < 1:
        raise UsageError("--samples must be at least 1")
    dirs = sphere_seeds(F.dimension, a.samples) if F.dimension <= 3 else np.eye(F.dimension)
    vals = cf.boundary(dirs)
    head = {"record": "compactified", "dimension": F.dimension, "degree": F.degree,
            "rescale_exponent": cf.rescale_exponent}
    rows = []
    for d, v in zip(dirs, vals):
        r = {f"dir_{i}": float(x) for i, x in enumerate(d)}
        r.update({f"Xbar_{i}": float(x) for i, x in enumerate(v)})
        rows.append(r)
    lines = ([_dumps(head)] if a.format == "jsonl" else ["# " + _kv(head)]) + _records(rows, a.format)
    _emit(lines, a.output)


def cmd_integrate(a):
    F = _load_field(a.field)
    x0 = _floats(a.x0, "--x0")
    if x0.size != F.dimension:
        raise UsageError("dimension mismatch between --x0 and the field")
    tol = a.tol if a.tol is not None else default_tol()
    _positive(tol, "--tol")
    if a.compact:
        rhs = compactified_field(F)
        x0 = theta(x0)
    else:
        rhs = F
    traj = integrate(rhs, x0, (a.t0, a.t1), tol=tol)
    gc = classify_growth(traj, a.t1 - a.t0, a.threshold)
    rows = [{"t": float(t), **{f"x{i}": float(v) for i, v in enumerate(x)}}
            for t, x in zip(traj.times, traj.states)]
    tail = {"record": "classification", "tag": gc.tag, "escape_time": gc.escape_time}
    lines = _records(rows, a.format) + ([_dumps(tail)] if a.format == "jsonl" else ["# " + _kv(tail)])
    _emit(lines, a.output)


def _dynamics(F, space, time_kind):
    if space == "ball":
        return TimeOneMap(compactified_field(F))
    flow = FieldFlow(F)
    return _TimeOne(flow) if time_kind == "map" else flow


def cmd_pseudo_gen(a):
    F = _load_field(a.field)
    x0 = _floats(a.x0, "--x0")
    if x0.size != F.dimension:
        raise UsageError("dimension mismatch between --x0 and the field")
    if a.length < 2:
        raise UsageError("--length must be at least 2")
    space = a.space or ("ball" if a.kind == "nonuniform" else "euclidean")
    if a.kind == "nonuniform" and space != "ball":
        raise UsageError("nonuniform laws need --space ball")
    if a.kind.startswith("noncompact") and space != "euclidean":
        raise UsageError("noncompact laws need --space euclidean")
    try:
        law = ErrorLaw(a.kind, a.delta, n=a.n, C=a.C, T=a.T)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dyn = _dynamics(F, space, a.time)
    start = theta(x0) if space == "ball" and a.euclidean_start else x0
    if space == "ball" and np.linalg.norm(start) >= 1:
        raise UsageError("ball start must lie inside the unit ball (use --euclidean-start)")
    pt = gen_pseudo(dyn, start, a.length, law, seed=a.seed, time_kind=a.time, dt=a.dt)
    lines = write_pseudo(pt).rstrip("\n").split("\n")
    lines.insert(1, FIELD_TAG + format_field(F).strip().replace("\n", "; "))
    _emit(lines, a.output)


def cmd_pseudo_check(a):
    F, pt = _trajectory_and_field(a.paths)
    law = pt.law
    if a.kind and a.kind != law.kind:
        if (a.kind in ("weighted", "noncompact_weighted")) != (law.kind in ("weighted", "noncompact_weighted")):
            raise UsageError(f"law kind {law.kind} in file cannot be checked as {a.kind}")
        law = ErrorLaw(a.kind, law.delta, law.n, law.C, law.T, law.tail_ratio)
    dyn = _dynamics(F, pt.space, pt.time_kind)
    try:
        rep = check_pseudo(pt, dyn, law, convention=a.convention)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rec = {"record": "check", "kind": law.kind, "holds": rep.holds, "worst_margin": rep.worst_margin,
           "worst_location": rep.worst_location, "integral_value": rep.integral_value}
    _emit([_dumps(rec) if a.format == "jsonl" else _kv(rec)], a.output)
    if not rep.holds:
        raise DomainError("pseudotrajectory violates its law", worst_margin=rep.worst_margin,
                          worst_location=rep.worst_location)


def _profiles(F, density=64):
    cf = compactified_field(F)
    out = []
    for p in boundary_fixed_points(cf, density):
        try:
            out.append((p, spectral_profile(cf, p), None))
        except (HyperbolicityError, ValueError) as exc:
            out.append((p, None, str(exc)))
    return cf, out


def cmd_exponents(a):
    F = _load_field(a.field)
    cf, profs = _profiles(F, a.density)
    recs = []
    for p, prof, err in profs:
        rec = {"point": p}
        if prof is None:
            rec["status"] = err
            recs.append(rec)
            continue
        rec.update({"mu": prof.mu2, "mu1": prof.mu1, "mu2": prof.mu2, "case": prof.case,
                    "lambda_s_min": prof.lambda_s_min, "lambda_s_max": prof.lambda_s_max,
                    "lambda_u_min": prof.lambda_u_min, "lambda_u_max": prof.lambda_u_max,
                    "transversal_ok": prof.transversal_ok})
        try:
            w = admissible_exponents(prof, a.kind, m=a.m, nbar0=a.nbar0)
            sym = ">" if w.bound_kind == "lower" else "<"
            rec.update({"bound": f"m{sym}{w.m_bound:.12g}", "m_bound": w.m_bound,
                        "bound_kind": w.bound_kind, "alternate_bound": w.alternate_bound})
            if a.m is not None:
                rec["decompactified_exponent"] = w.decompactified_exponent
                rec["m_admissible"] = w.admits(a.m)
            if a.nbar0 is not None:
                rec["n0"] = w.n0
            rec["status"] = "ok"
        except HyperbolicityError as exc:
            rec["status"] = str(exc)
        recs.append(rec)
    lines = [_dumps(r) for r in recs] if a.jsonl else [_kv(r) for r in recs]
    _emit(lines, a.output)


def _nearest_profile(F, pt):
    try:
        cf, profs = _profiles(F)
    except ValueError:
        return None
    u = directions(pt.states[-1])
    good = [(np.linalg.norm(p - u), prof) for p, prof, _ in profs if prof is not None]
    if not good:
        return None
    return min(good, key=lambda t: t[0])[1]


def cmd_shadow_find(a):
    F, pt = _trajectory_and_field(a.paths)
    cf = compactified_field(F)
    if a.weighted:
        if pt.law.kind not in ("weighted", "noncompact_weighted"):
            raise UsageError("--weighted needs a weighted pseudotrajectory")
        C = a.C if a.C is not None else pt.law.C
        dyn = _dynamics(F, "euclidean", pt.time_kind)
        try:
            res = weighted_shadow_solve(dyn, pt, C, cf=cf)
        except ValueError as exc:
            raise DomainError(str(exc)) from None
    else:
        if a.m is None:
            raise UsageError("--m is required for nonuniform search")
        if pt.law.kind in ("weighted", "noncompact_weighted"):
            raise UsageError("weighted pseudotrajectory needs --weighted")
        if pt.space != "ball":
            raise UsageError("nonuniform search needs ball samples")
        _positive(a.m, "--m")
        if a.Delta is not None:
            _positive(a.Delta, "--Delta")
        prof = _nearest_profile(F, pt)
        window = None
        flags = []
        if prof is not None:
            try:
                window = admissible_exponents(prof, "map" if pt.time_kind == "map" else "flow")
            except HyperbolicityError as exc:
                flags.append(str(exc))
        if window is not None and not window.admits(a.m):
            flags.append("outside certified window")
        f = TimeOneMap(cf)
        kw = dict(profile=prof, compose=a.compose, level=a.level, depth=a.depth)
        try:
            if pt.time_kind == "map":
                res = shadow_search_map(f, pt, a.m, Delta=a.Delta, **kw)
            else:
                res = shadow_search_flow(f, pt, a.m, Delta=a.Delta, **kw)
        except ValueError as exc:
            raise DomainError(str(exc)) from None
        res = type(res)(**{**res.__dict__, "flags": tuple(res.flags) + tuple(flags)})
    head = {"record": "shadow", "valid": res.valid, "q": res.q, "q_logr": res.q_logr,
            "envelope": res.envelope, "flags": list(res.flags),
            "worst_margin": res.worst_margin, "worst_k": res.worst_index}
    steps = []
    logr = res.diagnostics.get("orbit_logr")
    err = np.linalg.norm(res.errors, axis=-1) if res.errors is not None else np.zeros(len(res.margins))
    allow = res.allowances if res.allowances is not None else np.full(len(res.margins), np.nan)
    for k in range(len(res.margins)):
        row = {"k": k, "error": float(err[k]) if k < len(err) else math.nan,
               "allowance": float(allow[k]), "margin": float(res.margins[k])}
        if logr is not None and k < len(logr):
            row["log_r"] = float(logr[k])
        steps.append(row)
    if a.format == "jsonl":
        lines = [_dumps(head)] + [_dumps(s) for s in steps]
    else:
        lines = ["# " + _dumps(head)] + _records(steps, "csv")
    _emit(lines, a.output)
    if not res.valid:
        raise DomainError("no valid shadowing point", worst_margin=res.worst_margin,
                          worst_k=res.worst_index, flags=list(res.flags))


# ---------------------------------------------------------------- report

def fit_slope(x, y):
    """Least-squares slope of y on x with a 95% half-width."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if x.size < 3:
        return math.nan, math.nan
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    dof = max(1, x.size - 2)
    s2 = float(np.sum((y - A @ coef) ** 2)) / dof
    sxx = float(np.sum((x - x.mean()) ** 2))
    return float(coef[0]), (1.96 * math.sqrt(s2 / sxx) if sxx > 0 else math.inf)


def transfer_sweep(points: int = 40):
    """Ball-transfer ratios: expansion R/Rbar against the gap, contraction Rbar/R against |x|."""
    exp_rows, con_rows = [], []
    xbar = np.array([1.0])
    for g in np.logspace(-5, -2, points):
        bt = ball_expand_bound(xbar * (1 - g), 1e-3 * g, gap=g)
        exp_rows.append({"gap": float(g), "ratio": bt.ratio})
    for xn in np.logspace(1, 3, points):
        bt = ball_contract_bound(np.array([xn]), 1e-2)
        con_rows.append({"norm": float(xn), "ratio": bt.ratio})
    return exp_rows, con_rows


def _read_records(path):
    text = Path(path).read_text()
    recs = []
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln:
            continue
        if ln.startswith("#"):
            body = ln.lstrip("#").strip()
            if body.startswith("{"):
                recs.append(json.loads(body))
            continue
        if ln.startswith("{"):
            recs.append(json.loads(ln))
        else:
            raise DomainError("schema mismatch: report inputs must be jsonl records", path=str(path))
    if not recs or "record" not in recs[0]:
        raise DomainError("schema mismatch: missing header record", path=str(path))
    return recs


def cmd_report(a):
    outdir = Path(a.output or ".")
    outdir.mkdir(parents=True, exist_ok=True)
    summary = []
    for path in a.inputs:
        try:
            recs = _read_records(path)
        except OSError as exc:
            raise DomainError(f"unreadable report input: {exc.strerror}", path=str(path)) from None
        head = recs[0]
        if head["record"] == "shadow":
            steps = [r for r in recs[1:] if "k" in r]
            row = {"input": str(path), "record": "shadow", "valid": head.get("valid"),
                   "worst_margin": head.get("worst_margin")}
            env = head.get("envelope", {})
            row.update({f"env_{k}": v for k, v in env.items() if not isinstance(v, (list, dict))})
            lr = [r.get("log_r") for r in steps if r.get("error", 0) and r.get("error") > 0
                  and r.get("log_r") is not None]
            le = [math.log(r["error"]) for r in steps if r.get("error", 0) and r.get("error") > 0
                  and r.get("log_r") is not None]
            slope, half = fit_slope(lr, le)
            row.update({"slope_error_vs_r": slope, "slope_halfwidth": half})
            stem = Path(path).stem
            data = [{"log_r": x, "log_error": y} for x, y in zip(lr, le)]
            (outdir / f"{stem}_error_vs_r.csv").write_text("\n".join(_records(data, "csv")) + "\n")
            (outdir / f"{stem}_error_vs_r.fit.json").write_text(
                _dumps({"slope": slope, "halfwidth": half, "points": len(data)}) + "\n")
            # error against |x| on the Euclidean side: |x| = (1 - r) / sqrt(r (2 - r))
            lx = [math.log1p(-math.exp(v)) - 0.5 * (v + math.log(2 - math.exp(v))) for v in lr]
            s2, h2 = fit_slope(lx, le)
            row.update({"slope_error_vs_norm": s2, "norm_halfwidth": h2})
            data = [{"log_norm": x, "log_error": y} for x, y in zip(lx, le)]
            (outdir / f"{stem}_error_vs_norm.csv").write_text("\n".join(_records(data, "csv")) + "\n")
            (outdir / f"{stem}_error_vs_norm.fit.json").write_text(
                _dumps({"slope": s2, "halfwidth": h2, "points": len(data)}) + "\n")
        elif head["record"] == "check":
            row = {"input": str(path), "record": "check", "valid": head.get("holds"),
                   "worst_margin": head.get("worst_margin")}
        else:
            raise DomainError("schema mismatch: unknown record type", path=str(path))
        summary.append(row)
    if a.transfer:
        e_rows, c_rows = transfer_sweep()
        se, he = fit_slope(np.log([r["gap"] for r in e_rows]), np.log([r["ratio"] for r in e_rows]))
        sc, hc = fit_slope(np.log([r["norm"] for r in c_rows]), np.log([r["ratio"] for r in c_rows]))
        (outdir / "transfer_expand.csv").write_text("\n".join(_records(e_rows, "csv")) + "\n")
        (outdir / "transfer_contract.csv").write_text("\n".join(_records(c_rows, "csv")) + "\n")
        (outdir / "transfer.fit.json").write_text(_dumps(
            {"expand_slope": se, "expand_halfwidth": he, "contract_slope": sc, "contract_halfwidth": hc}) + "\n")
        summary.append({"input": "transfer-sweep", "record": "transfer", "valid": True,
                        "expand_slope": se, "contract_slope": sc})
    keys = []
    for r in summary:
        for k in r:
            if k not in keys:
                keys.append(k)
    rows = [{k: r.get(k) for k in keys} for r in summary]
    (outdir / "summary.csv").write_text("\n".join(_records(rows, "csv")) + ("\n" if rows else ""))
    for r in rows:
        sys.stdout.write(_kv(r) + "\n")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shadowgrow", description="Shadowing toolkit for polynomial ODEs with grow-up.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    c = sub.add_parser("compactify", help="boundary field at sampled directions")
    c.add_argument("field")
    c.add_argument("--samples", type=int, default=16)
    c.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_compactify)

    c = sub.add_parser("integrate", help="integrate and classify growth")
    c.add_argument("field")
    c.add_argument("--x0", required=True)
    c.add_argument("--t0", type=float, default=0.0)
    c.add_argument("--t1", type=float, required=True)
    c.add_argument("--tol", type=float)
    c.add_argument("--threshold", type=float, default=1e6)
    c.add_argument("--compact", action="store_true", help="integrate the compactified field from theta(x0)")
    c.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_integrate)

    ps = sub.add_parser("pseudo", help="pseudotrajectories")
    psub = ps.add_subparsers(dest="pseudo_command", parser_class=_Parser)
    g = psub.add_parser("gen")
    g.add_argument("field")
    g.add_argument("--x0", required=True)
    g.add_argument("--length", type=int, required=True)
    g.add_argument("--kind", choices=KINDS, required=True)
    g.add_argument("--delta", type=float, required=True)
    g.add_argument("--n", type=float, default=1.0)
    g.add_argument("--C", type=float, default=2.0)
    g.add_argument("--T", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--time", choices=("map", "flow"), default="map")
    g.add_argument("--dt", type=float)
    g.add_argument("--space", choices=("ball", "euclidean"))
    g.add_argument("--euclidean-start", action="store_true", help="x0 is Euclidean; map it into the ball")
    g.add_argument("-o", "--output")
    g.set_defaults(func=cmd_pseudo_gen)
    k = psub.add_parser("check")
    k.add_argument("paths", nargs="+", metavar="[FIELD] TRAJECTORY")
    k.add_argument("--kind", choices=KINDS)
    k.add_argument("--convention", choices=("image", "next"), default="image")
    k.add_argument("--format", choices=("kv", "jsonl"), default="jsonl")
    k.add_argument("-o", "--output")
    k.set_defaults(func=cmd_pseudo_check)

    e = sub.add_parser("exponents", help="boundary spectra and exponent windows")
    e.add_argument("field")
    e.add_argument("--kind", choices=("flow", "map"), default="flow")
    e.add_argument("--m", type=float)
    e.add_argument("--nbar0", type=float)
    e.add_argument("--density", type=int, default=64)
    e.add_argument("--jsonl", action="store_true")
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_exponents)

    sh = sub.add_parser("shadow", help="shadowing searches")
    ssub = sh.add_subparsers(dest="shadow_command", parser_class=_Parser)
    f = ssub.add_parser("find")
    f.add_argument("paths", nargs="+", metavar="[FIELD] TRAJECTORY")
    f.add_argument("--m", type=float)
    f.add_argument("--Delta", type=float)
    f.add_argument("--level", type=int, default=8)
    f.add_argument("--depth", type=int, default=30)
    f.add_argument("--compose", type=int)
    f.add_argument("--weighted", action="store_true")
    f.add_argument("--C", type=float)
    f.add_argument("--format", choices=("csv", "jsonl"), default="jsonl")
    f.add_argument("-o", "--output")
    f.set_defaults(func=cmd_shadow_find)

    r = sub.add_parser("report", help="summary tables and log-log data")
    r.add_argument("inputs", nargs="*")
    r.add_argument("--transfer", action="store_true", help="also emit the ball-transfer sweep")
    r.add_argument("-o", "--output")
    r.set_defaults(func=cmd_report)
    return p


def _config(a) -> RunConfig:
    params = {k: v for k, v in vars(a).items()
              if k not in ("func", "command", "output", "format", "field", "paths")}
    field = getattr(a, "field", None) or (a.paths[0] if len(getattr(a, "paths", [])) == 2 else None)
    return RunConfig(a.command, field, getattr(a, "output", None), getattr(a, "format", "jsonl"), params)


def _validate(cfg: RunConfig):
    """Reject out-of-range numeric parameters before any computation."""
    a = argparse.Namespace(**cfg.params)
    for name in ("level", "depth", "compose"):
        v = getattr(a, name, None)
        if v is not None and v < 1:
            raise UsageError(f"--{name} must be at least 1")
    if getattr(a, "level", None) is not None and a.level > 12:
        raise UsageError("--level must be at most 12")
    for name in ("dt", "T"):
        v = getattr(a, name, None)
        if v is not None:
            _positive(v, f"--{name}")
    if getattr(a, "delta", None) is not None and a.delta < 0:
        raise UsageError("--delta must be non-negative")


def _fail(kind: str, message: str, code: int, command, **extra) -> int:
    rec = {"error": kind, "message": message, "command": command, **extra}
    sys.stderr.write(_dumps(rec) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    command = None
    try:
        a = parser.parse_args(argv)
        command = a.command
        if a.command is None or not hasattr(a, "func"):
            raise UsageError("missing subcommand")
        if a.command == "pseudo":
            command = f"pseudo {a.pseudo_command}"
        if a.command == "shadow":
            command = f"shadow {a.shadow_command}"
        _validate(_config(a))
        a.func(a)
        return 0
    except UsageError as exc:
        return _fail("usage", str(exc), 2, command)
    except DomainError as exc:
        return _fail("domain", str(exc), 1, command, **exc.extra)
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        return _fail("domain", str(exc), 1, command)


if __name__ == "__main__":
    sys.exit(main())
