"""Pseudotrajectories: error laws, generation, defect profiles and checks."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from .compactify import ball_difference, directions, log_gap

__all__ = [
    "KINDS",
    "ErrorLaw",
    "PseudoTrajectory",
    "CheckReport",
    "gen_pseudo",
    "compute_defects",
    "check_pseudo",
    "map_defect_vectors",
    "write_pseudo",
    "read_pseudo",
]

KINDS = ("standard", "nonuniform", "noncompact_nonuniform", "weighted", "noncompact_weighted")
_POINTWISE = ("standard", "nonuniform", "noncompact_nonuniform")
_WEIGHTED = ("weighted", "noncompact_weighted")

# relative slack on weighted budgets, covering summation round-off only
WEIGHTED_RTOL = 1e-12
# flow defects below this (relative to the state scale) are integration round-off
NOISE_FLOOR = 1e-13


@dataclass(frozen=True)
class ErrorLaw:
    """Declared defect law.

    ``delta`` is the magnitude (delta for pointwise kinds, d for weighted
    ones); ``n`` the exponent of nonuniform kinds; ``C`` the weight base of
    weighted kinds; ``T`` the window of flow defects.  ``tail_ratio`` is the
    geometric decay assumed for weighted defect terms beyond the last sample.
    """

    kind: str
    delta: float
    n: float = 1.0
    C: float = 2.0
    T: float = 1.0
    tail_ratio: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown law kind {self.kind!r}")
        if self.delta < 0:
            raise ValueError("magnitude must be non-negative")
        if self.kind in ("nonuniform", "noncompact_nonuniform") and self.n < 1:
            raise ValueError("nonuniform laws need n >= 1")
        if self.kind in _WEIGHTED and self.C <= 1:
            raise ValueError("weighted laws need C > 1")
        if self.T <= 0:
            raise ValueError("window T must be positive")
        if not 0 < self.tail_ratio < 1:
            raise ValueError("tail_ratio must lie in (0, 1)")

    @property
    def pointwise(self) -> bool:
        return self.kind in _POINTWISE

    def allowance(self, gauge) -> np.ndarray:
        """Pointwise allowance d(z); z is the boundary distance (nonuniform) or |x| (noncompact)."""
        z = np.asarray(gauge, dtype=float)
        if self.kind == "standard":
            return np.full(z.shape, self.delta)
        if self.kind == "nonuniform":
            return self.delta * z**self.n
        if self.kind == "noncompact_nonuniform":
            with np.errstate(divide="ignore"):
                return self.delta * z ** (-self.n)
        raise ValueError("weighted laws have no pointwise allowance")

    def log_weight(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        scale = 2.5 if self.kind == "noncompact_weighted" else 1.0
        return scale * t * math.log(self.C)

    def header(self) -> str:
        return (
            f"# law kind={self.kind} delta={float(self.delta)!r} n={float(self.n)!r} "
            f"C={float(self.C)!r} T={float(self.T)!r} tail={float(self.tail_ratio)!r}"
        )


@dataclass(frozen=True)
class PseudoTrajectory:
    """Sampled approximate orbit.

    For maps ``times`` are 0, 1, ..., K-1.  Ball samples carry ``logr``, the
    log of the boundary distance, which is authoritative near the sphere.
    """

    times: np.ndarray
    states: np.ndarray
    law: ErrorLaw
    space: Literal["euclidean", "ball"] = "euclidean"
    time_kind: Literal["map", "flow"] = "map"
    logr: np.ndarray | None = None

    def __post_init__(self):
        if self.states.ndim != 2 or self.states.shape[0] != self.times.shape[0]:
            raise ValueError("states must be (K, N) matching times")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.space == "ball":
            lr = self.gap_log
            if np.any(~np.isfinite(lr)) or np.any(np.linalg.norm(self.states, axis=1) > 1):
                raise ValueError("ball samples must lie strictly inside the ball")

    @property
    def gap_log(self) -> np.ndarray:
        if self.logr is not None:
            return np.asarray(self.logr, dtype=float)
        return log_gap(self.states)

    @property
    def gaps(self) -> np.ndarray:
        return np.exp(self.gap_log)

    @property
    def dimension(self) -> int:
        return self.states.shape[1]

    def __len__(self) -> int:
        return self.times.shape[0]

    @property
    def dt(self) -> float:
        d = np.diff(self.times)
        return float(d[0]) if d.size else 1.0


@dataclass(frozen=True)
class CheckReport:
    holds: bool
    worst_margin: float
    worst_location: float
    integral_value: float | None = None
    margins: np.ndarray = field(default_factory=lambda: np.zeros(0))
    defects: np.ndarray = field(default_factory=lambda: np.zeros(0))
    allowances: np.ndarray = field(default_factory=lambda: np.zeros(0))


# ---------------------------------------------------------------- map defects

def _map_images(dynamics, states, logr, space):
    if space == "ball":
        return dynamics.step_ball(states, logr)
    return dynamics.step(states), None


def map_defect_vectors(pt: PseudoTrajectory, dynamics):
    """x_{k+1} - f(x_k) for k = 0..K-2, plus the images f(x_k) (and their logr)."""
    X = pt.states
    if pt.space == "ball":
        L = pt.gap_log
        fx, fl = dynamics.step_ball(X[:-1], L[:-1])
        vec = ball_difference(X[1:], L[1:], fx, fl)
        return vec, fx, fl
    fx = dynamics.step(X[:-1])
    return X[1:] - fx, fx, None


def _gauge(law, space, xbar, logr):
    if law.kind == "nonuniform":
        if space != "ball":
            raise ValueError("nonuniform laws measure boundary distance and need ball samples")
        return np.exp(logr)
    if law.kind == "noncompact_nonuniform":
        return np.linalg.norm(xbar, axis=-1)
    return np.ones(xbar.shape[:-1])


# ---------------------------------------------------------------- flow defects

def _flow_chain(dynamics, pt, step, count, alpha):
    """Phi(i*step, Psi(t_j)) for i = 1..count, stacked (count, K, N) (+ logr)."""
    X = pt.states
    out, outl = [], []
    if pt.space == "ball":
        cur, curl = X, pt.gap_log
        for _ in range(count):
            cur, curl = dynamics.flow_ball(step, cur, curl)
            out.append(cur)
            outl.append(curl)
        return np.array(out), np.array(outl)
    cur = X
    fl = dynamics.flow_alpha if alpha else dynamics.flow
    for _ in range(count):
        cur = fl(step, cur)
        out.append(cur)
    return np.array(out), None


def _flow_profile(pt, dynamics, law, T, tau_grid):
    """Defect psi(t_j) and min-over-window allowance at every sample."""
    dt = pt.dt
    if tau_grid is None:
        tau_grid = T / 64
    k = max(1, int(round(tau_grid / dt)))
    step = k * dt
    count = int(math.floor(T / step + 1e-9))
    alpha = law.kind.startswith("noncompact")
    K = len(pt)
    psi = np.zeros(K)
    if law.pointwise:
        g0 = _gauge(law, pt.space, pt.states, pt.gap_log)
        allow = law.allowance(g0)
    for sgn in (1.0, -1.0):
        imgs, imgl = _flow_chain(dynamics, pt, sgn * step, count, alpha)
        for i in range(count):
            shift = int(sgn) * (i + 1) * k
            j = np.arange(K)
            tgt = j + shift
            ok = (tgt >= 0) & (tgt < K)
            if pt.space == "ball":
                diff = ball_difference(
                    pt.states[tgt[ok]], pt.gap_log[tgt[ok]], imgs[i][ok], imgl[i][ok]
                )
            else:
                diff = pt.states[tgt[ok]] - imgs[i][ok]
            psi[ok] = np.maximum(psi[ok], np.linalg.norm(diff, axis=-1))
            if law.pointwise:
                g = _gauge(law, pt.space, imgs[i], imgl[i] if imgl is not None else None)
                allow = np.minimum(allow, law.allowance(g))
    return psi, (allow if law.pointwise else None)


def compute_defects(
    candidate: PseudoTrajectory,
    dynamics,
    T: float | None = None,
    tau_grid: float | None = None,
) -> np.ndarray:
    """Defect profile: e_k for maps, psi(t) on the tau grid for flows.

    For flows the grid step is rounded to a multiple of the sample spacing,
    since samples are taken as they are (no interpolation between them).
    Noncompact laws use the time-changed flow.
    """
    if candidate.time_kind == "map":
        vec, _, _ = map_defect_vectors(candidate, dynamics)
        return np.linalg.norm(vec, axis=-1)
    law = candidate.law
    psi, _ = _flow_profile(candidate, dynamics, law, T or law.T, tau_grid)
    return psi


# ---------------------------------------------------------------- checks

def _weighted_total(law, times, defects, discrete, noise=0.0):
    """Weighted sum/integral with the geometric tail; +inf if terms do not decay."""
    logw = law.log_weight(times)
    with np.errstate(divide="ignore"):
        logterm = np.where(defects > 0, np.log(np.where(defects > 0, defects, 1.0)) + logw, -np.inf)
    terms = np.exp(logterm)
    if not np.all(np.isfinite(terms)):
        return math.inf, terms
    # round-off level defects carry no decay information
    nz = np.flatnonzero(defects > noise)
    # decay is judged over the second half of the record
    if nz.size >= 3:
        sel = nz[times[nz] >= 0.5 * (times[0] + times[-1])]
        if sel.size >= 3:
            slope = np.polyfit(times[sel], logterm[sel], 1)[0]
            if slope >= 0:
                return math.inf, terms
    rho = law.tail_ratio
    last = terms[-1]
    if discrete:
        body = math.fsum(terms)
        tail = last * rho / (1 - rho)
    else:
        h = np.diff(times)
        body = math.fsum(0.5 * h * (terms[1:] + terms[:-1]))
        tail = last / (-math.log(rho))
    return body + tail, terms


def check_pseudo(
    pt: PseudoTrajectory,
    dynamics,
    law: ErrorLaw | None = None,
    convention: Literal["image", "next"] = "image",
    tau_grid: float | None = None,
) -> CheckReport:
    """Evaluate the inequality declared by ``law`` on ``pt``.

    ``convention='next'`` measures the nonuniform allowance at x_{k+1}
    instead of f(x_k) (an equivalent variant for maps).
    """
    law = law or pt.law
    if law.kind.startswith("noncompact") and pt.space != "euclidean":
        raise ValueError(f"law kind {law.kind} requires euclidean samples")
    if law.kind == "nonuniform" and pt.space != "ball":
        raise ValueError("law kind nonuniform requires ball samples")
    if pt.time_kind == "map":
        vec, fx, fl = map_defect_vectors(pt, dynamics)
        defects = np.linalg.norm(vec, axis=-1)
        loc = pt.times[:-1]
        if law.pointwise:
            if convention == "next":
                g = _gauge(law, pt.space, pt.states[1:], pt.gap_log[1:] if pt.space == "ball" else None)
            else:
                g = _gauge(law, pt.space, fx, fl)
            allow = law.allowance(g)
        else:
            allow = None
        discrete = True
    else:
        defects, allow = _flow_profile(pt, dynamics, law, law.T, tau_grid)
        loc = pt.times
        discrete = False
    if law.pointwise:
        margins = allow - defects
        i = int(np.argmin(margins)) if margins.size else 0
        worst = float(margins[i]) if margins.size else math.inf
        return CheckReport(bool(worst >= 0), worst, float(loc[i]) if loc.size else 0.0,
                           None, margins, defects, allow)
    noise = 0.0 if discrete else NOISE_FLOOR * (1.0 + float(np.max(np.abs(pt.states))))
    total, terms = _weighted_total(law, loc, defects, discrete, noise)
    i = int(np.argmax(terms)) if terms.size else 0
    margin = law.delta - total
    holds = total <= law.delta * (1 + WEIGHTED_RTOL)
    return CheckReport(bool(holds), float(margin), float(loc[i]) if loc.size else 0.0,
                       float(total), np.array([margin]), defects, np.array([law.delta]))


# ---------------------------------------------------------------- generation

def _random_directions(rng, n):
    v = rng.standard_normal(n)
    nv = np.linalg.norm(v)
    return v / nv if nv > 0 else np.eye(n)[0]


def _weighted_shares(law, times):
    """Per-sample budget for weighted map laws summing (with tail) to at most d."""
    q = 0.5
    M = len(times)
    logw = law.log_weight(times)
    shares = law.delta * (1 - q) * q ** np.arange(M)
    shares[-1] = law.delta * q ** (M - 1) * (1 - law.tail_ratio)
    return shares * np.exp(-logw)


def _weighted_density(law, times):
    """Defect profile d q^t / W(t) (q = 1/2 per unit time) for weighted flow laws."""
    return law.delta * np.exp(times * math.log(0.5) - law.log_weight(times))


def _ball_add(xbar, logr, vec):
    """Ball point xbar + vec, returned as (xbar, logr) with accurate radius."""
    u = directions(xbar)
    r = np.exp(logr)
    rad = np.sum(u * vec, axis=-1)
    tan = vec - rad[..., None] * u
    q = 1.0 - r
    # new radius |(q + rad) u + tan| and boundary distance 1 - that
    a = q + rad
    tn2 = np.sum(tan * tan, axis=-1)
    nrm = np.sqrt(a * a + tn2)
    # 1 - nrm = r - rad - tn2/(a + nrm)
    with np.errstate(divide="ignore", invalid="ignore"):
        gap = r - rad - np.where(tn2 > 0, tn2 / (a + nrm), 0.0)
        new_u = (a[..., None] * u + tan) / nrm[..., None]
        new_l = np.log(gap)
    return (1.0 - gap)[..., None] * new_u, new_l


def gen_pseudo(
    dynamics,
    x0,
    length: int,
    law: ErrorLaw,
    seed: int | Sequence[int] = 0,
    time_kind: Literal["map", "flow"] = "map",
    dt: float | None = None,
    logr0: float | None = None,
    tau_grid: float | None = None,
):
    """Exact steps composed with random perturbations within the law's allowance.

    With a sequence of seeds, all pseudotrajectories are generated in lockstep
    and a list is returned; each one depends on its own seed only.

    Map laws are met by construction: step k is perturbed by at most the
    allowance at f(x_k) (and perturbations that rounding would push over it
    are dropped).  Flow laws are met by generating, measuring with
    :func:`check_pseudo`, and shrinking the perturbations until the check holds.
    """
    seeds = [seed] if np.isscalar(seed) else list(seed)
    space = getattr(dynamics, "space", "euclidean")
    x0 = np.asarray(x0, dtype=float)
    S = len(seeds)
    X0 = np.broadcast_to(x0, (S, x0.shape[-1])).copy()
    if time_kind == "map":
        out = _gen_map(dynamics, X0, length, law, seeds, space, logr0)
    else:
        out = _gen_flow(dynamics, X0, length, law, seeds, space, dt, logr0, tau_grid)
    return out[0] if np.isscalar(seed) else out


def _gen_map(dynamics, X0, length, law, seeds, space, logr0):
    S, n = X0.shape
    rngs = [np.random.default_rng(s) for s in seeds]
    X = np.empty((S, length, n))
    L = np.empty((S, length)) if space == "ball" else None
    X[:, 0] = X0
    if space == "ball":
        L[:, 0] = logr0 if logr0 is not None else log_gap(X0)
        if np.any(~np.isfinite(L[:, 0])):
            raise ValueError("start point must lie strictly inside the ball")
    times = np.arange(length, dtype=float)
    shares = _weighted_shares(law, times[:-1]) if not law.pointwise else None
    for k in range(length - 1):
        if space == "ball":
            fx, fl = dynamics.step_ball(X[:, k], L[:, k])
            if np.any(~np.isfinite(fl)) or np.any(fl >= 0):
                raise ValueError(f"orbit leaves the ball interior at step {k + 1}")
        else:
            fx, fl = dynamics.step(X[:, k]), None
            if np.any(~np.isfinite(fx)):
                raise ValueError(f"orbit escapes at step {k + 1}")
        if law.pointwise:
            budget = law.allowance(_gauge(law, space, fx, fl))
        else:
            budget = np.full(S, shares[k])
        for i, rng in enumerate(rngs):
            mag = budget[i] * rng.uniform(0.5, 1.0) if budget[i] > 0 else 0.0
            vec = mag * _random_directions(rng, n)
            if space == "ball":
                nx, nl = _ball_add(fx[i], fl[i], vec)
                if mag > 0 and np.isfinite(nl):
                    real = np.linalg.norm(ball_difference(nx, nl, fx[i], fl[i]))
                    if real <= budget[i]:
                        X[i, k + 1], L[i, k + 1] = nx, nl
                        continue
                X[i, k + 1], L[i, k + 1] = fx[i], fl[i]
            else:
                nx = fx[i] + vec
                if np.linalg.norm(nx - fx[i]) <= budget[i]:
                    X[i, k + 1] = nx
                else:
                    X[i, k + 1] = fx[i]
    return [
        PseudoTrajectory(times, X[i], law, space, "map", None if L is None else L[i])
        for i in range(S)
    ]


def _gen_flow(dynamics, X0, length, law, seeds, space, dt, logr0, tau_grid):
    S, n = X0.shape
    dt = dt if dt is not None else law.T / 64
    times = dt * np.arange(length)
    # exact orbit by chaining the dt-flow
    Y = np.empty((S, length, n))
    LY = np.empty((S, length)) if space == "ball" else None
    Y[:, 0] = X0
    alpha = law.kind.startswith("noncompact")
    if space == "ball":
        LY[:, 0] = logr0 if logr0 is not None else log_gap(X0)
    for j in range(length - 1):
        if space == "ball":
            Y[:, j + 1], LY[:, j + 1] = dynamics.flow_ball(dt, Y[:, j], LY[:, j])
        else:
            fl = dynamics.flow_alpha if alpha else dynamics.flow
            Y[:, j + 1] = fl(dt, Y[:, j])
    if law.pointwise:
        base = law.allowance(_gauge(law, space, Y, LY))
    else:
        prof = _weighted_density(law, times) * np.exp(-law.log_weight(np.full(length, law.T)))
        base = np.broadcast_to(prof, (S, length))
    out = []
    for i, s in enumerate(seeds):
        if law.delta == 0:
            # the chained orbit itself; its round-off defects are not checked against 0
            out.append(PseudoTrajectory(times, Y[i].copy(), law, space, "flow",
                                        None if LY is None else LY[i].copy()))
            continue
        rng = np.random.default_rng(s)
        mags = base[i] * rng.uniform(0.5, 1.0, size=length) * 0.25
        dirs = np.array([_random_directions(rng, n) for _ in range(length)])
        W = mags[:, None] * dirs
        scale = 1.0
        for _ in range(60):
            if space == "ball":
                Xs, Ls = _ball_add(Y[i], LY[i], scale * W)
                pt = PseudoTrajectory(times, Xs, law, space, "flow", Ls)
            else:
                pt = PseudoTrajectory(times, Y[i] + scale * W, law, space, "flow", None)
            rep = check_pseudo(pt, dynamics, tau_grid=tau_grid)
            if rep.holds:
                break
            if law.pointwise:
                ratio = np.max(rep.defects / np.maximum(rep.allowances, 1e-300))
            else:
                ratio = rep.integral_value / law.delta if law.delta > 0 else math.inf
            scale *= min(0.9, 0.95 / ratio) if np.isfinite(ratio) and ratio > 0 else 0.5
        else:
            raise ValueError("cannot meet the law: exact-orbit defects exceed the allowance")
        out.append(pt)
    return out


# ---------------------------------------------------------------- files

def write_pseudo(pt: PseudoTrajectory, path_or_buf=None) -> str:
    """CSV with a ``# law ...`` header; ball files add a ``logr`` column."""
    lines = [pt.law.header() + f" space={pt.space} time={pt.time_kind}"]
    cols = ["t"] + [f"x{i}" for i in range(pt.dimension)]
    if pt.space == "ball":
        cols.append("logr")
    lines.append(",".join(cols))
    for j in range(len(pt)):
        row = [repr(float(pt.times[j]))] + [repr(float(v)) for v in pt.states[j]]
        if pt.space == "ball":
            row.append(repr(float(pt.gap_log[j])))
        lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
    if path_or_buf is not None:
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)
    return text


def _parse_header(line: str) -> dict:
    items = {}
    for tok in line.lstrip("#").split()[1:]:
        if "=" in tok:
            k, v = tok.split("=", 1)
            items[k] = v
    return items


def read_pseudo(path_or_text) -> PseudoTrajectory:
    if isinstance(path_or_text, str) and "\n" in path_or_text:
        text = path_or_text
    else:
        with open(path_or_text) as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# law"):
        raise ValueError("schema mismatch: missing '# law' header")
    h = _parse_header(lines[0])
    lines = lines[:1] + [ln for ln in lines[1:] if not ln.lstrip().startswith("#")]
    law = ErrorLaw(
        kind=h.get("kind", "standard"),
        delta=float(h.get("delta", 0.0)),
        n=float(h.get("n", 1.0)),
        C=float(h.get("C", 2.0)),
        T=float(h.get("T", 1.0)),
        tail_ratio=float(h.get("tail", 0.5)),
    )
    cols = lines[1].split(",")
    if cols[0] != "t":
        raise ValueError("schema mismatch: first column must be t")
    data = np.loadtxt(io.StringIO("\n".join(lines[2:])), delimiter=",", ndmin=2)
    space = h.get("space", "ball" if cols[-1] == "logr" else "euclidean")
    time_kind = h.get("time", "map")
    if cols[-1] == "logr":
        return PseudoTrajectory(data[:, 0], data[:, 1:-1], law, space, time_kind, data[:, -1])
    return PseudoTrajectory(data[:, 0], data[:, 1:], law, space, time_kind, None)
