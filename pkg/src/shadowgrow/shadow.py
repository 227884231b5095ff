"""Shadowing points: box refinement, nonuniform searches and the weighted solver."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .compactify import (
    CompactifiedField,
    ball_difference,
    decompactify_error,
    directions,
    log_gap,
    theta,
)
from .hyperbolic import ExponentWindow, HyperbolicProfile
from .pseudo import (
    ErrorLaw,
    PseudoTrajectory,
    _ball_add,
    _gauge,
    _weighted_total,
    check_pseudo,
)

__all__ = [
    "BoxAlignmentError",
    "RefineError",
    "BoxComplex",
    "RefineResult",
    "ShadowResult",
    "check_alignment",
    "conley_refine",
    "shadow_search_map",
    "shadow_search_flow",
    "shadow_transfer_noncompact",
    "weighted_shadow_solve",
    "weighted_objective",
]

RESIDUAL_TOL = 1e-9
POLISH_RTOL = 1e-10
POLISH_MAX_ITER = 200


class BoxAlignmentError(ValueError):
    pass


class RefineError(ValueError):
    pass


# ---------------------------------------------------------------- boxes

@dataclass(frozen=True)
class BoxComplex:
    """Per-step boxes ``x_k + radius_k * frame @ [-1, 1]^N``.

    The first ``s_dim`` frame columns span the stable block, the rest the
    unstable block.  A single center/radius row is broadcast to every step.
    """

    centers: np.ndarray
    radii: np.ndarray
    frame: np.ndarray
    s_dim: int
    level: int = 8

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        r = np.atleast_1d(np.asarray(self.radii, dtype=float))
        T = np.atleast_2d(np.asarray(self.frame, dtype=float))
        if T.shape != (c.shape[1], c.shape[1]):
            raise ValueError("frame must be N x N")
        if not 0 <= self.s_dim <= c.shape[1]:
            raise ValueError("s_dim out of range")
        if np.any(r <= 0):
            raise ValueError("box radii must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "frame", T)
        object.__setattr__(self, "_inv", np.linalg.inv(T))

    @classmethod
    def unit(cls, dimension: int, s_dim: int, level: int = 8) -> "BoxComplex":
        """Constant boxes [-1, 1]^N centred at the origin."""
        return cls(np.zeros((1, dimension)), np.ones(1), np.eye(dimension), s_dim, level)

    @property
    def dimension(self) -> int:
        return self.frame.shape[0]

    @property
    def u_dim(self) -> int:
        return self.dimension - self.s_dim

    def _row(self, arr, k):
        return arr[min(k, arr.shape[0] - 1)] if arr.shape[0] > 1 else arr[0]

    def to_local(self, k: int, X) -> np.ndarray:
        c, r = self._row(self.centers, k), self._row(self.radii, k)
        return (np.asarray(X, dtype=float) - c) @ self._inv.T / r

    def to_global(self, k: int, V) -> np.ndarray:
        c, r = self._row(self.centers, k), self._row(self.radii, k)
        return c + r * (np.asarray(V, dtype=float) @ self.frame.T)


def _as_local_maps(maps, boxes: BoxComplex, normalized: bool) -> Callable:
    if normalized:
        return maps
    f = maps.step if hasattr(maps, "step") else maps

    def g(k, V):
        return boxes.to_local(k + 1, f(boxes.to_global(k, V)))

    return g


def check_alignment(g: Callable, boxes: BoxComplex, depth: int, tol: float = 1e-12) -> None:
    """Sampled covering test on the {-1, 0, 1}^N lattice of every box.

    The stable block must map into the next box; unstable faces must map
    outside it.
    """
    N, s = boxes.dimension, boxes.s_dim
    pts = np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=N)))
    on_face = np.max(np.abs(pts[:, s:]), axis=1) == 1 if s < N else np.zeros(len(pts), bool)
    for k in range(depth):
        Y = g(k, pts)
        if not np.all(np.isfinite(Y)):
            raise BoxAlignmentError(f"hyperbolic box alignment violated at step {k}")
        if s and np.max(np.abs(Y[:, :s])) > 1 + tol:
            raise BoxAlignmentError(f"hyperbolic box alignment violated at step {k}")
        if s < N and np.any(on_face) and np.min(np.max(np.abs(Y[on_face, s:]), axis=1)) < 1 - tol:
            raise BoxAlignmentError(f"hyperbolic box alignment violated at step {k}")


# ---------------------------------------------------------------- refinement

@dataclass(frozen=True)
class RefineResult:
    """Level-n cubes of the initial box whose transition paths survive ``depth`` steps."""

    alive: np.ndarray
    level: int
    side: float
    centers: np.ndarray
    physical_centers: np.ndarray
    point: np.ndarray | None
    vertical_ok: bool
    fiber_counts: np.ndarray
    chain: np.ndarray | None = None

    @property
    def indices(self) -> np.ndarray:
        return np.argwhere(self.alive)


def _summed_area(a: np.ndarray) -> np.ndarray:
    S = np.pad(a.astype(np.int64), [(1, 0)] * a.ndim)
    for ax in range(a.ndim):
        S = np.cumsum(S, axis=ax)
    return S


def _box_count(S: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Number of set cells in each inclusive index box [lo, hi] (rows)."""
    N = lo.shape[1]
    total = np.zeros(lo.shape[0], dtype=np.int64)
    for bits in itertools.product((0, 1), repeat=N):
        idx = tuple(np.where(b, hi[:, i] + 1, lo[:, i]) for i, b in enumerate(bits))
        sign = (-1) ** (N - sum(bits))
        total += sign * S[idx]
    return total


def conley_refine(
    maps,
    boxes: BoxComplex,
    depth: int,
    level: int | None = None,
    normalized: bool = False,
    s_offset=None,
    check: bool = True,
) -> RefineResult:
    """Approximate the forward-invariant set of the initial box at dyadic level ``level``.

    Cubes of side 2^(1-level) (in box coordinates [-1, 1]^N) form a transition
    graph: a cube links to every cube of the next box that the bounding box of
    its image (corners and centre) overlaps in the interior.  A cube is kept if
    a path of length ``depth`` starts from it.

    ``maps`` is a map on global coordinates (callable or object with ``step``)
    or, with ``normalized=True``, a callable ``g(k, V)`` on box coordinates.
    With no unstable directions the forward image chain of the whole box is
    followed and its final centre is returned as ``point``; otherwise ``point``
    is the mean centre of the kept cubes in the fiber through ``s_offset``.
    """
    level = boxes.level if level is None else level
    N, s = boxes.dimension, boxes.s_dim
    g = _as_local_maps(maps, boxes, normalized)
    if check:
        check_alignment(g, boxes, depth)
    M = 2**level
    h = 2.0 / M
    axes = -1 + (np.arange(M) + 0.5) * h
    grid = np.stack(np.meshgrid(*([axes] * N), indexing="ij"), axis=-1).reshape(-1, N)
    offs = np.array(list(itertools.product((-0.5 * h, 0.5 * h), repeat=N)) + [[0.0] * N])
    samples = (grid[:, None, :] + offs[None, :, :]).reshape(-1, N)
    Q = offs.shape[0]
    eps = 1e-9
    alive = np.ones((M,) * N, dtype=bool)
    for k in reversed(range(depth)):
        Y = g(k, samples).reshape(-1, Q, N)
        lo_c, hi_c = Y.min(axis=1), Y.max(axis=1)
        finite = np.all(np.isfinite(lo_c) & np.isfinite(hi_c), axis=1)
        lo_c = np.where(np.isfinite(lo_c), lo_c, 0.0)
        hi_c = np.where(np.isfinite(hi_c), hi_c, 0.0)
        lo = np.floor((lo_c + 1) / h + eps).astype(np.int64)
        hi = np.ceil((hi_c + 1) / h - eps).astype(np.int64) - 1
        hi = np.maximum(hi, lo)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, M - 1)
        empty = np.any(lo > hi, axis=1) | ~finite
        lo = np.where(empty[:, None], 0, lo)
        hi = np.where(empty[:, None], 0, hi)
        cnt = _box_count(_summed_area(alive), lo, hi)
        alive = ((cnt > 0) & ~empty).reshape((M,) * N)
    if not alive.any():
        raise RefineError("no invariant cubes: pseudotrajectory too coarse for given boxes")
    idx = np.argwhere(alive)
    centers = -1 + (idx + 0.5) * h
    if s:
        proj = alive.reshape((M,) * s + (-1,)).any(axis=-1)
        fiber_counts = alive.reshape((M,) * s + (-1,)).sum(axis=-1)
        vertical_ok = bool(proj.all()) if s < N else True
    else:
        fiber_counts = np.array([alive.sum()])
        vertical_ok = True
    chain = None
    if s == N:
        lo_b, hi_b = -np.ones(N), np.ones(N)
        chain_pts = []
        for k in range(depth):
            corners = np.array(list(itertools.product(*zip(lo_b, hi_b))) + [0.5 * (lo_b + hi_b)])
            Y = g(k, corners)
            lo_b = np.clip(Y.min(axis=0), -1, 1)
            hi_b = np.clip(Y.max(axis=0), -1, 1)
            chain_pts.append(0.5 * (lo_b + hi_b))
        chain = np.array(chain_pts) if chain_pts else np.zeros((0, N))
        local = chain[-1] if depth else np.zeros(N)
        point = boxes.to_global(depth, local)
    else:
        off = np.zeros(s) if s_offset is None else np.asarray(s_offset, dtype=float)
        if s:
            fib = np.clip(np.floor((off + 1) / h).astype(int), 0, M - 1)
            sel = np.all(idx[:, :s] == fib, axis=1)
        else:
            sel = np.ones(len(idx), bool)
        point = boxes.to_global(0, centers[sel].mean(axis=0)) if sel.any() else None
    phys = boxes.to_global(0, centers)
    return RefineResult(alive, level, h, centers, phys, point, vertical_ok, fiber_counts, chain)


# ---------------------------------------------------------------- results

@dataclass(frozen=True)
class ShadowResult:
    """Shadowing point with its envelope and per-step margins.

    ``errors`` holds x_k - f^k(q) style displacement vectors (orbit minus
    samples); ``allowances`` the envelope at each step.
    """

    q: np.ndarray
    envelope: dict
    margins: np.ndarray
    valid: bool
    errors: np.ndarray | None = None
    allowances: np.ndarray | None = None
    surface_sample: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    flags: tuple = ()
    q_logr: float | None = None
    space: str = "ball"

    @property
    def worst_index(self) -> int:
        return int(np.argmin(self.margins)) if self.margins.size else 0

    @property
    def worst_margin(self) -> float:
        return float(np.min(self.margins)) if self.margins.size else math.inf


# ---------------------------------------------------------------- linear algebra helpers

def _norm_inf(M):
    return np.max(np.sum(np.abs(M), axis=-1), axis=-1) if M.size else np.zeros(M.shape[:-2])


def _sigma_min_inf(M):
    """1 / ||M^-1||_inf, the smallest stretch in the max norm."""
    if M.shape[-1] == 0:
        return np.full(M.shape[:-2], np.inf)
    return 1.0 / _norm_inf(np.linalg.inv(M))


def _frame_scale(T):
    """||T||_{inf->2}: the largest Euclidean length of T w over the unit cube."""
    N = T.shape[0]
    best = 0.0
    for sig in itertools.product((-1.0, 1.0), repeat=N):
        best = max(best, float(np.linalg.norm(T @ np.array(sig))))
    return best


def _signed_scale(y, log_scale):
    """y * exp(log_scale) without overflow in the exponential."""
    with np.errstate(divide="ignore"):
        ly = np.log(np.abs(y))
    out = np.sign(y) * np.exp(ly + log_scale)
    return np.where(y == 0, 0.0, out)


def _solve_blocks(M, c, s, offset=None, sweeps=200):
    """w_{k+1} = M_k w_k - c_k with w_0^s = offset and w_K^u = 0."""
    K, N = c.shape
    w = np.zeros((K + 1, N))
    if s and offset is not None:
        w[0, :s] = offset
    for _ in range(sweeps):
        old = w.copy()
        if s < N:
            w[K, s:] = 0.0
            for k in range(K - 1, -1, -1):
                rhs = w[k + 1, s:] + c[k, s:] - M[k, s:, :s] @ w[k, :s]
                w[k, s:] = np.linalg.solve(M[k, s:, s:], rhs)
        if s:
            for k in range(K):
                w[k + 1, :s] = M[k, :s, :s] @ w[k, :s] + M[k, :s, s:] @ w[k, s:] - c[k, :s]
        if s == 0 or s == N:
            break
        if np.max(np.abs(w - old)) <= 1e-15 * (1 + np.max(np.abs(w))):
            break
    return w


def _compose_groups(M, c, T):
    """Composite affine maps over consecutive groups of T steps."""
    K = M.shape[0]
    out = []
    for start in range(0, K, T):
        Mg = np.eye(M.shape[1])
        cg = np.zeros(M.shape[1])
        for k in range(start, min(start + T, K)):
            Mg = M[k] @ Mg
            cg = M[k] @ cg + c[k]
        out.append((start, Mg, cg))
    return out


def _contraction(groups, s):
    worst = 0.0
    for _, Mg, _ in groups:
        if s:
            worst = max(worst, float(_norm_inf(Mg[:s, :s])))
        if s < Mg.shape[0]:
            worst = max(worst, 1.0 / float(_sigma_min_inf(Mg[s:, s:])))
    return worst


def _covering(groups, s, beta):
    """Per-group slack of the s-block and u-block covering inequalities (>= 0 holds)."""
    slack = []
    for start, Mg, cg in groups:
        vals = []
        if s:
            lhs = (_norm_inf(Mg[:s, :s]) + _norm_inf(Mg[:s, s:])) * beta + np.max(np.abs(cg[:s]))
            vals.append(beta - lhs)
        if s < Mg.shape[0]:
            lhs = (_sigma_min_inf(Mg[s:, s:]) - _norm_inf(Mg[s:, :s])) * beta - np.max(np.abs(cg[s:]))
            vals.append(lhs - beta)
        slack.append(min(vals))
    return np.array(slack)


def _covering_floor(groups, s, beta):
    """Smallest envelope constant for which the covering inequalities hold (unit-constant c)."""
    need = 0.0
    for _, Mg, cg in groups:
        if s:
            room = beta * (1 - _norm_inf(Mg[:s, :s]) - _norm_inf(Mg[:s, s:]))
            cs = np.max(np.abs(cg[:s]))
            if room <= 0:
                return math.inf
            need = max(need, cs / room)
        if s < Mg.shape[0]:
            room = beta * (_sigma_min_inf(Mg[s:, s:]) - _norm_inf(Mg[s:, :s]) - 1)
            cu = np.max(np.abs(cg[s:]))
            if room <= 0:
                return math.inf
            need = max(need, cu / room)
    return need


# ---------------------------------------------------------------- nonuniform search

def _map_data(f, pt: PseudoTrajectory):
    X = pt.states
    if pt.space == "ball":
        L = pt.gap_log
        fx, fl, A = f.step_ball_jacobian(X[:-1], L[:-1])
        xi = ball_difference(X[1:], L[1:], fx, fl)
        s = L
    else:
        fx = f.step(X[:-1])
        fl = None
        A = f.jacobian(X[:-1])
        xi = X[1:] - fx
        s = np.zeros(len(X))
    return X, s, fx, fl, np.asarray(A), xi


def _frame_from(profile, frame, N):
    if frame is not None:
        return np.atleast_2d(np.asarray(frame, dtype=float))
    if profile is not None and profile.jacobian is not None:
        w, V = np.linalg.eig(profile.jacobian)
        if np.all(np.abs(w.imag) < 1e-12):
            V = np.real(V)
            return V / np.linalg.norm(V, axis=0)
    return np.eye(N)


def _orbit_logr(s, u, E, m_unused=None):
    """log boundary distance of x_k + e_k, from log r_k, directions and displacements."""
    r = np.exp(s)
    rad = np.sum(u * E, axis=-1)
    tan2 = np.sum(E * E, axis=-1) - rad * rad
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(r > 0, (-rad - tan2 / (2 * (1 - r))) / r, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return s + np.log1p(ratio)


def shadow_search_map(
    f,
    pt: PseudoTrajectory,
    m: float,
    Delta: float | None = None,
    window: ExponentWindow | None = None,
    profile: HyperbolicProfile | None = None,
    frame=None,
    compose: int | None = None,
    level: int = 8,
    depth: int = 30,
    surface_samples: int = 0,
) -> ShadowResult:
    """Shadowing point for a nonuniform pseudotrajectory of a map.

    Errors are written in box coordinates w_k = T^-1 e_k / (Delta r_k^m) with
    a fixed frame T.  The linearized error equations w_{k+1} = M_k w_k - c_k
    are solved exactly (unstable block backward from w_K = 0, stable block
    forward from a fiber offset).  The per-step affine maps are certified by
    covering inequalities on groups of ``compose`` steps and cross-checked by
    :func:`conley_refine` on the first ``depth`` steps.

    If ``Delta`` is omitted the smallest constant satisfying the covering
    inequalities (and at least twice the realized one) is used.
    """
    if pt.time_kind != "map":
        raise ValueError("shadow_search_map needs a map pseudotrajectory")
    if window is not None and not window.admits(m):
        raise ValueError(f"exponent m={m} outside the admissible window")
    law = pt.law
    if law.kind not in ("nonuniform", "standard"):
        raise ValueError("nonuniform search needs a pointwise (nonuniform or standard) law")
    X, s, fx, fl, A, xi = _map_data(f, pt)
    K, N = xi.shape
    flags = []

    # law precondition: defects against the allowance at f(x_k)
    defects = np.linalg.norm(xi, axis=-1)
    allow_law = law.allowance(_gauge(law, pt.space, fx, fl))
    law_margin = allow_law - defects
    law_ok = bool(np.all(law_margin >= 0))

    T = _frame_from(profile, frame, N)
    Ti = np.linalg.inv(T)
    decay = np.exp(m * (s[:-1] - s[1:]))
    Mn = np.einsum("ij,kjl,lm->kim", Ti, A, T) * decay[:, None, None]
    # order frame directions: contracting ones first
    with np.errstate(divide="ignore"):
        rates = np.mean(np.log(np.abs(np.einsum("kii->ki", Mn)) + 1e-300), axis=0)
    order = np.argsort(rates >= 0, kind="stable")
    T = T[:, order]
    Ti = np.linalg.inv(T)
    Mn = np.einsum("ij,kjl,lm->kim", Ti, A, T) * decay[:, None, None]
    s_dim = int(np.sum(rates < 0))

    # unit-constant data (Delta = 1): c1_k = T^-1 xi_k / r_{k+1}^m
    c1 = _signed_scale(xi @ Ti.T, -m * s[1:, None])
    w1 = _solve_blocks(Mn, c1, s_dim)
    resid = w1[1:] - (np.einsum("kij,kj->ki", Mn, w1[:-1]) - c1)
    scale = 1.0 + np.max(np.abs(w1)) + np.max(np.abs(c1))
    resid_rel = float(np.max(np.abs(resid)) / scale) if K else 0.0

    # displacements e_k = r_k^m T w1_k and the realized constant at the true orbit
    TW = w1 @ T.T
    E = _signed_scale(TW, m * s[:, None])
    if pt.space == "ball":
        u = directions(X)
        lz = _orbit_logr(s, u, E)
    else:
        lz = np.zeros(len(X))
    if np.any(~np.isfinite(lz)):
        return _invalid(X, s, law_margin, ["orbit leaves the ball interior"], pt, m)
    nrm = np.linalg.norm(TW, axis=-1)
    with np.errstate(divide="ignore"):
        ratio_k = np.where(nrm > 0, np.exp(np.log(np.where(nrm > 0, nrm, 1.0)) + m * (s - lz)), 0.0)
    realized = float(np.max(ratio_k))

    beta = 1.0 / _frame_scale(T)
    if compose is None:
        compose = 1
        for cand in range(1, 21):
            if _contraction(_compose_groups(Mn, np.zeros_like(c1), cand), s_dim) < 0.9:
                compose = cand
                break
        else:
            compose = 20
            flags.append("no composition length reaches contraction 0.9")
    groups1 = _compose_groups(Mn, c1, compose)
    floor = _covering_floor(groups1, s_dim, beta)
    if Delta is None:
        Delta = max(2.0 * realized, 1.1 * floor) if math.isfinite(floor) else 2.0 * realized
        if Delta == 0:
            Delta = 1.0
    groups = [(st, Mg, cg / Delta) for st, Mg, cg in groups1]
    slack = _covering(groups, s_dim, beta)
    covering_ok = bool(np.all(slack >= 0))

    # cross-check with box refinement on the first steps
    refine_ok, refine_info = True, {}
    D = min(K, depth)
    if D > 0 and N <= 3 and level > 0:
        Mr, cr = Mn[:D], c1[:D] / Delta

        def g(k, V):
            return ((V * beta) @ Mr[k].T - cr[k]) / beta

        try:
            lev = level if N == 1 else min(level, 8 if N == 2 else 5)
            rr = conley_refine(g, BoxComplex.unit(N, s_dim, lev), D, lev, normalized=True,
                               s_offset=w1[0, :s_dim] / Delta / beta if s_dim else None)
            v0 = w1[0] / Delta / beta
            dist = float(np.min(np.max(np.abs(rr.centers - v0), axis=1)))
            refine_ok = dist <= rr.side
            refine_info = {"refine_distance": dist, "refine_side": rr.side,
                           "refine_cubes": int(rr.alive.sum()), "vertical_ok": rr.vertical_ok}
        except (BoxAlignmentError, RefineError) as exc:
            refine_ok = False
            refine_info = {"refine_error": str(exc)}

    log_allow = math.log(Delta) + m * lz
    allow = np.exp(log_allow)
    err_norm = np.linalg.norm(E, axis=-1)
    margins = allow - err_norm
    norm_margins = 1.0 - ratio_k / Delta
    if not law_ok:
        flags.append("pseudotrajectory violates its law")
    if resid_rel > RESIDUAL_TOL:
        flags.append("linear solve residual above tolerance")
    if not covering_ok:
        flags.append("covering inequalities fail")
    if not refine_ok:
        flags.append("box refinement disagrees")
    valid = law_ok and resid_rel <= RESIDUAL_TOL and covering_ok and refine_ok and realized <= Delta
    if not law_ok:
        margins = law_margin
    q, ql = _apply(X[0], s[0], E[0], pt.space)

    surf = None
    if surface_samples and 0 < s_dim:
        pts = []
        for off in np.linspace(-0.5, 0.5, surface_samples):
            o = np.full(s_dim, off * beta * Delta)
            wo = _solve_blocks(Mn, c1, s_dim, offset=o)
            Eo = _signed_scale(wo @ T.T, m * s[:, None])
            pts.append(_apply(X[0], s[0], Eo[0], pt.space)[0])
        surf = np.array(pts)

    diag = {
        "realized_Delta": realized,
        "residual": resid_rel,
        "compose": compose,
        "covering_slack": float(np.min(slack)) if slack.size else math.inf,
        "covering_floor": floor,
        "s_dim": s_dim,
        "u_dim": N - s_dim,
        "frame_condition": float(np.linalg.cond(T)),
        "box_scale": beta,
        "orbit_logr": lz,
        "sample_states": X,
        "sample_logr": s,
        "law_worst_margin": float(np.min(law_margin)) if K else math.inf,
        "law_worst_k": int(np.argmin(law_margin)) if K else 0,
        **refine_info,
    }
    env = {"m": m, "Delta": Delta, "realized_Delta": realized}
    return ShadowResult(q, env, margins, bool(valid), E, allow, surf, diag, tuple(flags), ql, pt.space)


def _apply(x, s, e, space):
    if space == "ball":
        xq, lq = _ball_add(x, s, e)
        return xq, float(lq)
    return x + e, None


def _invalid(X, s, margins, flags, pt, m):
    return ShadowResult(X[0].copy(), {"m": m}, margins, False, None, None, None,
                        {"sample_states": X, "sample_logr": s}, tuple(flags), None, pt.space)


# ---------------------------------------------------------------- flows

def _integer_indices(times):
    idx = [j for j, t in enumerate(times) if abs(t - round(t)) < 1e-9]
    ints = np.round(times[idx]).astype(int)
    if len(idx) < 2 or ints[0] != 0 or np.any(np.diff(ints) != 1):
        raise ValueError("flow samples must include consecutive integer times from 0")
    return np.array(idx)


def shadow_search_flow(
    flow,
    pt: PseudoTrajectory,
    m: float,
    Delta: float | None = None,
    window: ExponentWindow | None = None,
    **kwargs,
) -> ShadowResult:
    """Shadowing for a flow pseudotrajectory through its time-one map.

    The discrete search runs on integer-time samples; the continuous envelope
    is then checked at every sample against the largest allowance over its
    unit window, with orbit points and derivatives from a fresh integration
    at four times finer step.  The reported constant carries the factor
    (1 + H), H the largest derivative norm of the flow over a unit window.
    """
    if pt.space != "ball" or pt.time_kind != "flow":
        raise ValueError("flow search needs ball flow samples")
    flags = []
    if window is not None and not window.admits(m):
        flags.append("outside certified window")
    idx = _integer_indices(pt.times)
    sub = PseudoTrajectory(np.arange(len(idx), dtype=float), pt.states[idx], pt.law, "ball",
                           "map", pt.gap_log[idx])
    res = shadow_search_map(flow, sub, m, Delta=None, **kwargs)
    fine = flow.refined(4) if hasattr(flow, "refined") else flow
    X, L = pt.states, pt.gap_log
    K = len(idx)
    k_of = np.clip(np.searchsorted(pt.times[idx], pt.times, side="right") - 1, 0, K - 1)
    tau = pt.times - pt.times[idx][k_of]
    Xk, Lk, Ek = sub.states[k_of], sub.gap_log[k_of], res.errors[k_of]
    E = np.zeros_like(X)
    lz = np.zeros(len(X))
    H = 0.0
    for tv in np.unique(np.round(tau, 12)):
        sel = np.abs(tau - tv) < 1e-9
        Px, Pl, J = fine.flow_ball(float(tv), Xk[sel], Lk[sel], jacobian=True)
        H = max(H, float(np.max(np.linalg.norm(J, ord=2, axis=(1, 2)))))
        prop = np.einsum("kij,kj->ki", J, Ek[sel])
        E[sel] = ball_difference(Px, Pl, X[sel], L[sel]) + prop
        lz[sel] = _orbit_logr(Pl, directions(Px), prop)
    if np.any(~np.isfinite(lz)):
        flags.append("orbit leaves the ball interior")
        return ShadowResult(res.q, dict(res.envelope), res.margins, False, E, None, None,
                            res.diagnostics, tuple(res.flags) + tuple(flags), res.q_logr, "ball")
    # largest allowance over each unit window [k, k+1]
    win_max = np.full(K, -np.inf)
    for k in range(K):
        sel = (pt.times >= k - 1e-12) & (pt.times <= k + 1 + 1e-12)
        win_max[k] = np.max(lz[sel])
    lwin = win_max[k_of]
    nrm = np.linalg.norm(E, axis=-1)
    with np.errstate(divide="ignore"):
        ratio = np.where(nrm > 0, np.exp(np.log(np.where(nrm > 0, nrm, 1.0)) - m * lwin), 0.0)
    realized = float(np.max(ratio))
    Delta_flow = (1.0 + H) * res.envelope["Delta"] if Delta is None else Delta
    allow = np.exp(math.log(Delta_flow) + m * lwin)
    margins = allow - nrm
    ok = bool(res.valid and realized <= Delta_flow)
    if res.valid and not ok:
        bad = int(np.argmax(ratio))
        flags.append(f"continuous envelope fails at t={pt.times[bad]:.6g}")
    env = {"m": m, "Delta": Delta_flow, "realized_Delta": realized,
           "map_Delta": res.envelope["Delta"], "H": H}
    diag = dict(res.diagnostics)
    diag.update({"orbit_logr": lz, "sample_states": X, "sample_logr": L, "times": pt.times})
    return ShadowResult(res.q, env, margins, ok, E, allow, res.surface_sample, diag,
                        tuple(res.flags) + tuple(flags), res.q_logr, "ball")


# ---------------------------------------------------------------- decompactification

def _log_euclid_norm(logr):
    r = np.exp(logr)
    return np.log1p(-r) - 0.5 * (logr + np.log(2.0 - r))


def shadow_transfer_noncompact(result: ShadowResult, cf: CompactifiedField, mbar: float) -> ShadowResult:
    """Carry a ball shadowing result to R^N with envelope Delta_E |x|^(3 - 2 mbar).

    Displacements are pushed through the derivative of the inverse
    compactification at each sample (accurate where the displacement is small
    against the boundary distance).  The envelope uses the larger allowance at
    the two ends of every unit window; the measured exponent is the
    least-squares slope of log|error| against log|x| over nonzero errors.
    """
    if result.errors is None or not result.valid:
        raise ValueError("transfer needs a valid ball shadowing result")
    X = result.diagnostics["sample_states"]
    L = result.diagnostics["sample_logr"]
    lz = result.diagnostics["orbit_logr"]
    if np.any(~np.isfinite(lz)) or np.any(lz >= 0):
        raise ValueError("decompactified orbit blows up before the pseudotrajectory ends")
    E = decompactify_error(X, L, result.errors)
    p = 3.0 - 2.0 * mbar
    log_norm_orbit = _log_euclid_norm(lz)
    log_norm = _log_euclid_norm(L)
    if "times" in result.diagnostics:
        times = result.diagnostics["times"]
        kk = np.floor(times + 1e-12).astype(int)
        env_log = np.empty(len(times))
        for k in np.unique(kk):
            sel = (times >= k - 1e-12) & (times <= k + 1 + 1e-12)
            env_log[kk == k] = np.max(p * log_norm_orbit[sel])
    else:
        nxt = np.concatenate([log_norm_orbit[1:], log_norm_orbit[-1:]])
        env_log = np.maximum(p * log_norm_orbit, p * nxt)
    nrm = np.linalg.norm(E, axis=-1)
    nz = nrm > 0
    with np.errstate(divide="ignore"):
        ratio = np.where(nz, np.exp(np.log(np.where(nz, nrm, 1.0)) - env_log), 0.0)
    Delta_E = float(np.max(ratio)) if ratio.size else 0.0
    slope, half = math.nan, math.nan
    if nz.sum() >= 3:
        xs, ys = log_norm[nz], np.log(nrm[nz])
        A = np.vstack([xs, np.ones_like(xs)]).T
        coef, res, *_ = np.linalg.lstsq(A, ys, rcond=None)
        slope = float(coef[0])
        dof = max(1, xs.size - 2)
        s2 = float(np.sum((ys - A @ coef) ** 2)) / dof
        sxx = float(np.sum((xs - xs.mean()) ** 2))
        half = 1.96 * math.sqrt(s2 / sxx) if sxx > 0 else math.inf
    allow = Delta_E * np.exp(env_log)
    margins = allow - nrm
    u = directions(result.q)
    if result.q_logr is not None:
        q = u * math.exp(float(_log_euclid_norm(np.array(result.q_logr))))
    else:
        q = result.q
    env = {"mbar": mbar, "exponent": p, "Delta_E": Delta_E, "measured_slope": slope,
           "slope_halfwidth": half}
    diag = {"euclid_log_norm": log_norm, "ball_result": result.envelope}
    return ShadowResult(q, env, margins, True, E, allow, None, diag, result.flags, None, "euclidean")


# ---------------------------------------------------------------- weighted shadowing

def weighted_objective(f, X, q, C: float) -> float:
    """sum_k C^k |x_k - f^k(q)| over the samples."""
    z = np.asarray(q, dtype=float)
    total = 0.0
    for k in range(len(X)):
        total += C**k * float(np.linalg.norm(X[k] - z))
        z = f.step(z[None])[0]
    return total


def _orbit_and_derivs(f, q, K):
    N = q.shape[0]
    Z = np.empty((K, N))
    D = np.empty((K, N, N))
    z, Dk = q.copy(), np.eye(N)
    for k in range(K):
        Z[k], D[k] = z, Dk
        J = f.jacobian(z[None])[0]
        Dk = J @ Dk
        z = f.step(z[None])[0]
    return Z, D


def _weighted_median(points, weights):
    order = np.argsort(points, kind="stable")
    p, w = points[order], weights[order]
    cum = np.cumsum(w)
    i = int(np.searchsorted(cum, 0.5 * cum[-1]))
    return float(p[min(i, len(p) - 1)])


def _l1_step(R, D, W, iters=200):
    """argmin_delta sum_k W_k |R_k - D_k delta| (weighted median in 1-D, Weiszfeld otherwise)."""
    N = R.shape[1]
    if N == 1:
        d = D[:, 0, 0]
        ok = d != 0
        if not ok.any():
            return np.zeros(1)
        return np.array([_weighted_median(R[ok, 0] / d[ok], W[ok] * np.abs(d[ok]))])
    delta = np.linalg.lstsq(
        (np.sqrt(W)[:, None, None] * D).reshape(-1, N), (np.sqrt(W)[:, None] * R).reshape(-1), rcond=None
    )[0]
    for _ in range(iters):
        res = np.linalg.norm(R - np.einsum("kij,j->ki", D, delta), axis=-1)
        wt = W / np.maximum(res, 1e-300 + 1e-14 * np.max(res))
        H = np.einsum("k,kji,kjl->il", wt, D, D)
        g = np.einsum("k,kji,kj->i", wt, D, R)
        new = np.linalg.solve(H, g)
        if np.linalg.norm(new - delta) <= 1e-15 * (1 + np.linalg.norm(delta)):
            delta = new
            break
        delta = new
    return delta


def _derivative_floor(J, Jinv):
    return float(max(np.max(np.linalg.norm(J, ord=2, axis=(1, 2))),
                     np.max(np.linalg.norm(Jinv, ord=2, axis=(1, 2)))))


class _TimeOne:
    """Time-one map of a Euclidean flow with its derivative."""

    space = "euclidean"

    def __init__(self, flow):
        self.flow_obj = flow

    def step(self, x):
        return self.flow_obj.flow(1.0, x)

    def jacobian(self, x):
        return _flow_jacobian(self.flow_obj, 1.0, x)

    def inverse_jacobian(self, x):
        return _flow_jacobian(self.flow_obj, -1.0, self.step(x))


class _BallStep:
    """Compactified time-one map used as a map on ball coordinates."""

    space = "euclidean"

    def __init__(self, ballflow, tau=1.0):
        self.bf, self.tau = ballflow, tau

    def step(self, x):
        x = np.atleast_2d(x)
        return self.bf.advance(x, log_gap(x), self.tau)[0]

    def jacobian(self, x):
        x = np.atleast_2d(x)
        return self.bf.advance(x, log_gap(x), self.tau, jacobian=True)[2]

    def inverse_jacobian(self, x):
        y = self.step(x)
        return self.bf.advance(y, log_gap(y), -self.tau, jacobian=True)[2]

    def flow(self, tau, x):
        x = np.atleast_2d(x)
        return self.bf.advance(x, log_gap(x), tau)[0]


def _flow_jacobian(flow, tau, X, h=1e-6):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if hasattr(flow, "flow_jacobian"):
        return np.asarray(flow.flow_jacobian(tau, X))
    N = X.shape[1]
    J = np.empty((X.shape[0], N, N))
    for j in range(N):
        e = np.zeros(N)
        e[j] = h
        J[:, :, j] = (flow.flow(tau, X + e) - flow.flow(tau, X - e)) / (2 * h)
    return J


def _solve_discrete(f, X, C, d, tail_ratio, floor_J=None, floor_Jinv=None):
    K, N = X.shape
    J = f.jacobian(X) if floor_J is None else floor_J
    if floor_Jinv is None:
        Jinv = f.inverse_jacobian(X) if hasattr(f, "inverse_jacobian") else np.linalg.inv(J)
    else:
        Jinv = floor_Jinv
    floor = _derivative_floor(J, Jinv)
    if C < floor * (1 - 1e-12):
        raise ValueError(f"weight base below derivative-norm floor ({C:.6g} < {floor:.6g})")
    W = np.exp(np.arange(K) * math.log(C))
    q = X[0].copy()

    def objective(Z):
        return float(np.sum(W * np.linalg.norm(X - Z, axis=-1)))

    Z, D = _orbit_and_derivs(f, q, K)
    obj = objective(Z)
    it = 0
    for it in range(1, POLISH_MAX_ITER + 1):
        delta = _l1_step(X - Z, D, W)
        cand = q + delta
        Zc, Dc = _orbit_and_derivs(f, cand, K)
        oc = objective(Zc)
        if oc > obj:
            # halve until the objective decreases
            t = 0.5
            while t > 1e-8:
                cand = q + t * delta
                Zc, Dc = _orbit_and_derivs(f, cand, K)
                oc = objective(Zc)
                if oc <= obj:
                    break
                t *= 0.5
            if oc > obj:
                break
        dec = obj - oc
        q, Z, D, obj = cand, Zc, Dc, oc
        if dec <= POLISH_RTOL * max(obj, 1e-300):
            break
    terms = W * np.linalg.norm(X - Z, axis=-1)
    tail = float(terms[-1]) * tail_ratio / (1 - tail_ratio)
    return q, Z, terms, tail, floor, it


def weighted_shadow_solve(
    f,
    pt: PseudoTrajectory,
    C: float,
    cf: CompactifiedField | None = None,
) -> ShadowResult:
    """Weighted shadowing point minimizing sum_k C^k |x_k - f^k(q)|.

    Maps use the samples directly.  Flows are reduced to integer times and
    solved with the time-one map; the continuous integral of C^t |Phi(t, q) -
    Psi(t)| is then taken by the trapezoid rule with a geometric tail.  For
    ``noncompact_weighted`` laws (``cf`` required) the problem is solved on the
    compactified flow with weight C^(5/2) per unit time, mapped back through
    the inverse compactification and re-verified with weight C^t on raw
    Euclidean data.
    """
    law = pt.law
    if law.kind not in ("weighted", "noncompact_weighted"):
        raise ValueError("weighted solver needs a weighted law")
    d = law.delta
    rep = check_pseudo(pt, f if pt.time_kind == "map" else f)
    if rep.integral_value is not None and not math.isfinite(rep.integral_value):
        raise ValueError("objective diverges: defects not summable under the weight")
    if law.kind == "noncompact_weighted":
        if cf is None:
            raise ValueError("noncompact weighted solve needs the compactified field")
        return _pipeline_noncompact(f, pt, C, cf, rep)
    if pt.time_kind == "map":
        q, Z, terms, tail, floor, it = _solve_discrete(f, pt.states, C, d, law.tail_ratio)
        total = float(np.sum(terms)) + tail
        L = _ratio(total, d)
        allow = L * d * np.exp(-np.arange(len(terms)) * math.log(C))
        margins = allow - np.linalg.norm(pt.states - Z, axis=-1)
        env = {"C": C, "L": L, "d": d, "weighted_error": total, "tail": tail, "check": rep.integral_value}
        diag = {"iterations": it, "derivative_floor": floor}
        return ShadowResult(q, env, margins, bool(math.isfinite(total)), Z - pt.states, allow,
                            None, diag, (), None, "euclidean")
    return _weighted_flow(f, pt, C, rep)


def _ratio(total, d):
    if total == 0:
        return 0.0
    return total / d if d > 0 else math.inf


def _flow_floor(flow, X, ngrid=8):
    best = 0.0
    for tau in np.linspace(-1, 1, 2 * ngrid + 1):
        if tau == 0:
            continue
        J = _flow_jacobian(flow, float(tau), X)
        best = max(best, float(np.max(np.linalg.norm(J, ord=2, axis=(1, 2)))))
    return best


def _continuous_integral(flow, pt, q, C, tail_ratio, weight_scale=1.0):
    """Trapezoid integral of C^(scale t) |Phi(t, q) - Psi(t)| plus the geometric tail."""
    times = pt.times
    Z = np.empty_like(pt.states)
    z = np.asarray(q, dtype=float)[None]
    Z[0] = z[0]
    for j in range(1, len(times)):
        z = flow.flow(float(times[j] - times[j - 1]), z)
        Z[j] = z[0]
    err = np.linalg.norm(Z - pt.states, axis=-1)
    w = np.exp(weight_scale * times * math.log(C))
    terms = w * err
    body = float(np.sum(0.5 * np.diff(times) * (terms[1:] + terms[:-1])))
    tail = float(terms[-1]) / (-math.log(tail_ratio))
    return body + tail, Z, terms


def _weighted_flow(flow, pt, C, rep):
    law = pt.law
    idx = _integer_indices(pt.times)
    Xi = pt.states[idx]
    g = _TimeOne(flow)
    floor = _flow_floor(flow, Xi)
    if C < floor * (1 - 1e-12):
        raise ValueError(f"weight base below derivative-norm floor ({C:.6g} < {floor:.6g})")
    q, Z, terms, tail, _, it = _solve_discrete(g, Xi, C, law.delta, law.tail_ratio)
    integral, Zc, cterms = _continuous_integral(flow, pt, q, C, law.tail_ratio)
    L = _ratio(integral, law.delta)
    # the integral does not bound C^t |e(t)| pointwise; the sup is its own constant
    err = np.linalg.norm(Zc - pt.states, axis=-1)
    L_sup = _ratio(float(np.max(err * np.exp(pt.times * math.log(C)))), law.delta)
    allow = max(L, L_sup) * law.delta * np.exp(-pt.times * math.log(C))
    margins = allow - err
    env = {"C": C, "L": L, "L_sup": L_sup, "d": law.delta, "weighted_error": integral,
           "discrete_error": float(np.sum(terms)) + tail, "check": rep.integral_value}
    diag = {"iterations": it, "derivative_floor": floor}
    return ShadowResult(q, env, margins, bool(math.isfinite(integral)), Zc - pt.states, allow,
                        None, diag, (), None, "euclidean")


def _pipeline_noncompact(flow, pt, C, cf, rep):
    """Solve on the compactified flow with weight C^(5/2) and re-verify in R^N."""
    from .flow import BallFlow

    law = pt.law
    if pt.time_kind != "flow":
        raise ValueError("noncompact weighted solve needs flow samples")
    # compactified time of every sample: ds/dt = (1 + |x|^2)^e along the samples
    e = cf.rescale_exponent
    dens = (1.0 + np.sum(pt.states**2, axis=-1)) ** e
    s_of_t = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(pt.times) * (dens[1:] + dens[:-1]))])
    n_int = int(math.floor(s_of_t[-1] + 1e-9)) + 1
    # sample-and-hold lookup at integer compact times
    hold = np.clip(np.searchsorted(s_of_t, np.arange(n_int) + 1e-9, side="right") - 1, 0, len(s_of_t) - 1)
    Xb = theta(pt.states[hold])
    ball = _BallStep(BallFlow(cf))
    Cb = C**2.5
    q_b, Zb, terms, tail, floor, it = _solve_discrete(ball, Xb, Cb, law.delta, law.tail_ratio)
    L_ball = _ratio(float(np.sum(terms)) + tail, law.delta)
    # back to R^N: Euclidean q and the C^t weighted integral on raw samples
    nq = float(np.linalg.norm(q_b))
    q = q_b / math.sqrt(1.0 - nq * nq)
    integral, Z, cterms = _continuous_integral(flow, pt, q, C, law.tail_ratio)
    L = _ratio(integral, law.delta)
    # the integral does not bound C^t |e(t)| pointwise; the sup is its own constant
    err = np.linalg.norm(Z - pt.states, axis=-1)
    L_sup = _ratio(float(np.max(err * np.exp(pt.times * math.log(C)))), law.delta)
    allow = max(L, L_sup) * law.delta * np.exp(-pt.times * math.log(C))
    margins = allow - err
    env = {"C": C, "L": L, "L_sup": L_sup, "d": law.delta, "weighted_error": integral, "ball_weight": Cb,
           "ball_L": L_ball, "check": rep.integral_value}
    diag = {"iterations": it, "derivative_floor": floor, "ball_q": q_b, "compact_times": s_of_t}
    return ShadowResult(q, env, margins, bool(math.isfinite(integral)), Z - pt.states, allow,
                        None, diag, (), None, "euclidean")
