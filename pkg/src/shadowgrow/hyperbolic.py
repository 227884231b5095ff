"""Boundary fixed points of compactified fields, their spectra, and exponent windows."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .compactify import CompactifiedField

__all__ = [
    "HyperbolicityError",
    "HyperbolicProfile",
    "ExponentWindow",
    "boundary_fixed_points",
    "spectral_profile",
    "admissible_exponents",
    "sphere_seeds",
]

HYPERBOLIC_TOL = 1e-8
RESIDUAL_TOL = 1e-10
DEDUP_TOL = 1e-6
MERGE_RADIUS = 1e-2
FD_STEP = 1e-6


class HyperbolicityError(ValueError):
    pass


@dataclass(frozen=True)
class HyperbolicProfile:
    """Spectral data at a boundary fixed point.

    Flow profiles hold real exponents; map profiles hold positive multipliers
    (``exp(rate * tau)``).  The stable rates include the transversal rate
    whenever it is contracting.
    """

    point: np.ndarray
    mu1: float
    mu2: float
    lambda_s_min: float | None
    lambda_s_max: float | None
    lambda_u_min: float | None
    lambda_u_max: float | None
    case: Literal["4a", "4b"]
    transversal_ok: bool
    kind: Literal["flow", "map"] = "flow"
    transversal_direction: np.ndarray | None = None
    tangent_rates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    jacobian: np.ndarray | None = None

    def as_map(self, tau: float = 1.0) -> "HyperbolicProfile":
        """Multipliers of the time-``tau`` map."""
        if self.kind == "map":
            return self
        ex = lambda v: None if v is None else math.exp(v * tau)
        return HyperbolicProfile(
            self.point, ex(self.mu1), ex(self.mu2), ex(self.lambda_s_min), ex(self.lambda_s_max),
            ex(self.lambda_u_min), ex(self.lambda_u_max), self.case, self.transversal_ok, "map",
            self.transversal_direction, np.exp(self.tangent_rates * tau), self.jacobian,
        )

    def as_flow(self, tau: float = 1.0) -> "HyperbolicProfile":
        if self.kind == "flow":
            return self
        lg = lambda v: None if v is None else math.log(v) / tau
        return HyperbolicProfile(
            self.point, lg(self.mu1), lg(self.mu2), lg(self.lambda_s_min), lg(self.lambda_s_max),
            lg(self.lambda_u_min), lg(self.lambda_u_max), self.case, self.transversal_ok, "flow",
            self.transversal_direction, np.log(self.tangent_rates) / tau, self.jacobian,
        )

    def scaled(self, factor: float) -> "HyperbolicProfile":
        """Flow profile with time rescaled (all rates multiplied by ``factor``)."""
        if self.kind != "flow" or factor <= 0:
            raise ValueError("rate rescaling needs a flow profile and a positive factor")
        sc = lambda v: None if v is None else v * factor
        return HyperbolicProfile(
            self.point, sc(self.mu1), sc(self.mu2), sc(self.lambda_s_min), sc(self.lambda_s_max),
            sc(self.lambda_u_min), sc(self.lambda_u_max), self.case, self.transversal_ok, "flow",
            self.transversal_direction, self.tangent_rates * factor, self.jacobian,
        )


@dataclass(frozen=True)
class ExponentWindow:
    """Admissible shadowing exponents: m > bound (lower) or 0 < m < bound (upper)."""

    m_bound: float
    bound_kind: Literal["lower", "upper"]
    decompactified_exponent: float | None = None
    n0: float | None = None
    m: float | None = None
    alternate_bound: float | None = None

    def admits(self, m: float) -> bool:
        if self.bound_kind == "lower":
            return m > self.m_bound
        return 0 < m < self.m_bound


# ---------------------------------------------------------------- fixed points

def sphere_seeds(dim: int, density: int = 64) -> np.ndarray:
    """Starting guesses on the unit sphere: +-1, an angle grid, or a Fibonacci lattice."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        a = 2 * np.pi * np.arange(density) / density
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    if dim == 3:
        n = max(density, 8) * 4
        i = np.arange(n) + 0.5
        z = 1 - 2 * i / n
        phi = np.pi * (1 + 5**0.5) * i
        rr = np.sqrt(1 - z * z)
        return np.stack([rr * np.cos(phi), rr * np.sin(phi), z], axis=1)
    raise ValueError("default seeds cover N <= 3; pass seeds explicitly")


def _boundary_residual(cf, x):
    return cf.boundary(x[None])[0]


def _newton_sphere(cf, x, iters=60):
    """Gauss-Newton on [(I - x x^T) X_top(x); |x|^2 - 1] = 0."""
    for _ in range(iters):
        F = _boundary_residual(cf, x)
        if np.linalg.norm(F) < RESIDUAL_TOL * 1e-3:
            break
        J = cf.boundary_jacobian(x[None])[0]
        A = np.vstack([J, 2 * x[None]])
        b = np.concatenate([-F, [1 - x @ x]])
        dx = np.linalg.lstsq(A, b, rcond=None)[0]
        x = x + dx
        x = x / np.linalg.norm(x)
        if np.linalg.norm(dx) < 1e-15:
            break
    return x, float(np.linalg.norm(_boundary_residual(cf, x)))


def boundary_fixed_points(cf: CompactifiedField, density: int = 64, seeds=None) -> list[np.ndarray]:
    """Zeros of the tangential boundary field, refined to residual < 1e-10."""
    N = cf.dimension
    S = sphere_seeds(N, density) if seeds is None else np.atleast_2d(np.asarray(seeds, float))
    if N == 1:
        # the tangent space of S^0 is trivial: both points are fixed
        return [np.array([1.0]), np.array([-1.0])]
    found: list[tuple[np.ndarray, float]] = []
    for s in S:
        s = s / np.linalg.norm(s)
        x, res = _newton_sphere(cf, s)
        if not np.all(np.isfinite(x)) or res >= RESIDUAL_TOL:
            if np.all(np.isfinite(x)) and res < 1e-6:
                warnings.warn(f"Newton stalled at residual {res:.2e}; candidate dropped")
            continue
        for i, (y, ry) in enumerate(found):
            if _same_zero(cf, x, y):
                if res < ry:
                    found[i] = (x, res)
                break
        else:
            found.append((x, res))
    pts = [x for x, _ in found]
    pts.sort(key=lambda v: tuple(-v))
    return pts


def _same_zero(cf, x, y):
    """Candidates of one zero: coincident, or joined by a flat stretch.

    Newton lands anywhere in a ball of radius ~ residual^(1/k) around a zero
    of multiplicity k, so nearby candidates whose midpoint is also a zero
    are merged.
    """
    d = np.linalg.norm(x - y)
    if d <= DEDUP_TOL:
        return True
    if d > MERGE_RADIUS:
        return False
    mid = (x + y) / np.linalg.norm(x + y)
    return float(np.linalg.norm(_boundary_residual(cf, mid))) < RESIDUAL_TOL


# ---------------------------------------------------------------- spectra

def _fd_jacobian(cf, p, h=FD_STEP):
    N = p.shape[0]
    J = np.empty((N, N))
    for j in range(N):
        e = np.zeros(N)
        e[j] = h
        J[:, j] = (cf.boundary((p + e)[None])[0] - cf.boundary((p - e)[None])[0]) / (2 * h)
    return J


def spectral_profile(cf: CompactifiedField, p, analytic: bool = False) -> HyperbolicProfile:
    """Rates of the boundary-extended field at the boundary fixed point ``p``.

    The Jacobian is taken by central differences (step 1e-6) unless
    ``analytic`` is set.  The transversal direction is the eigenvector with the
    largest radial component; the remaining eigenvalues are the tangent rates.
    """
    p = np.asarray(p, dtype=float)
    res = np.linalg.norm(_boundary_residual(cf, p))
    if abs(np.linalg.norm(p) - 1) > 1e-10 or res > RESIDUAL_TOL:
        raise ValueError(f"not a boundary fixed point (residual {res:.2e})")
    J = cf.boundary_jacobian(p[None])[0] if analytic else _fd_jacobian(cf, p)
    w, V = np.linalg.eig(J)
    if np.linalg.cond(V) > 1e10:
        raise HyperbolicityError("non-hyperbolic boundary point: Jacobian not diagonalizable")
    # at a multiple zero the located point is only accurate to ~sqrt(residual),
    # and rates of that size cannot be told apart from zero
    zero_tol = max(HYPERBOLIC_TOL, 100.0 * math.sqrt(res * (1.0 + np.linalg.norm(J))))
    if np.any(np.abs(w.real) < zero_tol):
        raise HyperbolicityError("non-hyperbolic boundary point: eigenvalue with zero real part")
    Vn = V / np.linalg.norm(V, axis=0)
    radial = np.abs(p @ Vn)
    i = int(np.argmax(radial))
    transversal_ok = bool(radial[i] > 1e-6)
    if not transversal_ok:
        raise HyperbolicityError("no eigen-direction transversal to the boundary sphere")
    mu = float(w[i].real)
    tangent = np.delete(w.real, i)
    stable = [t for t in tangent if t < 0] + ([mu] if mu < 0 else [])
    unstable = [t for t in tangent if t > 0] + ([mu] if mu > 0 else [])
    same = np.all(np.sign(tangent) == np.sign(mu)) if tangent.size else True
    ell = np.real(Vn[:, i])
    return HyperbolicProfile(
        point=p,
        mu1=mu,
        mu2=mu,
        lambda_s_min=min(stable) if stable else None,
        lambda_s_max=max(stable) if stable else None,
        lambda_u_min=min(unstable) if unstable else None,
        lambda_u_max=max(unstable) if unstable else None,
        case="4a" if same else "4b",
        transversal_ok=transversal_ok,
        kind="flow",
        transversal_direction=ell / np.linalg.norm(ell),
        tangent_rates=np.sort(tangent),
        jacobian=J,
    )


def admissible_exponents(
    profile: HyperbolicProfile,
    dynamics_kind: Literal["map", "flow"] | None = None,
    m: float | None = None,
    nbar0: float | None = None,
) -> ExponentWindow:
    """Window of exponents m for nonuniform shadowing.

    Case 4a gives a lower bound (flow: lambda_s_min / mu2, map: ln of the
    multipliers), case 4b an upper bound (flow: lambda_s_max / mu1).  When the
    transversal rate is itself the extreme stable rate the bound equals 1 and
    is reported with a closed inequality.  With ``m`` the decompactified
    exponent 3 - 2m is reported; with ``nbar0`` the Euclidean defect exponent
    2 nbar0 - 3.
    """
    kind = dynamics_kind or profile.kind
    prof = profile.as_flow() if profile.kind == "map" else profile
    if not prof.transversal_ok:
        raise HyperbolicityError("no eigen-direction transversal to the boundary sphere")
    if prof.mu2 >= 0:
        raise HyperbolicityError("no admissible exponent: transversal direction not contracting")
    if profile.kind == "map" and profile.mu2 >= 1:
        raise HyperbolicityError("no admissible exponent: transversal direction not contracting")
    if prof.case == "4a":
        bound = prof.lambda_s_min / prof.mu2
        literal = prof.lambda_s_max / prof.mu2 if kind == "flow" else bound
        bk = "lower"
    else:
        bound = prof.lambda_s_max / prof.mu1
        literal = prof.lambda_s_min / prof.mu1 if kind == "flow" else bound
        bk = "upper"
    return ExponentWindow(
        m_bound=float(bound),
        bound_kind=bk,
        decompactified_exponent=None if m is None else 3 - 2 * m,
        n0=None if nbar0 is None else 2 * nbar0 - 3,
        m=m,
        alternate_bound=float(literal),
    )
