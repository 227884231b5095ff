"""Poincare compactification of polynomial fields onto the closed unit ball.

Points of the ball are carried in two ways.  Away from the sphere the plain
Cartesian vector is enough.  Near the sphere the distance to the boundary
``r = 1 - |xbar|`` is far smaller than the spacing of doubles around 1, so the
toolkit keeps ``logr = log r`` next to the Cartesian vector and treats it as
authoritative for the radius; the direction is always ``xbar / |xbar|``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Literal

import numpy as np

from .polyfield import PolynomialField, _power_products, eval_field, top_degree_part
from .polyfield import jacobian as _poly_jacobian

__all__ = [
    "BoundaryError",
    "CompactifiedField",
    "BallTransfer",
    "theta",
    "theta_inv",
    "theta_inv_gap",
    "compactified_field",
    "time_change",
    "ball_expand_bound",
    "ball_contract_bound",
    "directions",
    "log_gap",
    "ball_difference",
    "decompactify_error",
]


class BoundaryError(ValueError):
    """A point on (or beyond) the boundary sphere where none is allowed."""


def theta(x) -> np.ndarray:
    """Map R^N onto the open unit ball, x -> x / sqrt(|x|^2 + 1)."""
    x = np.asarray(x, dtype=float)
    return x / np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + 1.0)


def theta_inv(xbar) -> np.ndarray:
    """Inverse of :func:`theta` on the open ball."""
    xbar = np.asarray(xbar, dtype=float)
    nrm2 = np.sum(xbar * xbar, axis=-1, keepdims=True)
    if np.any(nrm2 >= 1.0):
        raise BoundaryError("boundary point has no finite preimage")
    return xbar / np.sqrt(1.0 - nrm2)


def theta_inv_gap(gap) -> np.ndarray:
    """Preimage radius |x| written through the boundary distance ybar = 1 - |xbar|.

    Uses |x| = sqrt(1/(2 ybar - ybar^2) - 1), the boundary-distance form of the
    radial inverse.
    """
    gap = np.asarray(gap, dtype=float)
    if np.any(gap <= 0):
        raise BoundaryError("boundary point has no finite preimage")
    return np.sqrt(1.0 / (2.0 * gap - gap * gap) - 1.0)


def directions(xbar) -> np.ndarray:
    """Unit directions xbar/|xbar|, with e_0 at the centre."""
    xbar = np.asarray(xbar, dtype=float)
    nrm = np.linalg.norm(xbar, axis=-1, keepdims=True)
    u = np.divide(xbar, nrm, out=np.zeros_like(xbar), where=nrm > 0)
    if np.any(nrm == 0):
        e0 = np.zeros(xbar.shape[-1])
        e0[0] = 1.0
        u = np.where(nrm > 0, u, e0)
    return u


def log_gap(xbar) -> np.ndarray:
    """log(1 - |xbar|) computed from the Cartesian vector (double accuracy)."""
    nrm = np.linalg.norm(np.asarray(xbar, dtype=float), axis=-1)
    with np.errstate(divide="ignore"):
        return np.log(np.maximum(1.0 - nrm, 0.0))


def ball_difference(xa, la, xb, lb) -> np.ndarray:
    """xa - xb for ball points carried as (xbar, logr) pairs.

    Written as (1 - r_b)(u_a - u_b) - r_b expm1(logr_a - logr_b) u_a, which keeps
    full relative accuracy in the radial part however close both points are
    to the sphere.
    """
    ua, ub = directions(xa), directions(xb)
    la = np.asarray(la, dtype=float)
    lb = np.asarray(lb, dtype=float)
    rb = np.exp(lb)[..., None]
    with np.errstate(invalid="ignore"):
        d = la - lb
    d = np.where(np.isfinite(d), d, 0.0)[..., None]
    return (1.0 - rb) * (ua - ub) - rb * np.expm1(d) * ua


def decompactify_error(xbar, logr, err) -> np.ndarray:
    """Push a small ball displacement at xbar through the inverse map.

    The derivative of the inverse map is (I + xbar xbar^T / rho^2) / rho with
    rho^2 = 1 - |xbar|^2 = r (2 - r): it scales the radial part by rho^-3 and
    the tangential part by rho^-1.
    """
    u = directions(xbar)
    err = np.asarray(err, dtype=float)
    logr = np.asarray(logr, dtype=float)
    r = np.exp(logr)
    log_rho = 0.5 * (logr + np.log(2.0 - r))
    rad = np.sum(u * err, axis=-1)
    tan = err - rad[..., None] * u
    # scale in log space: rho**-3 overflows long before the product does
    sign = np.sign(rad)
    with np.errstate(divide="ignore"):
        rad_part = sign * np.exp(np.log(np.abs(rad)) - 3.0 * log_rho)
    rad_part = np.where(rad == 0, 0.0, rad_part)
    return tan * np.exp(-log_rho)[..., None] + rad_part[..., None] * u


@dataclass(frozen=True)
class CompactifiedField:
    """Induced field on the closed ball.

    In the interior ``Xbar(xbar) = (I - xbar xbar^T) sum_j rho^(deg-j) X_j(xbar)``
    where ``rho^2 = 1 - |xbar|^2`` and ``X_j`` is the degree-j homogeneous part.
    This equals ``rho^(deg-1) DTheta X`` evaluated at the preimage, but it needs no
    preimage, so it stays accurate up to and on the sphere, where it reduces to
    ``(I - xbar xbar^T) X_top(xbar)``.
    """

    base: PolynomialField

    @property
    def dimension(self) -> int:
        return self.base.dimension

    @property
    def degree(self) -> int:
        return self.base.degree

    @property
    def rescale_exponent(self) -> float:
        """Exponent e in dt/ds = (1 - |xbar|^2)^e."""
        return 0.5 * (self.degree - 1)

    @cached_property
    def top(self) -> PolynomialField:
        return top_degree_part(self.base)

    @cached_property
    def _tables(self):
        exps, coef, degs = self.base._basis
        jexps, jcoef = self.base._jac_basis
        jdegs = jexps.sum(axis=1) + 1
        return exps, coef, degs, jexps, jcoef, jdegs

    # -- building blocks ------------------------------------------------
    def weighted_sum(self, xbar, rho) -> np.ndarray:
        """V = sum_j rho^(deg-j) X_j(xbar)."""
        exps, coef, degs, *_ = self._tables
        xbar = np.asarray(xbar, dtype=float)
        rho = np.asarray(rho, dtype=float)[..., None]
        w = rho ** (self.degree - degs)
        return (_power_products(xbar, exps) * w) @ coef.T

    def weighted_parts(self, xbar, rho):
        """V, its xbar-Jacobian at fixed rho, and dV/drho."""
        exps, coef, degs, jexps, jcoef, jdegs = self._tables
        n = self.dimension
        deg = self.degree
        xbar = np.asarray(xbar, dtype=float)
        rho = np.asarray(rho, dtype=float)[..., None]
        mono = _power_products(xbar, exps)
        V = (mono * rho ** (deg - degs)) @ coef.T
        k = deg - degs
        safe = np.where(k > 0, rho, 1.0) ** np.maximum(k - 1, 0)
        V_rho = (mono * np.where(k > 0, k * safe, 0.0)) @ coef.T
        jm = _power_products(xbar, jexps) * rho ** np.maximum(deg - jdegs, 0)
        DV = (jm @ jcoef.T).reshape(xbar.shape[:-1] + (n, n))
        return V, DV, V_rho

    def rho(self, xbar) -> np.ndarray:
        xbar = np.asarray(xbar, dtype=float)
        return np.sqrt(np.maximum(1.0 - np.sum(xbar * xbar, axis=-1), 0.0))

    # -- evaluation -----------------------------------------------------
    def __call__(self, xbar) -> np.ndarray:
        xbar = np.asarray(xbar, dtype=float)
        V = self.weighted_sum(xbar, self.rho(xbar))
        return V - xbar * np.sum(xbar * V, axis=-1, keepdims=True)

    def boundary(self, xbar) -> np.ndarray:
        """Boundary extension (I - xbar xbar^T) X_top(xbar), defined off the sphere too."""
        xbar = np.asarray(xbar, dtype=float)
        V = eval_field(self.top, xbar)
        return V - xbar * np.sum(xbar * V, axis=-1, keepdims=True)

    def jacobian(self, xbar) -> np.ndarray:
        """Cartesian Jacobian of Xbar at interior points."""
        xbar = np.asarray(xbar, dtype=float)
        rho = self.rho(xbar)
        V, DV, V_rho = self.weighted_parts(xbar, rho)
        if np.any(V_rho != 0):
            if np.any(rho == 0):
                raise BoundaryError("compactified field is not differentiable on the sphere")
            DV = DV - V_rho[..., :, None] * xbar[..., None, :] / rho[..., None, None]
        return _project_jacobian(xbar, V, DV)

    def boundary_jacobian(self, xbar) -> np.ndarray:
        """Exact Jacobian of the boundary extension."""
        xbar = np.asarray(xbar, dtype=float)
        V = eval_field(self.top, xbar)
        DV = _poly_jacobian(self.top, xbar)
        return _project_jacobian(xbar, V, DV)

    # -- polar chart: state (u, s) with xbar = (1 - e^s) u --------------
    def polar_rhs(self, u, s):
        """Right-hand side (du/dt, ds/dt) in the chart s = log(1 - |xbar|)."""
        u = np.asarray(u, dtype=float)
        s = np.asarray(s, dtype=float)
        r = np.exp(s)
        rho = np.exp(0.5 * s) * np.sqrt(2.0 - r)
        V = self.weighted_sum((1.0 - r)[..., None] * u, rho)
        a = np.sum(u * V, axis=-1)
        ds = -(2.0 - r) * a
        du = (V - u * a[..., None]) / (1.0 - r)[..., None]
        return du, ds

    def polar_jacobian(self, u, s):
        """Derivative of :meth:`polar_rhs` in ambient (u, s) coordinates, shape (..., N+1, N+1)."""
        u = np.asarray(u, dtype=float)
        s = np.asarray(s, dtype=float)
        n = self.dimension
        r = np.exp(s)
        q = 1.0 - r
        rho = np.exp(0.5 * s) * np.sqrt(2.0 - r)
        V, DV, V_rho = self.weighted_parts(q[..., None] * u, rho)
        drho_ds = np.exp(0.5 * s) * q / np.sqrt(2.0 - r)
        dV_ds = -r[..., None] * np.einsum("...ij,...j->...i", DV, u) + V_rho * drho_ds[..., None]
        dV_du = q[..., None, None] * DV
        a = np.sum(u * V, axis=-1)
        da_ds = np.sum(u * dV_ds, axis=-1)
        da_du = V + np.einsum("...i,...ij->...j", u, dV_du)
        J = np.zeros(u.shape[:-1] + (n + 1, n + 1))
        eye = np.eye(n)
        J[..., :n, :n] = (
            dV_du - a[..., None, None] * eye - u[..., :, None] * da_du[..., None, :]
        ) / q[..., None, None]
        J[..., :n, n] = (dV_ds - u * da_ds[..., None]) / q[..., None] + (
            V - u * a[..., None]
        ) * (r / q**2)[..., None]
        J[..., n, :n] = -(2.0 - r)[..., None] * da_du
        J[..., n, n] = r * a - (2.0 - r) * da_ds
        return J


def _project_jacobian(xbar, V, DV):
    n = xbar.shape[-1]
    eye = np.eye(n)
    P = eye - xbar[..., :, None] * xbar[..., None, :]
    xv = np.sum(xbar * V, axis=-1)
    return P @ DV - xv[..., None, None] * eye - xbar[..., :, None] * V[..., None, :]


def compactified_field(field: PolynomialField) -> CompactifiedField:
    """Compactified field of a polynomial system with the classical time rescale."""
    return CompactifiedField(field)


def time_change(
    compact_traj,
    cf: CompactifiedField,
    direction: Literal["s_to_t", "t_to_s"] = "s_to_t",
    nodes: int = 5,
):
    """Original time along a sampled ball trajectory.

    ``dt/ds = (1 - |xbar(s)|^2)^((deg-1)/2)`` is integrated with Gauss-Legendre
    quadrature on every sample interval, reading intermediate states from the
    trajectory's dense output.  Returns ``(s, t)`` for ``s_to_t`` or ``(t, s)``
    for ``t_to_s`` (the same graph with axes swapped).
    """
    s = np.asarray(compact_traj.times, dtype=float)
    states = np.asarray(compact_traj.states, dtype=float)
    if np.any(np.sum(states * states, axis=-1) >= 1.0):
        raise BoundaryError("time change degenerates at boundary")
    e = cf.rescale_exponent
    if e == 0:
        t = s - s[0]
    else:
        gx, gw = np.polynomial.legendre.leggauss(nodes)
        h = np.diff(s)
        mids = 0.5 * (s[1:] + s[:-1])
        pts = mids[:, None] + 0.5 * h[:, None] * gx[None, :]
        vals = compact_traj(pts.ravel())
        nrm2 = np.sum(vals * vals, axis=-1).reshape(pts.shape)
        if np.any(nrm2 >= 1.0):
            raise BoundaryError("time change degenerates at boundary")
        dens = (1.0 - nrm2) ** e
        incr = 0.5 * h * (dens @ gw)
        t = np.concatenate([[0.0], np.cumsum(incr)])
    if direction == "s_to_t":
        return s, t
    if direction == "t_to_s":
        return t, s
    raise ValueError(f"unknown direction {direction!r}")


@dataclass(frozen=True)
class BallTransfer:
    """Exact radial widths of a ball carried through the compactification."""

    center_norm: float
    input_radius: float
    output_radius: float
    direction: Literal["decompactify", "compactify"]

    @property
    def ratio(self) -> float:
        return self.output_radius / self.input_radius if self.input_radius > 0 else np.nan


def _z_of_gap(gap):
    # |x| as a function of the boundary distance, accurate for tiny gaps
    return (1.0 - gap) / np.sqrt(gap * (2.0 - gap))


def ball_expand_bound(xbar, radius: float, gap: float | None = None) -> BallTransfer:
    """Half-width of the preimage of the ball U(radius, xbar) along its radius.

    The ball must stay off the sphere.  ``gap`` may carry 1 - |xbar| when it
    is known more accurately than the Cartesian vector allows.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if gap is None:
        gap = 1.0 - float(np.linalg.norm(np.atleast_1d(np.asarray(xbar, dtype=float))))
    if radius >= gap:
        raise BoundaryError("ball touches the boundary sphere")
    if radius == 0:
        return BallTransfer(gap, 0.0, 0.0, "decompactify")
    z0 = _z_of_gap(gap)
    z_out = _z_of_gap(gap - radius)
    zbar = 1.0 - gap
    if zbar - radius >= 0:
        z_in = _z_of_gap(gap + radius)
    else:
        lo = zbar - radius
        z_in = lo / np.sqrt(1.0 - lo * lo)
    R = max(abs(z_out - z0), abs(z0 - z_in))
    return BallTransfer(gap, float(radius), float(R), "decompactify")


def ball_contract_bound(x, radius: float) -> BallTransfer:
    """Half-width of the image of the ball U(radius, x) along its radius."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    z = float(np.linalg.norm(np.atleast_1d(np.asarray(x, dtype=float))))
    if radius == 0:
        return BallTransfer(z, 0.0, 0.0, "compactify")

    def zbar(v):
        return v / np.sqrt(1.0 + v * v)

    # the difference z/sqrt(1+z^2) - zbar(z) is formed from the gap form for large z
    def gap(v):
        return 1.0 / (np.sqrt(1.0 + v * v) * (np.sqrt(1.0 + v * v) + v))

    c = zbar(z)
    hi = z + radius
    lo = z - radius
    up = gap(z) - gap(hi) if z > 1 else zbar(hi) - c
    down = (gap(lo) - gap(z) if lo > 1 else c - zbar(lo))
    R = max(abs(up), abs(down))
    return BallTransfer(z, float(radius), float(R), "compactify")
