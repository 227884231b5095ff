"""Integration of original and compactified systems, flow maps, growth classes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Literal

import numpy as np
from scipy.linalg import expm

from .compactify import (
    CompactifiedField,
    directions,
    log_gap,
    theta,
    theta_inv,
)
from .polyfield import PolynomialField, eval_field

__all__ = [
    "IntegrationError",
    "EscapeError",
    "Trajectory",
    "GrowthClass",
    "integrate",
    "flow_map",
    "classify_growth",
    "as_rhs",
    "BallFlow",
    "TimeOneMap",
    "LinearMap",
    "LinearFlow",
    "FieldFlow",
]

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = _B - np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


class IntegrationError(RuntimeError):
    """Step size collapsed without the norm escaping."""


class EscapeError(RuntimeError):
    def __init__(self, escape_time: float):
        self.escape_time = escape_time
        super().__init__(f"trajectory escaped at t={escape_time:.12g}")


def as_rhs(obj) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(obj, PolynomialField):
        return lambda x: eval_field(obj, x)
    if callable(obj):
        return obj
    raise TypeError(f"cannot use {type(obj).__name__} as a vector field")


@dataclass(frozen=True)
class Trajectory:
    """Accepted integrator steps with cubic Hermite dense output."""

    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    escape_time: float | None = None
    step_sizes: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        ts = self.times
        sgn = 1.0 if ts[-1] >= ts[0] else -1.0
        key = sgn * ts
        tq = np.clip(sgn * t, key[0], key[-1])
        i = np.clip(np.searchsorted(key, tq, side="right") - 1, 0, len(ts) - 2)
        h = ts[i + 1] - ts[i]
        th = ((sgn * tq - ts[i]) / h)[..., None]
        y0, y1 = self.states[i], self.states[i + 1]
        f0, f1 = self.derivs[i], self.derivs[i + 1]
        hh = h[..., None]
        h00 = 2 * th**3 - 3 * th**2 + 1
        h10 = th**3 - 2 * th**2 + th
        h01 = -2 * th**3 + 3 * th**2
        h11 = th**3 - th**2
        return h00 * y0 + h10 * hh * f0 + h01 * y1 + h11 * hh * f1


def _dp_step(f, t, y, h, k0):
    ks = [k0]
    for i in range(1, 7):
        yi = y + h * sum(a * k for a, k in zip(_A[i], ks))
        ks.append(f(yi))
    y_new = y + h * sum(b * k for b, k in zip(_B, ks) if b != 0)
    err = h * sum(e * k for e, k in zip(_E, ks) if e != 0)
    return y_new, err, ks[-1]


def integrate(
    rhs,
    x0,
    t_span: tuple[float, float],
    tol: float = 1e-9,
    max_step: float = np.inf,
    escape_norm: float = 1e12,
    min_step: float = 1e-14,
    growth_norm: float = 1e6,
) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) integration of an autonomous system.

    The local error of every accepted step satisfies
    ``|err_i| <= tol * clip(h, 1e-3, 1) * (1 + max(|y_i|, |y_new_i|))``, so the
    global error scales with ``tol`` rather than a fractional power of it.  Integration stops early,
    recording ``escape_time``, once ``|x|`` exceeds ``escape_norm``, or once the
    step size falls below ``min_step`` while ``|x| > growth_norm``.

    Raises
    ------
    IntegrationError
        The step size collapsed while the state stayed moderate.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    f = as_rhs(rhs)
    t0, t1 = float(t_span[0]), float(t_span[1])
    y = np.array(x0, dtype=float).reshape(-1)
    direction = 1.0 if t1 >= t0 else -1.0
    k = np.asarray(f(y), dtype=float)
    times, states, derivs, steps = [t0], [y.copy()], [k.copy()], []
    if t1 == t0:
        return Trajectory(np.array(times), np.array(states), np.array(derivs), None, np.zeros(0))
    span = abs(t1 - t0)
    scale = tol * (1.0 + np.abs(y))
    d0 = np.max(np.abs(y) / scale)
    d1 = np.max(np.abs(k) / scale)
    h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h = min(h, max_step, span)
    t = t0
    escape = None
    while direction * (t1 - t) > 0:
        h = min(h, max_step, abs(t1 - t))
        if h < min_step and abs(t1 - t) > min_step:
            if np.max(np.abs(y)) > growth_norm:
                escape = t
                break
            raise IntegrationError("stiff or singular; undetermined")
        y_new, err, k_new = _dp_step(f, t, y, direction * h, k)
        if not np.all(np.isfinite(y_new)) or not np.all(np.isfinite(err)):
            h *= 0.2
            continue
        # error per unit step gives tolerance proportionality; the clip keeps
        # the tiny steps near an escape from tightening the test further
        sc = tol * min(max(h, 1e-3), 1.0) * (1.0 + np.maximum(np.abs(y), np.abs(y_new)))
        en = float(np.max(np.abs(err) / sc))
        if en <= 1.0:
            t = t + direction * h
            if abs(t1 - t) < 1e-15 * max(1.0, abs(t1)):
                t = t1
            y, k = y_new, k_new
            times.append(t)
            states.append(y.copy())
            derivs.append(k.copy())
            steps.append(h)
            if np.linalg.norm(y) > escape_norm:
                escape = t
                break
            fac = 5.0 if en == 0 else min(5.0, 0.9 * en ** -0.25)
            h *= fac
        else:
            h *= max(0.2, 0.9 * en ** -0.25)
    return Trajectory(
        np.array(times), np.array(states), np.array(derivs), escape, np.array(steps)
    )


def flow_map(rhs, t: float, x, tol: float = 1e-10, **kw) -> np.ndarray:
    """Endpoint Phi(t, x); raises :class:`EscapeError` on escape."""
    x = np.asarray(x, dtype=float)
    if t == 0:
        return x.copy()
    traj = integrate(rhs, x, (0.0, t), tol=tol, **kw)
    if traj.escape_time is not None:
        raise EscapeError(traj.escape_time)
    return traj.final.reshape(x.shape)


@dataclass(frozen=True)
class GrowthClass:
    tag: Literal["bounded", "grow_up", "blow_up", "undetermined"]
    escape_time: float | None = None
    norms: np.ndarray = field(default_factory=lambda: np.zeros(0))


def classify_growth(traj: Trajectory, horizon: float, norm_threshold: float = 1e6) -> GrowthClass:
    """Finite-horizon growth class with its evidence.

    blow_up: escape before the horizon with the step size collapsing;
    grow_up: norm above threshold and monotone over the last tenth of the
    samples, steps not collapsing; bounded: norm never above threshold.
    """
    norms = np.linalg.norm(traj.states, axis=-1)
    steps = traj.step_sizes
    collapsing = steps.size > 2 and steps[-1] < 1e-4 * np.max(steps)
    if traj.escape_time is not None and abs(traj.escape_time) < horizon and collapsing:
        return GrowthClass("blow_up", traj.escape_time, norms)
    if np.max(norms) <= norm_threshold:
        return GrowthClass("bounded", None, norms)
    tail = norms[-max(2, len(norms) // 10):]
    if norms[-1] > norm_threshold and np.all(np.diff(tail) >= 0) and not collapsing:
        return GrowthClass("grow_up", None, norms)
    return GrowthClass("undetermined", traj.escape_time, norms)


# ---------------------------------------------------------------- fixed-step scheme

def _rk_fixed(F, DF, y, T, h, nsteps, after_step=None):
    """Fixed-step Dormand-Prince fifth-order solution, with optional tangents.

    ``y`` has shape (B, D); ``T`` (B, D, D) or None.  With tangents the scheme
    is differentiated exactly, so ``T`` is the derivative of the discrete map.
    """
    for _ in range(nsteps):
        ks, Ks = [], []
        for i in range(6):
            if i == 0:
                yi, Ti = y, T
            else:
                yi = y + h * sum(a * k for a, k in zip(_A[i], ks))
                Ti = None if T is None else T + h * sum(a * K for a, K in zip(_A[i], Ks))
            ks.append(F(yi))
            if T is not None:
                Ks.append(DF(yi) @ Ti)
        y = y + h * sum(b * k for b, k in zip(_B[:6], ks) if b != 0)
        if T is not None:
            T = T + h * sum(b * K for b, K in zip(_B[:6], Ks) if b != 0)
        if after_step is not None:
            y, T = after_step(y, T)
    return y, T


class BallFlow:
    """Flow of a compactified field, accurate arbitrarily close to the sphere.

    Points with boundary distance ``r <= 1/2`` are integrated in the chart
    ``(u, s = log r)`` with ``xbar = (1 - r) u``; in that chart the field is
    smooth up to the sphere and a fixed absolute error in ``s`` is a fixed
    relative error in ``r``.  Points further in use Cartesian coordinates.
    Charts switch with hysteresis (to Cartesian above r = 3/4, to the polar
    chart below r = 1/4).  Fixed steps make the computed map smooth, and its
    Jacobian is the exact derivative of the discrete scheme.
    """

    def __init__(self, cf: CompactifiedField, steps_per_unit: int = 32):
        self.cf = cf
        self.n = cf.dimension
        self.steps_per_unit = int(steps_per_unit)

    # padded state: polar rows [u, s], Cartesian rows [xbar, 0]
    def _rhs(self, Y, polar):
        n = self.n
        out = np.zeros_like(Y)
        if polar.all():
            out[:, :n], out[:, n] = self.cf.polar_rhs(Y[:, :n], Y[:, n])
            return out
        if np.any(polar):
            du, ds = self.cf.polar_rhs(Y[polar, :n], Y[polar, n])
            out[polar, :n] = du
            out[polar, n] = ds
        cart = ~polar
        if np.any(cart):
            out[cart, :n] = self.cf(Y[cart, :n])
        return out

    def _jac(self, Y, polar):
        n = self.n
        if polar.all():
            return self.cf.polar_jacobian(Y[:, :n], Y[:, n])
        out = np.zeros(Y.shape + (n + 1,))
        if np.any(polar):
            out[polar] = self.cf.polar_jacobian(Y[polar, :n], Y[polar, n])
        cart = ~polar
        if np.any(cart):
            out[cart, :n, :n] = self.cf.jacobian(Y[cart, :n])
        return out

    def _switch(self, Y, T, polar):
        n = self.n
        eye = np.eye(n)
        to_cart = polar & (Y[:, n] > math.log(0.75))
        to_polar = (~polar) & (np.linalg.norm(Y[:, :n], axis=1) > 0.75)
        if np.any(to_cart):
            idx = np.flatnonzero(to_cart)
            u = Y[idx, :n]
            nu = np.linalg.norm(u, axis=1)
            uh = u / nu[:, None]
            r = np.exp(Y[idx, n])
            if T is not None:
                C = np.zeros((idx.size, n + 1, n + 1))
                P = eye - uh[:, :, None] * uh[:, None, :]
                C[:, :n, :n] = ((1 - r) / nu)[:, None, None] * P
                C[:, :n, n] = -r[:, None] * uh
                T[idx] = C @ T[idx]
            Y[idx, :n] = (1 - r)[:, None] * uh
            Y[idx, n] = 0.0
            polar[idx] = False
        if np.any(to_polar):
            idx = np.flatnonzero(to_polar)
            x = Y[idx, :n]
            nx = np.linalg.norm(x, axis=1)
            uh = x / nx[:, None]
            r = 1.0 - nx
            if T is not None:
                C = np.zeros((idx.size, n + 1, n + 1))
                P = eye - uh[:, :, None] * uh[:, None, :]
                C[:, :n, :n] = P / nx[:, None, None]
                C[:, n, :n] = -uh / r[:, None]
                T[idx] = C @ T[idx]
            Y[idx, :n] = uh
            Y[idx, n] = np.log(r)
            polar[idx] = True
        return Y, T

    def advance(self, xbar, logr, tau: float, jacobian: bool = False):
        """Advance ball points by compactified time ``tau``.

        Parameters
        ----------
        xbar : array (B, N) or (N,)
        logr : array (B,) or scalar, log of the boundary distance
        tau : float
        jacobian : bool
            Also return the Cartesian derivative ``d xbar_out / d xbar_in``.

        Returns
        -------
        xbar_out, logr_out[, A]
        """
        n = self.n
        xbar = np.asarray(xbar, dtype=float)
        single = xbar.ndim == 1
        X = np.atleast_2d(xbar)
        S = np.atleast_1d(np.asarray(logr, dtype=float)).copy()
        if S.shape[0] != X.shape[0]:
            S = np.broadcast_to(S, (X.shape[0],)).copy()
        B = X.shape[0]
        polar = S <= math.log(0.5)
        polar0 = polar.copy()
        Y = np.zeros((B, n + 1))
        u0 = directions(X)
        Y[polar, :n] = u0[polar]
        Y[polar, n] = S[polar]
        Y[~polar, :n] = X[~polar]
        T = np.broadcast_to(np.eye(n + 1), (B, n + 1, n + 1)).copy() if jacobian else None
        nsteps = max(1, int(math.ceil(abs(tau) * self.steps_per_unit - 1e-9)))
        h = tau / nsteps
        state = {"polar": polar}

        def F(Yi):
            return self._rhs(Yi, state["polar"])

        def DF(Yi):
            return self._jac(Yi, state["polar"])

        def after(Yn, Tn):
            Yn, Tn = self._switch(Yn, Tn, state["polar"])
            return Yn, Tn

        if tau != 0:
            Y, T = _rk_fixed(F, DF, Y, T, h, nsteps, after)
        polar = state["polar"]
        Xo = np.empty((B, n))
        So = np.empty(B)
        uo = Y[:, :n]
        nu = np.linalg.norm(uo, axis=1)
        nu = np.where(nu > 0, nu, 1.0)
        uh = uo / nu[:, None]
        r = np.exp(Y[:, n])
        Xo[polar] = (1 - r[polar])[:, None] * uh[polar]
        So[polar] = Y[polar, n]
        Xo[~polar] = Y[~polar, :n]
        So[~polar] = log_gap(Y[~polar, :n])
        if not jacobian:
            return (Xo[0], So[0]) if single else (Xo, So)
        eye = np.eye(n)
        Out = np.zeros((B, n, n + 1))
        P = eye - uh[:, :, None] * uh[:, None, :]
        Out[polar, :, :n] = ((1 - r[polar]) / nu[polar])[:, None, None] * P[polar]
        Out[polar, :, n] = -r[polar][:, None] * uh[polar]
        Out[~polar, :, :n] = eye
        In = np.zeros((B, n + 1, n))
        r0 = np.exp(S)
        P0 = eye - u0[:, :, None] * u0[:, None, :]
        In[polar0, :n, :] = P0[polar0] / (1 - r0[polar0])[:, None, None]
        In[polar0, n, :] = -u0[polar0] * np.exp(-S[polar0])[:, None]
        In[~polar0, :n, :] = eye
        A = (Out @ T) @ In
        if single:
            return Xo[0], So[0], A[0]
        return Xo, So, A


class TimeOneMap:
    """Time-``tau`` map of a compactified field on ball points (xbar, logr)."""

    space = "ball"

    def __init__(self, cf: CompactifiedField, tau: float = 1.0, steps_per_unit: int = 32):
        self.cf = cf
        self.tau = float(tau)
        self.ballflow = BallFlow(cf, steps_per_unit)

    @property
    def dimension(self) -> int:
        return self.cf.dimension

    def step_ball(self, xbar, logr):
        return self.ballflow.advance(xbar, logr, self.tau)

    def step_ball_jacobian(self, xbar, logr):
        return self.ballflow.advance(xbar, logr, self.tau, jacobian=True)

    def flow_ball(self, tau, xbar, logr, jacobian: bool = False):
        return self.ballflow.advance(xbar, logr, tau, jacobian=jacobian)

    def refined(self, factor: int = 4) -> "TimeOneMap":
        return TimeOneMap(self.cf, self.tau, self.ballflow.steps_per_unit * factor)


class LinearMap:
    """x -> M x on R^N."""

    space = "euclidean"

    def __init__(self, M):
        self.M = np.atleast_2d(np.asarray(M, dtype=float))

    @property
    def dimension(self) -> int:
        return self.M.shape[0]

    def step(self, x):
        return np.asarray(x, dtype=float) @ self.M.T

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.M, x.shape[:-1] + self.M.shape).copy()

    def inverse_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        Mi = np.linalg.inv(self.M)
        return np.broadcast_to(Mi, x.shape[:-1] + Mi.shape).copy()


class LinearFlow:
    """Flow of x' = A x through the matrix exponential (scipy.linalg.expm)."""

    space = "euclidean"

    def __init__(self, A):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self._cache = lru_cache(maxsize=4096)(lambda tau: expm(tau * self.A))

    @property
    def dimension(self) -> int:
        return self.A.shape[0]

    def propagator(self, tau: float) -> np.ndarray:
        return self._cache(float(tau))

    def flow(self, tau, x):
        return np.asarray(x, dtype=float) @ self.propagator(tau).T

    def flow_jacobian(self, tau, x):
        x = np.asarray(x, dtype=float)
        E = self.propagator(tau)
        return np.broadcast_to(E, x.shape[:-1] + E.shape).copy()

    # degree one: the compactification time change is the identity
    flow_alpha = flow


def _flow_stacked(f, tau, flat, tol):
    """Flow a batch of points as one stacked system.

    The error test is componentwise, so every point meets its own tolerance;
    the shared step is simply the most demanding one.
    """
    K, N = flat.shape
    rhs = lambda y: np.asarray(f(y.reshape(K, N)), dtype=float).reshape(-1)
    return flow_map(rhs, tau, flat.reshape(-1), tol=tol).reshape(K, N)


class FieldFlow:
    """Flow of a polynomial field by adaptive integration."""

    space = "euclidean"

    def __init__(self, field: PolynomialField, tol: float = 1e-11):
        self.field = field
        self.tol = tol
        self.cf = CompactifiedField(field)

    @property
    def dimension(self) -> int:
        return self.field.dimension

    def flow(self, tau, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        return _flow_stacked(as_rhs(self.field), tau, flat, self.tol).reshape(x.shape)

    def flow_alpha(self, tau, x):
        """Phi(alpha(tau, x), x): the original flow run for the original time
        that corresponds to compactified time ``tau``.  By conjugacy this is
        the inverse image of the compactified flow."""
        x = np.asarray(x, dtype=float)
        if self.field.degree == 1:
            return self.flow(tau, x)
        flat = theta(x.reshape(-1, x.shape[-1]))
        out = _flow_stacked(as_rhs(self.cf), tau, flat, self.tol)
        return theta_inv(out).reshape(x.shape)
