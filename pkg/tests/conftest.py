from __future__ import annotations

import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from shadowgrow import field_from_terms, parse_field

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
FIELDS = ROOT / "demos" / "fields"


def load(name: str):
    return parse_field((FIELDS / f"{name}.ode").read_text())


def golden_section(fun, a, b, tol=1e-13):
    """Minimizer of a unimodal scalar function on [a, b]."""
    g = (math.sqrt(5) - 1) / 2
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def grid_oracle(g, dim, points, depth):
    """Grid points whose first ``depth`` images stay in [-1, 1]^dim."""
    axis = np.arange(points) / (points // 2) - 1
    P = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    ok = np.ones(len(P), bool)
    Z = P.copy()
    for _ in range(depth):
        Z = g(Z)
        ok &= np.all(np.abs(Z) <= 1, axis=1)
    return P[ok]


def hausdorff_inf(A, B):
    D = np.abs(A[:, None, :] - B[None, :, :]).max(axis=2)
    return max(D.min(axis=1).max(), D.min(axis=0).max())


@st.composite
def fields(draw, max_dim: int = 4, max_degree: int = 4, max_terms: int = 4):
    """Random polynomial fields with small rational coefficients."""
    N = draw(st.integers(1, max_dim))
    comps = []
    for _ in range(N):
        terms = {}
        for _ in range(draw(st.integers(1, max_terms))):
            deg = draw(st.integers(0, max_degree))
            exps = [0] * N
            for _ in range(deg):
                exps[draw(st.integers(0, N - 1))] += 1
            num = draw(st.integers(-5, 5).filter(bool))
            den = draw(st.integers(1, 4))
            terms[tuple(exps)] = terms.get(tuple(exps), 0) + Fraction(num, den)
        comps.append(terms)
    F = field_from_terms(N, comps)
    if F.is_zero:
        F = field_from_terms(N, [{tuple(int(i == j) for i in range(N)): 1} for j in range(N)])
    return F


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
