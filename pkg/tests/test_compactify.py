from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shadowgrow import (
    BoundaryError,
    ball_contract_bound,
    ball_expand_bound,
    compactified_field,
    eval_field,
    field_from_terms,
    flow_map,
    integrate,
    parse_field,
    theta,
    theta_inv,
    theta_inv_gap,
    time_change,
)
from shadowgrow.cli import fit_slope

from conftest import fields

LINEAR = parse_field("dim 1\nx0' = x0")


def test_theta_examples():
    np.testing.assert_array_equal(theta([0.0]), [0.0])
    assert theta([1.0])[0] == pytest.approx(0.7071067812, abs=1e-10)
    np.testing.assert_allclose(theta([3.0, 4.0]), [0.5883484, 0.7844645], atol=1e-7)


def test_theta_inv_examples():
    np.testing.assert_array_equal(theta_inv([0.0]), [0.0])
    assert theta_inv([2**-0.5])[0] == pytest.approx(1.0, rel=1e-12)
    zbar, ybar = 0.99, 0.01
    cartesian = zbar / math.sqrt(1 - zbar**2)
    gap_form = math.sqrt(1 / (2 * ybar - ybar**2) - 1)
    assert cartesian == pytest.approx(gap_form, rel=1e-12)
    assert theta_inv([zbar])[0] == pytest.approx(cartesian, rel=1e-12)
    assert theta_inv_gap(ybar) == pytest.approx(gap_form, rel=1e-12)
    assert gap_form == pytest.approx(7.0179239295825, rel=1e-12)


def test_theta_inv_rejects_boundary():
    with pytest.raises(BoundaryError, match="no finite preimage"):
        theta_inv([1.0])


@given(
    u=st.lists(st.floats(-1, 1), min_size=1, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3),
    radius=st.floats(0, 1 - 1e-8),
)
def test_theta_theta_inv_identity(u, radius):
    xbar = radius * np.asarray(u) / np.linalg.norm(u)
    back = theta(theta_inv(xbar))
    assert np.allclose(back, xbar, rtol=1e-12, atol=1e-15)


def test_linear_closed_form():
    cf = compactified_field(LINEAR)
    xb = np.linspace(-0.999, 0.999, 1000)[:, None]
    err = np.abs(cf(xb)[:, 0] - xb[:, 0] * (1 - xb[:, 0] ** 2)).max()
    assert err < 1e-10
    np.testing.assert_allclose(cf(np.array([[1.0], [-1.0]])), 0.0, atol=1e-15)


def _pushforward(F, x, h=1e-6):
    """rho^(deg-1) DTheta(x) X(x), with DTheta by central differences."""
    N = x.shape[0]
    D = np.empty((N, N))
    for j in range(N):
        e = np.zeros(N)
        e[j] = h
        D[:, j] = (theta(x + e) - theta(x - e)) / (2 * h)
    rho = 1 / math.sqrt(1 + x @ x)
    return rho ** (F.degree - 1) * D @ eval_field(F, x)


def test_constant_field_positive_inside_zero_on_boundary():
    F = parse_field("dim 1\nx0' = 1")
    cf = compactified_field(F)
    xb = np.linspace(-0.99, 0.99, 199)[:, None]
    assert np.all(cf(xb) > 0)
    np.testing.assert_allclose(cf(np.array([[1.0], [-1.0]])), 0.0, atol=1e-15)
    for x in (-3.0, 0.0, 0.4, 5.0):
        assert cf(theta([x]))[0] == pytest.approx(_pushforward(F, np.array([x]))[0], rel=1e-8)


@given(F=fields(max_dim=3, max_degree=3), seed=st.integers(0, 10**6))
def test_field_matches_pushforward(F, seed):
    cf = compactified_field(F)
    x = np.random.default_rng(seed).uniform(-3, 3, F.dimension)
    got = cf(theta(x))
    want = _pushforward(F, x)
    assert np.allclose(got, want, rtol=1e-6, atol=1e-7 * (1 + np.abs(want).max()))


@given(F=fields(max_dim=3, max_degree=4), seed=st.integers(0, 10**6))
def test_boundary_sphere_invariant(F, seed):
    cf = compactified_field(F)
    u = np.random.default_rng(seed).normal(size=(8, F.dimension))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    V = cf(u)
    scale = 1 + np.abs(V).max()
    assert np.abs(np.sum(V * u, axis=1)).max() < 1e-10 * scale


def test_time_change_linear_is_identity():
    cf = compactified_field(LINEAR)
    tr = integrate(cf, theta([0.3]), (0.0, 4.0))
    s, t = time_change(tr, cf)
    np.testing.assert_array_equal(t, s - s[0])


def test_time_change_constant_radius():
    # the cubic rotation keeps |x| fixed
    F = parse_field("dim 2\nx0' = -x1*(x0^2 + x1^2)\nx1' = x0*(x0^2 + x1^2)")
    cf = compactified_field(F)
    c = 0.6
    tr = integrate(cf, np.array([c, 0.0]), (0.0, 5.0), tol=1e-12)
    s, t = time_change(tr, cf)
    np.testing.assert_allclose(t, (1 - c**2) * s, rtol=1e-9, atol=1e-12)
    t2, s2 = time_change(tr, cf, direction="t_to_s")
    np.testing.assert_array_equal(t2, t)


def test_time_change_blow_up_time_finite():
    F = parse_field("dim 1\nx0' = x0^2")
    cf = compactified_field(F)
    tr = integrate(cf, theta([1.0]), (0.0, 40.0), tol=1e-12)
    s, t = time_change(tr, cf)
    assert np.all(np.diff(t) > 0)
    assert t[-1] == pytest.approx(1.0, abs=1e-4)


def test_time_change_rejects_boundary():
    F = parse_field("dim 1\nx0' = x0^3")
    cf = compactified_field(F)

    class Touching:
        times = np.array([0.0, 1.0])
        states = np.array([[0.5], [1.0]])

    with pytest.raises(BoundaryError, match="degenerates at boundary"):
        time_change(Touching(), cf)


def test_conjugacy_random_quadratic_planar():
    rng = np.random.default_rng(7)
    comps = []
    for _ in range(2):
        comps.append({e: float(np.round(rng.uniform(-1, 1), 3)) for e in [(2, 0), (1, 1), (0, 2), (1, 0), (0, 1)]})
    F = field_from_terms(2, [{k: v for k, v in c.items()} for c in comps])
    cf = compactified_field(F)
    x0 = np.array([0.4, -0.3])
    tr = integrate(cf, theta(x0), (0.0, 3.0), tol=1e-12)
    s, t = time_change(tr, cf, nodes=8)
    checked = 0
    for si, ti, xb in zip(s, t, tr.states):
        x = flow_map(F, ti, x0, tol=1e-12)
        if np.linalg.norm(x) > 1e3:
            continue
        assert np.abs(theta(x) - xb).max() < 1e-6
        checked += 1
    assert checked > 5


def test_expand_bound_examples():
    bt = ball_expand_bound(np.array([0.0]), 0.1)
    assert bt.output_radius == pytest.approx(0.1 / math.sqrt(0.99), rel=1e-12)
    assert ball_expand_bound(np.array([0.5]), 0.0).output_radius == 0.0
    with pytest.raises(BoundaryError):
        ball_expand_bound(np.array([0.95]), 0.06)
    for g in (1e-3, 1e-4, 1e-5):
        R1 = ball_expand_bound(np.array([1 - g]), 1e-3 * g, gap=g).output_radius
        R2 = ball_expand_bound(np.array([1 - g / 2]), 1e-3 * g, gap=g / 2).output_radius
        assert R2 / R1 == pytest.approx(2**1.5, rel=0.05)


def test_contract_bound_examples():
    bt = ball_contract_bound(np.array([0.0]), 0.1)
    assert bt.output_radius == pytest.approx(0.1 / math.sqrt(1.01), rel=1e-12)
    assert ball_contract_bound(np.array([3.0]), 0.0).output_radius == 0.0
    for z in (100.0, 300.0, 1000.0):
        a = ball_contract_bound(np.array([z]), 1.0).output_radius
        b = ball_contract_bound(np.array([2 * z]), 1.0).output_radius
        assert a / b == pytest.approx(8.0, rel=0.05)


@given(g=st.floats(1e-6, 0.5), frac=st.floats(1e-6, 0.99))
def test_expand_positive(g, frac):
    bt = ball_expand_bound(np.array([1 - g]), frac * g, gap=g)
    assert bt.output_radius > 0


def test_transfer_slopes():
    gaps = np.logspace(-5, -2, 40)
    ratios = [ball_expand_bound(np.array([1 - g]), 1e-3 * g, gap=g).ratio for g in gaps]
    slope, _ = fit_slope(np.log(gaps), np.log(ratios))
    assert abs(slope + 1.5) <= 0.02
    norms = np.logspace(1, 3, 40)
    ratios = [ball_contract_bound(np.array([z]), 1e-2).ratio for z in norms]
    slope, _ = fit_slope(np.log(norms), np.log(ratios))
    assert abs(slope + 3) <= 0.05
