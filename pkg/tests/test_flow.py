from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shadowgrow import (
    EscapeError,
    FieldFlow,
    IntegrationError,
    LinearFlow,
    LinearMap,
    TimeOneMap,
    classify_growth,
    compactified_field,
    flow_map,
    integrate,
    parse_field,
    theta,
)

from conftest import fields

LINEAR = parse_field("dim 1\nx0' = x0")
SQUARE = parse_field("dim 1\nx0' = x0^2")
DECAY = parse_field("dim 1\nx0' = -x0")


def test_linear_endpoint():
    tr = integrate(LINEAR, [1.0], (0.0, 1.0), tol=1e-10)
    assert tr.final[0] == pytest.approx(math.e, abs=1e-9)
    assert np.all(np.diff(tr.times) > 0)


def test_square_escape_time():
    tr = integrate(SQUARE, [1.0], (0.0, 2.0))
    assert tr.escape_time == pytest.approx(1.0, abs=1e-4)
    with pytest.raises(EscapeError):
        flow_map(SQUARE, 2.0, [1.0])


def test_compactified_linear_matches_theta():
    cf = compactified_field(LINEAR)
    got = flow_map(cf, 1.0, theta([1.0]), tol=1e-12)
    assert got[0] == pytest.approx(theta([math.e])[0], abs=1e-6)
    assert got[0] == pytest.approx(0.9385079, abs=1e-6)


def test_flow_map_zero_and_reverse():
    x = np.array([0.3, -1.2])
    F = parse_field("dim 2\nx0' = x1\nx1' = -x0 + x0^2")
    np.testing.assert_array_equal(flow_map(F, 0.0, x), x)
    assert flow_map(LINEAR, -1.0, [math.e])[0] == pytest.approx(1.0, abs=1e-9)


def test_tol_must_be_positive():
    with pytest.raises(ValueError):
        integrate(LINEAR, [1.0], (0.0, 1.0), tol=0.0)


def test_dense_output_hermite_accuracy():
    tr = integrate(LINEAR, [1.0], (0.0, 2.0), tol=1e-10)
    mids = 0.5 * (tr.times[1:] + tr.times[:-1])
    err = np.abs(tr(mids)[:, 0] - np.exp(mids)) / np.exp(mids)
    assert err.max() < 1e-6


@pytest.mark.parametrize(
    "field, x0, horizon, tag",
    [(LINEAR, 1.0, 50.0, "grow_up"), (SQUARE, 1.0, 5.0, "blow_up"), (DECAY, 1.0, 50.0, "bounded")],
)
def test_classify(field, x0, horizon, tag):
    tr = integrate(field, [x0], (0.0, horizon))
    gc = classify_growth(tr, horizon)
    assert gc.tag == tag
    if tag == "blow_up":
        assert gc.escape_time is not None and gc.escape_time < horizon


def test_halving_tol_halves_error():
    # below ~8 steps per unit the step count is too coarse for the ratio to settle
    tols = [1e-6, 1e-7, 1e-8, 1e-9, 1e-10]
    for tol in tols:
        e1 = abs(flow_map(LINEAR, 1.0, [1.0], tol=tol)[0] - math.e)
        e2 = abs(flow_map(LINEAR, 1.0, [1.0], tol=tol / 2)[0] - math.e)
        assert e1 / e2 >= 2.0, tol


def test_observed_order_at_least_four():
    tols = np.logspace(-5, -11, 7)
    errs, steps = [], []
    for tol in tols:
        tr = integrate(LINEAR, [1.0], (0.0, 1.0), tol=tol)
        errs.append(abs(tr.final[0] - math.e))
        steps.append(len(tr.times) - 1)
    slope = np.polyfit(np.log(steps), np.log(errs), 1)[0]
    assert -slope >= 4.0


@given(F=fields(max_dim=3, max_degree=2, max_terms=3), seed=st.integers(0, 10**6),
       t=st.floats(0.01, 0.3), s=st.floats(0.01, 0.3))
def test_group_property(F, seed, t, s):
    x = np.random.default_rng(seed).uniform(-0.5, 0.5, F.dimension)
    tol = 1e-10
    try:
        a = flow_map(F, t + s, x, tol=tol)
        b = flow_map(F, t, flow_map(F, s, x, tol=tol), tol=tol)
    except (EscapeError, IntegrationError):
        return
    assert np.abs(a - b).max() <= 10 * tol * (1 + np.abs(a).max())


def test_linear_flow_against_eigenbasis():
    A = np.array([[0.5, 1.0], [0.0, -2.0]])
    lf = LinearFlow(A)
    w, V = np.linalg.eig(A)
    x = np.array([0.7, -0.4])
    for tau in (-1.0, 0.3, 2.0):
        want = V @ np.diag(np.exp(w * tau)) @ np.linalg.solve(V, x)
        np.testing.assert_allclose(lf.flow(tau, x), want.real, rtol=1e-12)
        np.testing.assert_allclose(lf.flow_jacobian(tau, x), (V @ np.diag(np.exp(w * tau)) @ np.linalg.inv(V)).real,
                                   rtol=1e-12, atol=1e-14)


def test_field_flow_matches_linear_flow():
    F = parse_field("dim 2\nx0' = 1/2*x0 + x1\nx1' = -2*x1")
    ff, lf = FieldFlow(F), LinearFlow(np.array([[0.5, 1.0], [0.0, -2.0]]))
    x = np.array([0.7, -0.4])
    np.testing.assert_allclose(ff.flow(1.3, x), lf.flow(1.3, x), rtol=1e-9)


def test_linear_map_jacobians():
    M = np.array([[0.5, 0.0], [0.0, 2.0]])
    g = LinearMap(M)
    x = np.array([[1.0, 1.0]])
    np.testing.assert_allclose(g.step(x), [[0.5, 2.0]])
    np.testing.assert_allclose(g.jacobian(x)[0] @ g.inverse_jacobian(x)[0], np.eye(2), atol=1e-15)


def test_time_one_map_linear_closed_form():
    cf = compactified_field(LINEAR)
    f = TimeOneMap(cf)
    for z in (0.1, 1.0, 5.0):
        xb = theta([z])
        out, logr = f.step_ball(xb[None], np.array([math.log1p(-xb[0])]))
        assert out[0, 0] == pytest.approx(theta([math.e * z])[0], abs=1e-10)
        assert logr[0] == pytest.approx(math.log1p(-theta([math.e * z])[0]), rel=1e-8)


def test_time_one_map_deep_boundary():
    # the gap of theta(z) is ~ 1/(2 z^2), so one unit of time lowers log r by 2
    f = TimeOneMap(compactified_field(LINEAR))
    xb, logr = f.step_ball(np.array([[1.0]]), np.array([-400.0]))
    assert xb[0, 0] == 1.0
    assert logr[0] == pytest.approx(-402.0, abs=1e-9)
    _, back = f.flow_ball(-1.0, xb, logr)
    assert back[0] == pytest.approx(-400.0, abs=1e-9)


def test_time_one_map_jacobian_fd():
    f = TimeOneMap(compactified_field(parse_field("dim 2\nx0' = x0 + x0*x1\nx1' = 2*x1 - x0^2")))
    x = np.array([[0.3, -0.2]])
    lr = np.log1p(-np.linalg.norm(x, axis=1))
    _, _, J = f.step_ball_jacobian(x, lr)
    h = 1e-6
    fd = np.empty((2, 2))
    for j in range(2):
        e = np.zeros((1, 2))
        e[0, j] = h
        p = f.step_ball(x + e, np.log1p(-np.linalg.norm(x + e, axis=1)))[0]
        m = f.step_ball(x - e, np.log1p(-np.linalg.norm(x - e, axis=1)))[0]
        fd[:, j] = (p - m)[0] / (2 * h)
    np.testing.assert_allclose(J[0], fd, rtol=1e-6, atol=1e-8)
