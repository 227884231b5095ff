from __future__ import annotations

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shadowgrow import (
    ErrorLaw,
    LinearFlow,
    LinearMap,
    PseudoTrajectory,
    TimeOneMap,
    check_pseudo,
    compactified_field,
    compute_defects,
    gen_pseudo,
    parse_field,
    read_pseudo,
    theta,
    write_pseudo,
)

BALL = TimeOneMap(compactified_field(parse_field("dim 1\nx0' = x0")))
HALF = LinearMap(np.array([[0.5]]))
GROW = LinearFlow(np.array([[1.0]]))


def _ball_start(x=0.9):
    return np.array([x])


# ---------------------------------------------------------------- laws

def test_law_validation():
    with pytest.raises(ValueError):
        ErrorLaw("nonuniform", 1e-3, n=0.5)
    with pytest.raises(ValueError):
        ErrorLaw("weighted", 1e-3, C=1.0)
    with pytest.raises(ValueError):
        ErrorLaw("standard", -1.0)
    with pytest.raises(ValueError):
        ErrorLaw("bogus", 1.0)


def test_allowance_forms():
    assert ErrorLaw("standard", 0.1).allowance(0.3) == pytest.approx(0.1)
    assert ErrorLaw("nonuniform", 0.1, n=2).allowance(0.3) == pytest.approx(0.1 * 0.09)
    assert ErrorLaw("noncompact_nonuniform", 0.1, n=2).allowance(4.0) == pytest.approx(0.1 / 16)


# ---------------------------------------------------------------- generation

def test_zero_delta_gives_exact_orbit():
    law = ErrorLaw("nonuniform", 0.0, n=2)
    pt = gen_pseudo(BALL, _ball_start(0.5), 30, law, seed=1)
    d = compute_defects(pt, BALL)
    assert np.all(d == 0)


def test_nonuniform_defects_below_allowance():
    law = ErrorLaw("nonuniform", 1e-3, n=2)
    pt = gen_pseudo(BALL, _ball_start(), 200, law, seed=5)
    rep = check_pseudo(pt, BALL)
    assert rep.holds
    assert np.all(rep.defects <= rep.allowances)


def test_weighted_sum_budgeted():
    law = ErrorLaw("weighted", 1e-3, C=4.0)
    pt = gen_pseudo(HALF, np.array([1.0]), 40, law, seed=2)
    e = compute_defects(pt, HALF)
    assert np.sum(4.0 ** np.arange(e.size) * e) <= 1e-3
    assert check_pseudo(pt, HALF).holds


def test_generation_deterministic():
    law = ErrorLaw("nonuniform", 1e-3, n=2)
    a = gen_pseudo(BALL, _ball_start(), 50, law, seed=9)
    b = gen_pseudo(BALL, _ball_start(), 50, law, seed=9)
    c = gen_pseudo(BALL, _ball_start(), 50, law, seed=10)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.gap_log, b.gap_log)
    assert not np.array_equal(a.gap_log, c.gap_log)


# ---------------------------------------------------------------- defects

def test_single_jump_defect():
    X = 2.0 * 0.5 ** np.arange(6)[:, None]
    X[3, 0] += 1e-3
    pt = PseudoTrajectory(np.arange(6.0), X, ErrorLaw("standard", 1.0))
    np.testing.assert_allclose(compute_defects(pt, HALF), [0, 0, 1e-3, 5e-4, 0], atol=1e-18)


def test_offset_orbit_closed_form():
    dt = 1 / 16
    t = np.arange(0, 4 + dt / 2, dt)
    c = 1e-3
    pt = PseudoTrajectory(t, 0.1 * np.exp(t)[:, None] + c, ErrorLaw("standard", 1.0, T=1.0), time_kind="flow")
    d = compute_defects(pt, GROW)
    interior = (t >= 1) & (t <= 3)
    np.testing.assert_allclose(d[interior], c * (math.e - 1), rtol=1e-9)


def test_exact_flow_orbit_zero_defect():
    dt = 1 / 8
    t = np.arange(0, 3 + dt / 2, dt)
    pt = PseudoTrajectory(t, 0.2 * np.exp(t)[:, None], ErrorLaw("standard", 1e-6), time_kind="flow")
    assert compute_defects(pt, GROW).max() < 1e-14


def test_refining_tau_grid_never_lowers_defect():
    rng = np.random.default_rng(4)
    dt = 1 / 32
    t = np.arange(0, 3 + dt / 2, dt)
    X = 0.1 * np.exp(t)[:, None] + 1e-4 * rng.normal(size=(t.size, 1))
    pt = PseudoTrajectory(t, X, ErrorLaw("standard", 1.0), time_kind="flow")
    coarse = compute_defects(pt, GROW, tau_grid=1 / 16)
    fine = compute_defects(pt, GROW, tau_grid=1 / 32)
    # chained flow steps differ from single steps only by round-off
    assert np.all(fine >= coarse - 1e-12 * (1 + np.abs(X).max()))


# ---------------------------------------------------------------- checks

def test_exact_orbit_margin_is_min_allowance():
    law = ErrorLaw("nonuniform", 1e-3, n=2)
    pt = gen_pseudo(BALL, _ball_start(0.5), 20, law.__class__("nonuniform", 0.0, n=2), seed=0)
    rep = check_pseudo(pt, BALL, law)
    assert rep.holds
    assert rep.worst_margin == pytest.approx(rep.allowances.min(), rel=1e-12)


def test_one_defect_over_allowance_fails_there():
    law = ErrorLaw("nonuniform", 1e-3, n=2)
    pt = gen_pseudo(BALL, _ball_start(0.5), 30, ErrorLaw("nonuniform", 0.0, n=2), seed=0)
    k = 6
    fx, fl = BALL.step_ball(pt.states[k][None], pt.gap_log[k:k + 1])
    r = math.exp(fl[0])
    # push x_{k+1} outward by 1.1 * delta * r^2 along the radius
    gap = r - 1.1e-3 * r**2
    states = pt.states.copy()
    logr = pt.gap_log.copy()
    states[k + 1] = (1 - gap) * np.sign(fx[0])
    logr[k + 1] = math.log(gap)
    # continue exactly from the moved point so only e_k is off
    for j in range(k + 1, len(pt) - 1):
        nx, nl = BALL.step_ball(states[j][None], logr[j:j + 1])
        states[j + 1], logr[j + 1] = nx[0], nl[0]
    bad = PseudoTrajectory(pt.times, states, law, "ball", "map", logr)
    rep = check_pseudo(bad, BALL)
    assert not rep.holds
    assert rep.worst_location == k
    assert rep.worst_margin == pytest.approx(-0.1e-3 * r**2, rel=1e-6)


def test_weighted_geometric_series_zero_margin():
    d, C, q = 1e-3, 4.0, 0.5
    K = 30
    e = d * (1 - q) * q ** np.arange(K) / C ** np.arange(K)
    # x/16 contracts faster than the defects decay, so no defect is lost to rounding
    g = LinearMap(np.array([[1 / 16]]))
    X = np.zeros((K + 1, 1))
    for k in range(K):
        X[k + 1] = X[k] / 16 + e[k]
    law = ErrorLaw("weighted", d, C=C, tail_ratio=q)
    rep = check_pseudo(PseudoTrajectory(np.arange(K + 1.0), X, law), g)
    assert rep.holds
    assert rep.integral_value == pytest.approx(d, rel=1e-12)


def test_weighted_divergent_sentinel():
    K = 30
    X = np.empty((K + 1, 1))
    X[0] = 1.0
    for k in range(K):
        X[k + 1] = 0.5 * X[k] + 1e-3
    law = ErrorLaw("weighted", 1e-3, C=4.0)
    rep = check_pseudo(PseudoTrajectory(np.arange(K + 1.0), X, law), HALF)
    assert not rep.holds
    assert rep.integral_value == math.inf


def test_kind_space_mismatch():
    pt = PseudoTrajectory(np.arange(3.0), np.ones((3, 1)), ErrorLaw("standard", 1.0))
    with pytest.raises(ValueError, match="ball"):
        check_pseudo(pt, HALF, ErrorLaw("nonuniform", 1e-3, n=2))


def test_next_convention_available():
    law = ErrorLaw("nonuniform", 1e-3, n=2)
    pt = gen_pseudo(BALL, _ball_start(), 60, law, seed=3)
    a = check_pseudo(pt, BALL, convention="image")
    b = check_pseudo(pt, BALL, convention="next")
    assert a.holds
    assert np.allclose(a.allowances, b.allowances, rtol=0.01)


@settings(max_examples=12)
@given(seed=st.integers(0, 10**6), delta=st.sampled_from([1e-2, 1e-3, 1e-4]), n=st.sampled_from([1.0, 2.0, 3.0]))
def test_nonuniform_also_standard(seed, delta, n):
    law = ErrorLaw("nonuniform", delta, n=n)
    pt = gen_pseudo(BALL, _ball_start(0.7), 25, law, seed=seed)
    assert check_pseudo(pt, BALL).holds
    assert check_pseudo(pt, BALL, ErrorLaw("standard", delta)).holds


@given(seed=st.integers(0, 10**6), C=st.sampled_from([2.0, 4.0, 8.0]))
def test_weighted_round_trip(seed, C):
    law = ErrorLaw("weighted", 1e-3, C=C)
    pt = gen_pseudo(HALF, np.array([1.0]), 20, law, seed=seed)
    assert check_pseudo(pt, HALF).holds


def test_flow_round_trip_ball():
    law = ErrorLaw("nonuniform", 1e-3, n=2, T=1.0)
    dt = 1 / 16
    pt = gen_pseudo(BALL, _ball_start(0.5), 16 * 4 + 1, law, seed=0, time_kind="flow", dt=dt)
    assert check_pseudo(pt, BALL).holds


# ---------------------------------------------------------------- files

def test_csv_round_trip_bit_identical():
    law = ErrorLaw("nonuniform", 1e-3, n=2)
    pt = gen_pseudo(BALL, _ball_start(), 40, law, seed=7)
    text = write_pseudo(pt)
    assert text.splitlines()[0].startswith("# law kind=nonuniform delta=0.001")
    back = read_pseudo(text)
    np.testing.assert_array_equal(back.states, pt.states)
    np.testing.assert_array_equal(back.gap_log, pt.gap_log)
    assert back.law == pt.law
    assert write_pseudo(back) == text


def test_read_rejects_missing_header():
    with pytest.raises(ValueError, match="schema mismatch"):
        read_pseudo("t,x0\n0,1\n")
