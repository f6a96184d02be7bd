import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeode.dynamics import DEFAULT_BOUNDS, AugmentedState, ControlBounds, ControlPair, VehicleState, \
    directional_derivative
from safeode.hocbf import (
    BarrierStack,
    ClassKLinear,
    ObstacleDisk,
    barrier,
    bicycle_row,
    bound_rows,
    bound_rows_array,
    lifted_constraint,
    motivating_psi2,
    psi_chain,
    psi_functions,
)

from helpers import psi2_closed_form, rel_err


def random_aug(rng, t=0.0):
    z = np.array([rng.uniform(-40, 20), rng.uniform(-8, 8), rng.uniform(-1, 1), rng.uniform(0, 15),
                  rng.uniform(-0.6, 0.6), rng.uniform(-5, 5)])
    return AugmentedState.from_array(z, t)


def test_barrier_at_center():
    obs = ObstacleDisk(3, 4, 5, y_off=1.0)
    assert barrier(VehicleState(3, 3, 0, 0), obs) == -25


def test_barrier_example():
    assert barrier(VehicleState(0, 0, 0, 0), ObstacleDisk(20, 0, 5)) == 375


@given(st.floats(0, 2 * math.pi), st.floats(-30, 30), st.floats(-30, 30), st.floats(0.5, 10))
def test_barrier_zero_on_circle(phi, cx, cy, r):
    obs = ObstacleDisk(cx, cy, r, y_off=0.7)
    s = VehicleState(cx + r * math.cos(phi), cy - 0.7 + r * math.sin(phi), 0, 0)
    assert abs(barrier(s, obs)) <= 1e-9 * max(1.0, cx * cx + cy * cy)


def test_moving_obstacle_center():
    obs = ObstacleDisk(0, 2, 5, y_off=1, vx=6, vy=-1)
    assert obs.center_at(2.0) == (12.0, -1.0)
    assert barrier(VehicleState(12, -1, 0, 0), obs, 2.0) == -25


def test_invalid_parameters():
    with pytest.raises(ValueError):
        ClassKLinear(0.0)
    with pytest.raises(ValueError):
        ObstacleDisk(0, 0, 0)
    with pytest.raises(ValueError):
        BarrierStack(ObstacleDisk(0, 0, 1), theta_p=-1)
    with pytest.raises(ValueError):
        BarrierStack.with_gains(ObstacleDisk(0, 0, 1), (1, 1))


def test_psi0_is_barrier(rng):
    obs = ObstacleDisk(5, 1, 5, 0.5, 6, 0)
    stack = BarrierStack(obs)
    for _ in range(20):
        a = random_aug(rng, rng.uniform(0, 5))
        assert psi_chain(a, stack)[0] == barrier(a.state, obs, a.t)


def test_psi1_example():
    a = AugmentedState(VehicleState(0, 0, 0, 10), ControlPair(0, 0))
    psi = psi_chain(a, BarrierStack(ObstacleDisk(20, 0, 5)))
    assert psi[1] == pytest.approx(-25.0, abs=1e-12)


def test_motivating_psi2_term_by_term():
    # b = 375, b_dot = 2 * (-20) * 10 = -400, 2 v^2 = 200; no steering or acceleration terms
    val = motivating_psi2(VehicleState(0, 0, 0, 10), ControlPair(0, 0), ObstacleDisk(20, 0, 5))
    assert val == pytest.approx(2 * 100 + 2 * (-400) + 375)
    assert val == pytest.approx(-225.0)


def test_motivating_psi2_straight_steering_has_no_tan_term(rng):
    obs = ObstacleDisk(20, 0, 5)
    for _ in range(20):
        s = VehicleState(rng.uniform(-20, 20), rng.uniform(-5, 5), rng.uniform(-1, 1), rng.uniform(0, 10))
        u = ControlPair(0.0, rng.uniform(-5, 5))
        assert motivating_psi2(s, u, obs, 2.0) == motivating_psi2(s, u, obs, 7.0)


def test_motivating_psi2_rejects_moving_disk():
    with pytest.raises(ValueError):
        motivating_psi2(VehicleState(0, 0, 0, 1), ControlPair(0, 0), ObstacleDisk(0, 0, 1, vx=1.0))


def test_psi2_generic_matches_closed_form(rng):
    obs = ObstacleDisk(20, 0, 5)
    stack = BarrierStack(obs)
    for _ in range(1000):
        a = random_aug(rng)
        s, u = a.state, a.control
        ref = psi2_closed_form(s.x, s.y, s.theta, s.v, u.u1, u.u2, 20, 0, 5)
        got = psi_chain(a, stack)[2]
        assert abs(got - ref) <= 1e-9 * max(abs(ref), 1.0)
        assert abs(motivating_psi2(s, u, obs) - ref) <= 1e-9 * max(abs(ref), 1.0)


def test_lifted_row_inactive_when_far_and_receding():
    stack = BarrierStack(ObstacleDisk(0, 0, 5))
    a = AugmentedState(VehicleState(-60, 0, math.pi, 10), ControlPair(0, 0))
    row = lifted_constraint(a, stack)
    assert row.c > 0
    assert row.residual([0, 0]) > 0


def test_lifted_row_reconstruction(rng):
    stack = BarrierStack.with_gains(ObstacleDisk(0, 0, 5, 0.0, 6, 0), (1.2, 0.8, 1.5), theta_p=0.7)
    psi_m = psi_functions(stack)[-1]
    for _ in range(50):
        a = random_aug(rng, rng.uniform(0, 5))
        row = lifted_constraint(a, stack)
        ud = rng.normal(scale=2, size=2)
        ref = directional_derivative(psi_m, a, ud) + 0.7 * 1.5 * psi_m(a)
        assert abs(row.residual(ud) - ref) <= 1e-12 * max(1.0, abs(ref))


def test_lifted_row_theta_p_dependence(rng):
    obs = ObstacleDisk(0, 0, 5, 0.0, 6, 0)
    for _ in range(20):
        a = random_aug(rng, 1.0)
        tp, h = 0.9, 1e-6
        r0 = lifted_constraint(a, BarrierStack.with_gains(obs, (1, 1, 1.3), tp))
        rp = lifted_constraint(a, BarrierStack.with_gains(obs, (1, 1, 1.3), tp + h))
        rm = lifted_constraint(a, BarrierStack.with_gains(obs, (1, 1, 1.3), tp - h))
        psi_m = psi_chain(a, BarrierStack(obs))[-1]
        fd = (rp.c - rm.c) / (2 * h)
        assert abs(fd - 1.3 * psi_m) <= 1e-6 * max(1.0, abs(psi_m))
        assert np.array_equal(r0.a, rp.a) and np.array_equal(r0.a, rm.a)


def test_fast_row_matches_generic(rng):
    for _ in range(100):
        obs = ObstacleDisk(rng.uniform(-5, 5), rng.uniform(-2, 2), rng.uniform(2, 6), rng.uniform(0, 1),
                           rng.uniform(0, 8), rng.uniform(-1, 1))
        p1, p2, p3, tp = rng.uniform(0.3, 3, 4)
        a = random_aug(rng, rng.uniform(0, 5))
        row = lifted_constraint(a, BarrierStack.with_gains(obs, (p1, p2, p3), tp))
        A, c, psi, _ = bicycle_row(a.as_array(), a.t, obs, p1, p2, tp * p3)
        assert rel_err(A, row.a) <= 1e-10
        assert abs(c - row.c) <= 1e-10 * max(1.0, abs(row.c))
        assert rel_err(psi, psi_chain(a, BarrierStack.with_gains(obs, (p1, p2, p3), tp))) <= 1e-10


def test_fast_row_jacobian(rng):
    obs = ObstacleDisk(1, 0.5, 5, 0.0, 6, 0)
    for _ in range(20):
        z = random_aug(rng).as_array()
        p = np.array([1.1, 0.9])
        k = 1.3
        A, c, psi, J = bicycle_row(z, 0.7, obs, *p, k)
        h = 1e-6
        x = np.concatenate([z, p])
        fd = np.zeros((3, 8))
        for j in range(8):
            e = np.zeros(8)
            e[j] = h
            hi = bicycle_row((x + e)[:6], 0.7, obs, *(x + e)[6:], k)
            lo = bicycle_row((x - e)[:6], 0.7, obs, *(x - e)[6:], k)
            fd[:2, j] = (hi[0] - lo[0]) / (2 * h)
            fd[2, j] = (hi[1] - lo[1]) / (2 * h)
        assert np.max(np.abs(J - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))
        # dc/dk is psi_2
        ck = (bicycle_row(z, 0.7, obs, *p, k + h)[1] - bicycle_row(z, 0.7, obs, *p, k - h)[1]) / (2 * h)
        assert abs(ck - psi[2]) <= 1e-6 * max(1.0, abs(psi[2]))


def test_bound_rows_at_lower_bound():
    rows = bound_rows(DEFAULT_BOUNDS.u_min, DEFAULT_BOUNDS)
    assert rows[0].c == 0 and rows[1].c == 0
    assert list(rows[0].a) == [1, 0] and list(rows[1].a) == [0, 1]


def test_bound_rows_symmetric_midpoint():
    b = ControlBounds(ControlPair(-1, -1), ControlPair(1, 1))
    rows = bound_rows(ControlPair(0, 0), b)
    assert [r.c for r in rows] == [1, 1, 1, 1]
    assert [list(r.a) for r in rows] == [[1, 0], [0, 1], [-1, 0], [0, -1]]


def test_bound_rows_array_matches(rng):
    U = rng.uniform(-0.5, 0.5, size=(7, 2))
    A, C = bound_rows_array(U, DEFAULT_BOUNDS)
    for u, c in zip(U, C):
        rows = bound_rows(ControlPair(*u), DEFAULT_BOUNDS)
        assert np.array_equal(A, np.array([r.a for r in rows]))
        assert np.allclose(c, [r.c for r in rows], atol=0, rtol=0)


def test_bound_rows_keep_control_in_bounds(rng):
    lo, hi = DEFAULT_BOUNDS.lower, DEFAULT_BOUNDS.upper
    u = np.zeros(2)
    for _ in range(1000):
        h = rng.uniform(0.01, 1.0)
        rows = bound_rows(ControlPair(*u), DEFAULT_BOUNDS)
        ud = rng.uniform(lo - u, hi - u)  # any rate satisfying all four rows
        assert all(r.residual(ud) >= -1e-12 for r in rows)
        u = u + h * ud
        assert np.all(u >= lo - 1e-12) and np.all(u <= hi + 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0.1, 5), st.integers(0, 10 ** 6))
def test_row_coefficients_independent_of_theta_p(p1, p2, p3, tp, seed):
    rng = np.random.default_rng(seed)
    a = random_aug(rng)
    obs = ObstacleDisk(0, 0, 5)
    r1 = lifted_constraint(a, BarrierStack.with_gains(obs, (p1, p2, p3), tp))
    r2 = lifted_constraint(a, BarrierStack.with_gains(obs, (p1, p2, p3), 1.0))
    assert np.array_equal(r1.a, r2.a)
    psi_m = psi_chain(a, BarrierStack.with_gains(obs, (p1, p2, p3)))[-1]
    assert abs((r1.c - r2.c) - (tp - 1.0) * p3 * psi_m) <= 1e-9 * max(1.0, abs(r1.c), abs(r2.c))
