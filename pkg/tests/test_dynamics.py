import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeode import dual as dn
from safeode.dynamics import (
    AugmentedState,
    ControlBounds,
    ControlPair,
    SingularSteeringError,
    VehicleState,
    _flow_terms,
    bicycle_flow,
    bicycle_flow_array,
    derivative_along,
    directional_derivative,
    linearize_in_rate,
    rk4_step,
    shift,
)
from safeode.hocbf import BarrierStack, ObstacleDisk, psi_functions

from helpers import augmented_rk4, rel_err

finite = st.floats(-50, 50, allow_nan=False)
steer = st.floats(-1.2, 1.2)


def test_flow_straight():
    f = bicycle_flow(VehicleState(0, 0, 0, 10), ControlPair(0, 0), 2.0)
    assert np.allclose(f, [10, 0, 0, 0], atol=1e-15)


def test_flow_axis_aligned():
    f = bicycle_flow(VehicleState(0, 0, math.pi / 2, 4), ControlPair(0, 1), 2.0)
    assert np.allclose(f, [0, 4, 0, 1], atol=1e-14)


def test_flow_matches_rollout_differences():
    s, u = VehicleState(1, 2, 0.3, 5), ControlPair(0.2, -1)
    h = 1e-4
    fd = (rk4_step(s, u, h).as_array() - rk4_step(s, u, -h).as_array()) / (2 * h)
    assert rel_err(bicycle_flow(s, u, 2.0), fd) <= 1e-6


def test_flow_array_matches_scalar(rng):
    Z = np.column_stack([rng.normal(size=(20, 4)), rng.uniform(-1, 1, (20, 1)), rng.normal(size=(20, 1))])
    F = bicycle_flow_array(Z)
    for z, f in zip(Z, F):
        assert np.allclose(f, bicycle_flow(VehicleState.from_array(z), ControlPair(*z[4:])), rtol=0, atol=1e-14)


def test_singular_steering_rejected():
    with pytest.raises(SingularSteeringError):
        bicycle_flow(VehicleState(0, 0, 0, 1), ControlPair(math.pi / 2, 0))
    with pytest.raises(ValueError):
        bicycle_flow(VehicleState(0, 0, 0, 1), ControlPair(0, 0), wheelbase=0.0)


def test_bounds_validation():
    with pytest.raises(ValueError):
        ControlBounds(ControlPair(1, 0), ControlPair(0, 1))


def test_directional_derivative_speed():
    a = AugmentedState(VehicleState(3, 1, 0.2, 7), ControlPair(0.1, 3.0))
    assert directional_derivative(lambda a: a.state.v, a, (0.0, 3.0)) == pytest.approx(3.0, abs=1e-15)


def test_directional_derivative_x():
    a = AugmentedState(VehicleState(0, 0, 0, 10), ControlPair(0.3, -2))
    assert directional_derivative(lambda a: a.state.x, a, (1.0, 1.0)) == pytest.approx(10.0, abs=1e-14)


def test_directional_derivative_psi2_along_flow(rng):
    stack = BarrierStack(ObstacleDisk(20, 1, 5, 0.0, 6.0, 0.0))
    psi2 = psi_functions(stack)[2]
    for _ in range(10):
        z = np.array([rng.uniform(-30, 0), rng.uniform(-3, 5), rng.uniform(-0.3, 0.3),
                      rng.uniform(5, 12), rng.uniform(-0.3, 0.3), rng.uniform(-3, 3)])
        t = rng.uniform(0, 3)
        udot = rng.normal(size=2)
        a = AugmentedState.from_array(z, t)
        h = 1e-4
        zp, tp = augmented_rk4(z, t, udot, h)
        zm, tm = augmented_rk4(z, t, udot, -h)
        fd = (psi2(AugmentedState.from_array(zp, tp)) - psi2(AugmentedState.from_array(zm, tm))) / (2 * h)
        an = directional_derivative(psi2, a, udot)
        assert abs(an - fd) <= 1e-5 * max(abs(fd), 1.0)


def test_linearize_independent_of_control():
    a = AugmentedState(VehicleState(1, 2, 0.1, 8), ControlPair(0.2, 1))
    A, c = linearize_in_rate(lambda a: a.state.x ** 2 + a.state.y, a)
    assert np.all(A == 0.0)
    assert c == pytest.approx(2 * 1 * 8 * math.cos(0.1) + 8 * math.sin(0.1))


def test_linearize_reconstructs_directional(rng):
    stack = BarrierStack.with_gains(ObstacleDisk(10, 2, 5, 0.0, 6.0, 0.5), (1.3, 0.7, 1.0))
    psi2 = psi_functions(stack)[2]
    a = AugmentedState.from_array(np.array([-5.0, 0.5, 0.1, 9.0, 0.05, 1.0]), 0.4)
    A, c = linearize_in_rate(psi2, a)
    for _ in range(100):
        ud = rng.normal(scale=3, size=2)
        d = directional_derivative(psi2, a, ud)
        assert abs(A @ ud + c - d) <= 1e-12 * max(1.0, abs(d))


def test_linearize_psi2_u2_coefficient(rng):
    obs = ObstacleDisk(20, 0, 5)
    psi2 = psi_functions(BarrierStack(obs))[2]
    for _ in range(20):
        x, y, th = rng.uniform(-20, 10), rng.uniform(-5, 5), rng.uniform(-1, 1)
        a = AugmentedState(VehicleState(x, y, th, rng.uniform(1, 12)), ControlPair(rng.uniform(-0.5, 0.5), 0.3))
        A, _ = linearize_in_rate(psi2, a)
        expect = 2 * (x - 20) * math.cos(th) + 2 * y * math.sin(th)
        assert A[1] == pytest.approx(expect, rel=1e-12, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(finite, finite, st.floats(-3, 3), st.floats(-20, 20), steer, st.floats(-5, 5),
       st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_flow_forward_mode_matches_fd(x, y, th, v, u1, u2, d):
    # derivative of each flow component in a random direction of (theta, v, u1, u2)
    tag = dn.new_tag()
    duals = [dn.Dual(th, d[0], tag), dn.Dual(v, d[1], tag), dn.Dual(u1, d[2], tag), dn.Dual(u2, d[3], tag)]
    ad = np.array([float(dn.tangent(f, tag)) for f in _flow_terms(*duals, 2.0)])
    h = 1e-6

    def F(e):
        return np.array(_flow_terms(th + e * d[0], v + e * d[1], u1 + e * d[2], u2 + e * d[3], 2.0), dtype=float)

    fd = (F(h) - F(-h)) / (2 * h)
    scale = max(1.0, float(np.max(np.abs(ad))))
    assert np.max(np.abs(ad - fd)) <= 1e-5 * scale


@settings(max_examples=100, deadline=None)
@given(finite, finite, st.floats(-3, 3), st.floats(0, 20), steer, st.floats(-5, 5), finite, finite)
def test_flow_translation_invariant(x, y, th, v, u1, u2, dx, dy):
    s = VehicleState(x, y, th, v)
    u = ControlPair(u1, u2)
    assert np.array_equal(bicycle_flow(s, u), bicycle_flow(shift(s, dx, dy), u))


def test_derivative_along_rejects_nonfinite():
    a = AugmentedState(VehicleState(0, 0, 0, 1), ControlPair(0, 0))
    with pytest.raises(ArithmeticError):
        derivative_along(lambda a: dn.sqrt(a.state.x), a, (1, 0, 0, 0), (0, 0), 0)
