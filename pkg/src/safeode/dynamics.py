"""Kinematic bicycle dynamics and derivatives along the augmented flow.

The augmented state joins the vehicle state ``(x, y, theta, v)``, the
control ``(u1, u2)`` and time. Along the flow the state follows the bicycle
model, the control follows a given rate ``u_dot`` and time advances at unit
rate. Derivatives along that flow are taken with forward-mode duals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import dual as dn
from .dual import Dual

DEFAULT_WHEELBASE = 2.0
STEER_LIMIT = math.pi / 2 - 1e-6


class SingularSteeringError(ValueError):
    """Steering angle at or beyond the tan singularity."""


class EvaluationError(ArithmeticError):
    """A derivative evaluation produced a non-finite value."""


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v], dtype=float)

    @classmethod
    def from_array(cls, a) -> "VehicleState":
        return cls(*(float(v) for v in a[:4]))


@dataclass(frozen=True)
class ControlPair:
    u1: float  # steering angle, rad
    u2: float  # acceleration, m/s^2

    def as_array(self) -> np.ndarray:
        return np.array([self.u1, self.u2], dtype=float)

    @classmethod
    def from_array(cls, a) -> "ControlPair":
        return cls(float(a[0]), float(a[1]))


@dataclass(frozen=True)
class ControlBounds:
    u_min: ControlPair
    u_max: ControlPair

    def __post_init__(self):
        if not (self.u_min.u1 < self.u_max.u1 and self.u_min.u2 < self.u_max.u2):
            raise ValueError("control bounds require u_min < u_max component-wise")

    @property
    def lower(self) -> np.ndarray:
        return self.u_min.as_array()

    @property
    def upper(self) -> np.ndarray:
        return self.u_max.as_array()

    def contains(self, u, tol: float = 0.0) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))


DEFAULT_BOUNDS = ControlBounds(ControlPair(-0.6, -5.0), ControlPair(0.6, 5.0))


@dataclass(frozen=True)
class AugmentedState:
    state: VehicleState
    control: ControlPair
    t: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.state.as_array(), self.control.as_array()])

    @classmethod
    def from_array(cls, z, t: float = 0.0) -> "AugmentedState":
        return cls(VehicleState.from_array(z[:4]), ControlPair.from_array(z[4:6]), float(t))


def _check_steering(u1) -> None:
    if abs(dn.primal(u1)) >= STEER_LIMIT:
        raise SingularSteeringError(f"steering angle {dn.primal(u1)!r} too close to pi/2")


def _flow_terms(theta, v, u1, u2, wheelbase):
    return (
        v * dn.cos(theta),
        v * dn.sin(theta),
        v / wheelbase * dn.tan(u1),
        u2,
    )


def bicycle_flow(s: VehicleState, u: ControlPair, wheelbase: float = DEFAULT_WHEELBASE) -> np.ndarray:
    """State derivative ``(x_dot, y_dot, theta_dot, v_dot)`` of the bicycle."""
    if wheelbase <= 0:
        raise ValueError("wheelbase must be positive")
    _check_steering(u.u1)
    return np.array(_flow_terms(s.theta, s.v, u.u1, u.u2, wheelbase), dtype=float)


def bicycle_flow_array(z: np.ndarray, wheelbase: float = DEFAULT_WHEELBASE) -> np.ndarray:
    """Vectorised bicycle flow for rows ``(x, y, theta, v, u1, u2)``."""
    z = np.asarray(z, dtype=float)
    th, v, u1, u2 = z[..., 2], z[..., 3], z[..., 4], z[..., 5]
    if np.any(np.abs(u1) >= STEER_LIMIT):
        raise SingularSteeringError("steering angle too close to pi/2")
    return np.stack([v * np.cos(th), v * np.sin(th), v / wheelbase * np.tan(u1), u2], axis=-1)


ScalarFn = Callable[[AugmentedState], object]


def derivative_along(f: ScalarFn, a: AugmentedState, d_state, d_control, d_t):
    """Derivative of ``f`` at ``a`` along the direction (d_state, d_control, d_t).

    Components of ``a`` and of the direction may themselves be duals, which
    is how higher derivatives along the flow are built up.
    """
    tag = dn.new_tag()
    s, u = a.state, a.control
    pert = AugmentedState(
        VehicleState(
            Dual(s.x, d_state[0], tag),
            Dual(s.y, d_state[1], tag),
            Dual(s.theta, d_state[2], tag),
            Dual(s.v, d_state[3], tag),
        ),
        ControlPair(Dual(u.u1, d_control[0], tag), Dual(u.u2, d_control[1], tag)),
        Dual(a.t, d_t, tag),
    )
    out = dn.tangent(f(pert), tag)
    if not dn.is_finite(out):
        raise EvaluationError("non-finite derivative")
    return out


def _flow_direction(a: AugmentedState, wheelbase: float):
    _check_steering(a.control.u1)
    return _flow_terms(a.state.theta, a.state.v, a.control.u1, a.control.u2, wheelbase)


def directional_derivative(
    f: ScalarFn,
    a: AugmentedState,
    u_dot,
    wheelbase: float = DEFAULT_WHEELBASE,
):
    """Time derivative of ``f`` along the augmented flow with control rate ``u_dot``.

    Equals ``grad_x f . h(x, u) + grad_u f . u_dot + df/dt``.
    """
    if isinstance(u_dot, ControlPair):
        u_dot = (u_dot.u1, u_dot.u2)
    return derivative_along(f, a, _flow_direction(a, wheelbase), tuple(u_dot), 1.0)


def linearize_in_rate(f: ScalarFn, a: AugmentedState, wheelbase: float = DEFAULT_WHEELBASE):
    """Split the flow derivative of ``f`` as ``A . u_dot + c``.

    ``A`` is the control gradient of ``f`` and ``c`` the derivative along the
    state flow (plus explicit time dependence).
    """
    A = np.array(
        [
            float(derivative_along(f, a, (0.0,) * 4, (1.0, 0.0), 0.0)),
            float(derivative_along(f, a, (0.0,) * 4, (0.0, 1.0), 0.0)),
        ]
    )
    c = float(derivative_along(f, a, _flow_direction(a, wheelbase), (0.0, 0.0), 1.0))
    return A, c


def rk4_step(s: VehicleState, u: ControlPair, dt: float, wheelbase: float = DEFAULT_WHEELBASE) -> VehicleState:
    """One RK4 step of the bicycle with the control held constant."""
    z = s.as_array()

    def f(zz):
        return bicycle_flow(VehicleState.from_array(zz), u, wheelbase)

    k1 = f(z)
    k2 = f(z + 0.5 * dt * k1)
    k3 = f(z + 0.5 * dt * k2)
    k4 = f(z + dt * k3)
    return VehicleState.from_array(z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))


def shift(s: VehicleState, dx: float, dy: float) -> VehicleState:
    return replace(s, x=s.x + dx, y=s.y + dy)
