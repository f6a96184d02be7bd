"""High-order control barrier functions for non-affine dynamics.

With linear class-K functions ``alpha_i(s) = p_i * s`` the recursion is

    psi_0 = b
    psi_i = d/dt psi_{i-1} + p_i * psi_{i-1},   i = 1..m

where ``psi_m`` depends on the control nonlinearly. One more derivative,
taken along the augmented flow, is affine in the control rate ``u_dot``:

    psi_{m+1} = d/dt psi_m + theta_p * p_{m+1} * psi_m  >=  0

That last inequality, plus control-bound rows, are the linear constraints
of the projection QP in :mod:`safeode.diffqp`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import core
from .dynamics import (
    DEFAULT_WHEELBASE,
    AugmentedState,
    ControlBounds,
    ControlPair,
    VehicleState,
    _check_steering,
    directional_derivative,
    linearize_in_rate,
)


@dataclass(frozen=True)
class ClassKLinear:
    p: float

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError("class-K gain must be positive")

    def __call__(self, s):
        return self.p * s


@dataclass(frozen=True)
class ObstacleDisk:
    """Disk ``(x - cx(t))^2 + (y - (cy(t) - y_off))^2 >= r^2``.

    The center moves with constant velocity ``(vx, vy)``.
    """

    cx: float
    cy: float
    r: float
    y_off: float = 0.0
    vx: float = 0.0
    vy: float = 0.0

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("disk radius must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.r, self.y_off, self.vx, self.vy], dtype=float)

    def center_at(self, t):
        return self.cx + self.vx * t, self.cy - self.y_off + self.vy * t


@dataclass(frozen=True)
class BarrierStack:
    """Obstacle plus gains ``p_1..p_{m+1}`` and the penalty ``theta_p``."""

    obstacle: ObstacleDisk
    gains: tuple[ClassKLinear, ...] = field(
        default_factory=lambda: (ClassKLinear(1.0), ClassKLinear(1.0), ClassKLinear(1.0))
    )
    theta_p: float = 1.0
    relative_degree: int = 2

    def __post_init__(self):
        if self.relative_degree < 1:
            raise ValueError("relative degree must be at least 1")
        if len(self.gains) != self.relative_degree + 1:
            raise ValueError("need relative_degree + 1 class-K gains")
        if not self.theta_p > 0:
            raise ValueError("theta_p must be positive")

    @classmethod
    def with_gains(cls, obstacle, gains, theta_p=1.0, relative_degree=2):
        return cls(obstacle, tuple(ClassKLinear(float(p)) for p in gains), float(theta_p), relative_degree)


@dataclass(frozen=True)
class LinearRow:
    """Constraint ``a . u_dot + c >= 0``."""

    a: np.ndarray
    c: float

    def residual(self, u_dot) -> float:
        return float(np.dot(self.a, u_dot) + self.c)


def barrier(s: VehicleState, obs: ObstacleDisk, t=0.0):
    cx, cy = obs.center_at(t)
    return (s.x - cx) ** 2 + (s.y - cy) ** 2 - obs.r ** 2


def psi_functions(stack: BarrierStack, wheelbase: float = DEFAULT_WHEELBASE):
    """Callables ``[psi_0, ..., psi_m]`` of an :class:`AugmentedState`.

    ``psi_i`` for ``i < m`` must not depend on the control; the derivative
    that builds ``psi_{i+1}`` is taken with zero control rate, so any hidden
    control dependence would be silently dropped. ``psi_m`` is where the
    control first shows up.
    """
    obs = stack.obstacle

    def psi0(a: AugmentedState):
        return barrier(a.state, obs, a.t)

    fns = [psi0]
    for i in range(stack.relative_degree):
        prev = fns[-1]
        gain = stack.gains[i]

        def psi(a, prev=prev, gain=gain):
            return directional_derivative(prev, a, (0.0, 0.0), wheelbase) + gain(prev(a))

        fns.append(psi)
    return fns


def psi_chain(a: AugmentedState, stack: BarrierStack, wheelbase: float = DEFAULT_WHEELBASE) -> list[float]:
    """Values ``[psi_0, ..., psi_m]`` at ``a``."""
    return [float(f(a)) for f in psi_functions(stack, wheelbase)]


def motivating_psi2(
    s: VehicleState,
    u: ControlPair,
    obs: ObstacleDisk,
    wheelbase: float = DEFAULT_WHEELBASE,
) -> float:
    """Closed-form ``psi_2`` for a static centered disk and unit gains.

    ``psi_2 = b_ddot + 2 b_dot + b`` written out term by term, where
    ``b_ddot = 2 v^2 + (tan u1 term) + (u2 term)``.
    """
    if obs.y_off != 0.0 or obs.vx != 0.0 or obs.vy != 0.0:
        raise ValueError("closed form assumes a static, centered disk")
    _check_steering(u.u1)
    dx = s.x - obs.cx
    dy = s.y - obs.cy
    st, ct = math.sin(s.theta), math.cos(s.theta)
    b = dx * dx + dy * dy - obs.r ** 2
    b_dot = 2 * dx * s.v * ct + 2 * dy * s.v * st
    steer = (-2 * dx * st + 2 * dy * ct) * s.v ** 2 / wheelbase * math.tan(u.u1)
    accel = (2 * dx * ct + 2 * dy * st) * u.u2
    return steer + accel + 2 * s.v ** 2 + 2 * b_dot + b


def lifted_constraint(a: AugmentedState, stack: BarrierStack, wheelbase: float = DEFAULT_WHEELBASE) -> LinearRow:
    """Row for ``psi_{m+1} = psi_m_dot + theta_p * p_{m+1} * psi_m >= 0``."""
    psi_m = psi_functions(stack, wheelbase)[-1]
    A, c = linearize_in_rate(psi_m, a, wheelbase)
    k = stack.theta_p * stack.gains[-1].p
    c += k * float(psi_m(a))
    if not (np.all(np.isfinite(A)) and math.isfinite(c)):
        raise ArithmeticError("non-finite barrier row")
    return LinearRow(A, c)


def bicycle_row(z, t, obs: ObstacleDisk, p1, p2, k, wheelbase=DEFAULT_WHEELBASE):
    """Fast lifted row for the bicycle (``m = 2``) with its Jacobian.

    Same constraint as :func:`lifted_constraint`, written in closed form
    and evaluated by the kernel core. ``k = theta_p * p_3``. Returns
    ``(a, c, psi, jac)``; see ``_pycore.bicycle_row``.
    """
    _check_steering(z[4])
    return core.bicycle_row(np.asarray(z, dtype=float), float(t), obs.as_array(), wheelbase, p1, p2, k)


def bound_rows(u: ControlPair, bounds: ControlBounds) -> list[LinearRow]:
    """Rows ``u_dot + u - u_min >= 0`` and ``-u_dot + u_max - u >= 0``."""
    lo, hi = bounds.lower, bounds.upper
    uu = u.as_array()
    e = np.eye(2)
    return [
        LinearRow(e[0].copy(), float(uu[0] - lo[0])),
        LinearRow(e[1].copy(), float(uu[1] - lo[1])),
        LinearRow(-e[0], float(hi[0] - uu[0])),
        LinearRow(-e[1], float(hi[1] - uu[1])),
    ]


def bound_rows_array(U: np.ndarray, bounds: ControlBounds):
    """Batch form: returns ``(A (4, 2), C (B, 4))``."""
    lo, hi = bounds.lower, bounds.upper
    A = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    C = np.concatenate([U - lo, hi - U], axis=1)
    return A, C


__all__ = [
    "ClassKLinear",
    "ObstacleDisk",
    "BarrierStack",
    "LinearRow",
    "barrier",
    "psi_functions",
    "psi_chain",
    "motivating_psi2",
    "lifted_constraint",
    "bicycle_row",
    "bound_rows",
    "bound_rows_array",
]

