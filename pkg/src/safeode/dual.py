"""Tagged forward-mode dual numbers.

Each :class:`Dual` carries an integer tag naming the infinitesimal it
differentiates against. Nesting is allowed: a dual's value or tangent may
itself be a dual with a lower tag. Arithmetic between duals with different
tags treats the lower-tagged operand as a constant of the higher tag, so
nested derivatives never confuse their perturbations.

Tangents may be floats or numpy arrays (for gradients along several
directions at once).
"""

from __future__ import annotations

import itertools
import math

import numpy as np

_tags = itertools.count(1)


def new_tag() -> int:
    return next(_tags)


class Dual:
    __slots__ = ("val", "eps", "tag")

    def __init__(self, val, eps, tag: int):
        self.val = val
        self.eps = eps
        self.tag = tag

    def __repr__(self) -> str:
        return f"Dual({self.val!r}, {self.eps!r}, tag={self.tag})"

    def _split(self, other):
        """Return (a_val, a_eps, b_val, b_eps, tag) for a binary op."""
        if isinstance(other, Dual):
            if other.tag == self.tag:
                return self.val, self.eps, other.val, other.eps, self.tag
            if other.tag > self.tag:
                return self, 0.0, other.val, other.eps, other.tag
        return self.val, self.eps, other, 0.0, self.tag

    def __add__(self, other):
        a, da, b, db, tag = self._split(other)
        return Dual(a + b, da + db, tag)

    __radd__ = __add__

    def __sub__(self, other):
        a, da, b, db, tag = self._split(other)
        return Dual(a - b, da - db, tag)

    def __rsub__(self, other):
        a, da, b, db, tag = self._split(other)
        return Dual(b - a, db - da, tag)

    def __mul__(self, other):
        a, da, b, db, tag = self._split(other)
        return Dual(a * b, a * db + da * b, tag)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, da, b, db, tag = self._split(other)
        q = a / b
        return Dual(q, (da - q * db) / b, tag)

    def __rtruediv__(self, other):
        a, da, b, db, tag = self._split(other)
        q = b / a
        return Dual(q, (db - q * da) / a, tag)

    def __neg__(self):
        return Dual(-self.val, -self.eps, self.tag)

    def __pos__(self):
        return self

    def __pow__(self, n):
        if not isinstance(n, int):
            raise TypeError("only integer powers are supported")
        if n == 0:
            return 1.0
        if n < 0:
            return 1.0 / self ** (-n)
        return Dual(self.val ** n, n * self.val ** (n - 1) * self.eps, self.tag)


def sin(x):
    if isinstance(x, Dual):
        return Dual(sin(x.val), cos(x.val) * x.eps, x.tag)
    return np.sin(x) if isinstance(x, np.ndarray) else math.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(cos(x.val), -sin(x.val) * x.eps, x.tag)
    return np.cos(x) if isinstance(x, np.ndarray) else math.cos(x)


def tan(x):
    if isinstance(x, Dual):
        t = tan(x.val)
        return Dual(t, (1.0 + t * t) * x.eps, x.tag)
    return np.tan(x) if isinstance(x, np.ndarray) else math.tan(x)


def sqrt(x):
    if isinstance(x, Dual):
        s = sqrt(x.val)
        return Dual(s, x.eps / (2.0 * s), x.tag)
    return np.sqrt(x) if isinstance(x, np.ndarray) else math.sqrt(x)


def primal(x):
    """Innermost real value of a (possibly nested) dual."""
    while isinstance(x, Dual):
        x = x.val
    return x


def tangent(x, tag: int):
    """Derivative part of ``x`` with respect to the infinitesimal ``tag``."""
    if isinstance(x, Dual):
        if x.tag == tag:
            return x.eps
        if x.tag > tag:
            # x depends on a newer perturbation; strip it and keep looking.
            return Dual(tangent(x.val, tag), tangent(x.eps, tag), x.tag)
    return 0.0


def is_finite(x) -> bool:
    if isinstance(x, Dual):
        return is_finite(x.val) and is_finite(x.eps)
    return bool(np.all(np.isfinite(x)))
