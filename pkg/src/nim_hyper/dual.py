"""Vectorized forward-mode dual numbers.

A :class:`Dual` carries a value array of shape ``S`` and a tangent array of
shape ``(k,) + S`` holding ``k`` directional derivatives at once. Keeping the
tangent axis first makes every operation a contiguous sweep over the sample
points. The value and tangent of an outer dual may themselves be duals (one
level of nesting), which yields second derivatives.
"""
from __future__ import annotations

import numpy as np


def _lift(v):
    """Prepend a length-1 axis so ``v`` broadcasts against a tangent array."""
    if isinstance(v, Dual):
        return Dual(_lift(v.val), v.eps[:, None])
    if isinstance(v, np.ndarray):
        return v[None]
    return v if np.ndim(v) == 0 else np.asarray(v)[None]


class Dual:
    __slots__ = ("val", "eps")
    __array_ufunc__ = None  # ndarray (op) Dual falls through to the reflected method

    def __init__(self, val, eps):
        self.val = val
        self.eps = eps

    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val + o.val, self.eps + o.eps)
        return Dual(self.val + o, self.eps)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, -self.eps)

    def __sub__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val - o.val, self.eps - o.eps)
        return Dual(self.val - o, self.eps)

    def __rsub__(self, o):
        return Dual(o - self.val, -self.eps)

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val * o.val, _lift(self.val) * o.eps + _lift(o.val) * self.eps)
        return Dual(self.val * o, _lift(o) * self.eps)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual):
            inv = 1.0 / o.val
            q = self.val * inv
            return Dual(q, (self.eps - _lift(q) * o.eps) * _lift(inv))
        inv = 1.0 / o
        return Dual(self.val * inv, self.eps * _lift(inv))

    def __rtruediv__(self, o):
        inv = 1.0 / self.val
        q = o * inv
        return Dual(q, _lift(-(q * inv)) * self.eps)

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise TypeError("dual exponents are not supported")
        if p == 2:
            return self * self
        return Dual(self.val**p, _lift(p * self.val ** (p - 1)) * self.eps)

    def __repr__(self):
        return f"Dual({self.val!r}, {self.eps!r})"


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.val), x.eps * _lift(1.0 / x.val))
    return np.log(x)


def sqrt(x):
    if isinstance(x, Dual):
        r = sqrt(x.val)
        return Dual(r, x.eps * _lift(0.5 / r))
    return np.sqrt(x)


def exp(x):
    if isinstance(x, Dual):
        e = exp(x.val)
        return Dual(e, x.eps * _lift(e))
    return np.exp(x)


def value(x):
    """Innermost real value of a (possibly nested) dual."""
    while isinstance(x, Dual):
        x = x.val
    return x


def tangents_last(eps, n_axes: int = 1):
    """Move the leading ``n_axes`` tangent axes to the end (reversed order)."""
    eps = np.asarray(eps)
    return np.moveaxis(eps, tuple(range(n_axes)), tuple(range(-1, -n_axes - 1, -1)))


def seed(values):
    """First-order duals whose tangents are the unit vectors of their position."""
    values = [np.asarray(v, dtype=float) for v in values]
    k = len(values)
    out = []
    for i, v in enumerate(values):
        e = np.zeros((k,) + v.shape)
        e[i] = 1.0
        out.append(Dual(v, e))
    return out


def seed_nested(values, directions=None):
    """Second-order seeds: inner tangents are unit vectors, outer tangents are
    unit vectors too (full Hessian) or ``directions[..., i]`` for input ``i``
    (one Hessian-vector product per sample).

    For a scalar function ``f`` of the seeded inputs ``r = f(*seeds)``:
    ``r.val.val`` is f, ``r.val.eps`` the gradient (``[inner, ...]``) and
    ``r.eps.eps`` the Hessian or Hessian-direction products
    (``[inner, outer, ...]``).
    """
    values = [np.asarray(v, dtype=float) for v in values]
    k = len(values)
    out = []
    for i, v in enumerate(values):
        inner_e = np.zeros((k,) + v.shape)
        inner_e[i] = 1.0
        inner = Dual(v, inner_e)
        if directions is None:
            outer_v = np.zeros((k,) + v.shape)
            outer_v[i] = 1.0
        else:
            outer_v = np.asarray(directions[..., i], dtype=float)[None]
        outer_eps = Dual(outer_v, np.zeros((k,) + outer_v.shape))
        out.append(Dual(inner, outer_eps))
    return out
