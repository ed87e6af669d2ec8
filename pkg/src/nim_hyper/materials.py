"""Hyperelastic strain-energy densities and their derivatives.

Stresses and stress tangents are obtained by forward-mode differentiation of
the energy densities; there are no hand-written stress formulas here. All
functions are vectorized over leading axes of the deformation gradient array
``F`` of shape ``(..., d, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import dual


class InadmissibleStateError(ArithmeticError):
    """Deformation with non-positive volume ratio (or stretch in 1D)."""

    def __init__(self, message: str, index=None):
        super().__init__(message)
        self.index = index


class MaterialKind(str, Enum):
    BAR1D = "bar1d"
    SVK = "svk"
    NEO_HOOKEAN = "neo_hookean"


def lame_parameters(E, nu):
    """Lamé constants (lambda, mu) from Young's modulus and Poisson's ratio."""
    if nu >= 0.5:
        raise ZeroDivisionError("incompressible or unstable Poisson ratio (nu >= 0.5) is unsupported")
    if nu <= -1.0:
        raise ValueError("Poisson ratio must exceed -1")
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    return lam, mu


@dataclass(frozen=True)
class MaterialModel:
    kind: MaterialKind
    E: float = 1.0
    nu: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", MaterialKind(self.kind))
        if self.kind is not MaterialKind.BAR1D:
            if not self.E > 0:
                raise ValueError("Young's modulus must be positive")
            lame_parameters(1.0, self.nu)

    @property
    def scales_with_modulus(self) -> bool:
        return self.kind is not MaterialKind.BAR1D

    def unit(self) -> "MaterialModel":
        """Same model with E = 1; energies of modulus-scaled models are E times this."""
        return MaterialModel(self.kind, 1.0, self.nu)


def _components(F):
    d = F.shape[-1]
    return [F[..., i, j] for i in range(d) for j in range(d)], d


def _energy(kind: MaterialKind, c, d: int, lam, mu):
    """Energy density from flattened (row-major) components of F."""
    if kind is MaterialKind.BAR1D:
        (f,) = c
        return f * dual.sqrt(f) - 1.5 * (f - 1.0) - 1.0
    if d == 1:
        (f,) = c
        ff = f * f
        if kind is MaterialKind.NEO_HOOKEAN:
            lnJ = dual.log(f)
            return 0.5 * lam * lnJ * lnJ - mu * lnJ + 0.5 * mu * (ff - 1.0)
        g00 = 0.5 * (ff - 1.0)
        # single nonzero Green-strain component: I1 = g00, I2 = 0
        return 0.5 * (lam + 2.0 * mu) * g00 * g00
    if d != 2:
        raise ValueError("only 1D and 2D kinematics are supported")
    a, b, cc, e = c
    if kind is MaterialKind.NEO_HOOKEAN:
        # plane strain: C33 = 1, so I1 - 3 = tr(F^T F) - 2
        lnJ = dual.log(a * e - b * cc)
        trC = a * a + b * b + cc * cc + e * e
        return 0.5 * lam * lnJ * lnJ - mu * lnJ + 0.5 * mu * (trC - 2.0)
    # St. Venant-Kirchhoff with invariants of the Green strain (G33 = 0 in plane strain)
    g00 = 0.5 * (a * a + cc * cc - 1.0)
    g11 = 0.5 * (b * b + e * e - 1.0)
    g01 = 0.5 * (a * b + cc * e)
    I1 = g00 + g11
    I2 = g00 * g11 - g01 * g01
    return 0.5 * (lam + 2.0 * mu) * I1 * I1 - 2.0 * mu * I2


def _check_admissible(kind: MaterialKind, F: np.ndarray) -> None:
    d = F.shape[-1]
    if d == 1:
        J = F[..., 0, 0]
    elif d == 2:
        J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    else:
        J = np.linalg.det(F)
    if kind is MaterialKind.SVK:
        bad = ~np.isfinite(J)
    else:
        bad = ~(J > 0)
    if np.any(bad):
        idx = np.unravel_index(int(np.flatnonzero(bad)[0]), np.shape(J)) if np.ndim(J) else None
        raise InadmissibleStateError(
            f"inadmissible deformation (det F = {np.ravel(J)[np.flatnonzero(np.ravel(bad))[0]]:.6g})",
            idx)


def _lame(model: MaterialModel, modulus):
    if model.kind is MaterialKind.BAR1D:
        return 0.0, 0.0
    E = model.E if modulus is None else modulus
    return lame_parameters(E, model.nu)


def energy_density(model: MaterialModel, F, modulus=None):
    """Strain-energy density W(F); ``modulus`` optionally overrides E per point."""
    F = np.asarray(F, dtype=float)
    _check_admissible(model.kind, F)
    c, d = _components(F)
    lam, mu = _lame(model, modulus)
    return np.asarray(_energy(model.kind, c, d, lam, mu))


def pk1_stress(model: MaterialModel, F, modulus=None):
    """First Piola-Kirchhoff stress dW/dF by forward-mode differentiation."""
    F = np.asarray(F, dtype=float)
    _check_admissible(model.kind, F)
    c, d = _components(F)
    lam, mu = _lame(model, modulus)
    W = _energy(model.kind, dual.seed(c), d, lam, mu)
    g = dual.tangents_last(W.eps)
    return np.broadcast_to(g, F.shape[:-2] + (d * d,)).reshape(F.shape)


def pk1_tangent(model: MaterialModel, F, modulus=None):
    """dP/dF as a (..., d*d, d*d) array (row-major flattening) via nested duals."""
    F = np.asarray(F, dtype=float)
    _check_admissible(model.kind, F)
    c, d = _components(F)
    lam, mu = _lame(model, modulus)
    W = _energy(model.kind, dual.seed_nested(c), d, lam, mu)
    # [inner, outer, ...] -> [..., outer, inner]
    H = dual.tangents_last(W.eps.eps, 2)
    return np.broadcast_to(H, F.shape[:-2] + (d * d, d * d)).copy()


def stress_and_tangent_action(model: MaterialModel, F, direction, modulus=None):
    """P(F) and the tangent applied to ``direction``: sum_kl dP_ij/dF_kl * direction_kl.

    One nested forward pass along ``direction`` replaces forming the full
    tangent; the tangent is symmetric so the contraction order is immaterial.
    """
    F = np.asarray(F, dtype=float)
    _check_admissible(model.kind, F)
    c, d = _components(F)
    lam, mu = _lame(model, modulus)
    dirs = np.asarray(direction, dtype=float).reshape(F.shape[:-2] + (d * d,))
    W = _energy(model.kind, dual.seed_nested(c, dirs), d, lam, mu)
    P = np.broadcast_to(dual.tangents_last(W.val.eps), F.shape[:-2] + (d * d,)).reshape(F.shape)
    HW = np.broadcast_to(dual.tangents_last(W.eps.eps[:, 0]), F.shape[:-2] + (d * d,)).reshape(F.shape)
    return P, HW


def green_strain(F):
    F = np.asarray(F, dtype=float)
    d = F.shape[-1]
    return 0.5 * (np.swapaxes(F, -1, -2) @ F - np.eye(d))
