"""Local variational residuals and loss terms.

Two routes are provided. ``local_residual_h`` / ``local_residual_c`` evaluate
one subdomain from stress values at its quadrature points. ``ResidualOperator``
assembles the same residuals for all subdomains as a sparse linear map of the
stresses at the points where they are actually needed, which is what the
training loop uses.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .discretization import ConfigurationError, QuadratureSet, SegmentClass, Subdomain
from .rk_basis import cubic_bspline

BodyForce = Callable[[np.ndarray], np.ndarray]


class TestKind(str, Enum):
    HEAVISIDE = "h"
    CUBIC_BSPLINE = "c"


def test_function_c(x, sub: Subdomain):
    """Tensor-product cubic B-spline test function of the unclipped box.

    Returns ``(v, grad_v)`` with shapes (Q,) and (Q, dim); zero outside.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    dim = sub.dim
    vals, ders = [], []
    for d in range(dim):
        off = x[:, d] - sub.center[d]
        z = np.abs(off) / sub.half_width[d]
        phi, dphi = cubic_bspline(z)
        vals.append(phi)
        ders.append(dphi * np.sign(off) / sub.half_width[d])
    v = np.prod(vals, axis=0)
    grad = np.empty((len(x), dim))
    for d in range(dim):
        g = ders[d]
        for o in range(dim):
            if o != d:
                g = g * vals[o]
        grad[:, d] = g
    return v, grad


def _body(f: BodyForce | None, x: np.ndarray, n: int) -> np.ndarray:
    if f is None:
        return np.zeros((len(x), n))
    out = np.asarray(f(x), dtype=float)
    return out.reshape(len(x), n)


def _check_tractions(quad: QuadratureSet) -> None:
    nat = quad.boundary_classes == SegmentClass.NATURAL
    if np.any(nat & ~np.isfinite(quad.boundary_traction)):
        raise ConfigurationError("missing traction value on a natural boundary segment")


def local_residual_h(sub: Subdomain, quad: QuadratureSet, P_boundary: np.ndarray,
                     f: BodyForce | None = None) -> np.ndarray:
    """Heaviside-test residual of one subdomain.

    ``P_boundary`` has shape (B, n, dim), aligned with ``quad.boundary_points``.
    """
    _check_tractions(quad)
    n = quad.boundary_classes.shape[1]
    R = (quad.domain_weights[:, None] * _body(f, quad.domain_points, n)).sum(axis=0)
    Pn = np.einsum("bkj,bj->bk", P_boundary, quad.boundary_normals)
    nat = quad.boundary_classes == SegmentClass.NATURAL
    flux = np.where(nat, quad.boundary_traction, Pn)
    R = R + (quad.boundary_weights[:, None] * flux).sum(axis=0)
    return R


def local_residual_c(sub: Subdomain, quad: QuadratureSet, P_domain: np.ndarray,
                     P_boundary: np.ndarray, f: BodyForce | None = None) -> np.ndarray:
    """Cubic B-spline-test residual of one subdomain.

    Interior faces carry no term: the test function vanishes on unclipped faces.
    """
    _check_tractions(quad)
    n = quad.boundary_classes.shape[1]
    v, gv = test_function_c(quad.domain_points, sub)
    w = quad.domain_weights
    R = np.einsum("q,qkj,qj->k", w, P_domain, gv)
    R = R - (w[:, None] * v[:, None] * _body(f, quad.domain_points, n)).sum(axis=0)
    vb, _ = test_function_c(quad.boundary_points, sub)
    Pn = np.einsum("bkj,bj->bk", P_boundary, quad.boundary_normals)
    ess = quad.boundary_classes == SegmentClass.ESSENTIAL
    nat = quad.boundary_classes == SegmentClass.NATURAL
    wb = (quad.boundary_weights * vb)[:, None]
    R = R - (wb * np.where(ess, Pn, 0.0)).sum(axis=0)
    R = R - (wb * np.where(nat, quad.boundary_traction, 0.0)).sum(axis=0)
    return R


def assemble_loss(residuals) -> float:
    """Mean over subdomains of the squared residual norm."""
    R = np.asarray(residuals, dtype=float)
    if R.ndim == 1:
        R = R[:, None]
    if len(R) == 0:
        raise ValueError("need at least one subdomain residual")
    return float(np.sum(R * R) / len(R))


@dataclass
class StrainDataSet:
    """Deformation-gradient measurements at scattered points."""

    positions: np.ndarray  # (N, dim)
    F: np.ndarray  # (N, dim, dim)
    alpha: float = 1.0
    reactions: dict = field(default_factory=dict)  # edge -> measured resultant force vector

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.F = np.asarray(self.F, dtype=float)
        if len(self.positions) < 1:
            raise ValueError("a strain data set needs at least one row")
        dim = self.positions.shape[1]
        self.F = self.F.reshape(len(self.positions), dim, dim)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def columns(self) -> list[str]:
        return data_columns(self.dim)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            flatF = self.F.reshape(len(self), -1)
            for x, Fr in zip(self.positions, flatF):
                w.writerow([repr(float(v)) for v in np.concatenate([x, Fr])])

    @classmethod
    def read_csv(cls, path, alpha: float = 1.0, dim: int | None = None) -> "StrainDataSet":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise DataSchemaError("empty data file", column=None)
        header = [h.strip() for h in rows[0]]
        if dim is None:
            dim = 2 if "Y" in header else 1
        expected = data_columns(dim)
        for col in expected:
            if col not in header:
                raise DataSchemaError(f"missing column {col!r}", column=col)
        extra = [h for h in header if h not in expected]
        if extra:
            raise DataSchemaError(f"unexpected column {extra[0]!r}", column=extra[0])
        body = [r for r in rows[1:] if r]
        if not body:
            raise DataSchemaError("data file has no rows", column=None)
        arr = np.array([[float(v) for v in r] for r in body])
        order = [header.index(c) for c in expected]
        arr = arr[:, order]
        return cls(arr[:, :dim], arr[:, dim:], alpha)


class DataSchemaError(ValueError):
    def __init__(self, message: str, column: str | None):
        super().__init__(message)
        self.column = column


def data_columns(dim: int) -> list[str]:
    if dim == 1:
        return ["X", "Fxx"]
    return ["X", "Y", "Fxx", "Fxy", "Fyx", "Fyy"]


def data_loss(F_hat: np.ndarray, data: StrainDataSet) -> float:
    """alpha / N * sum_j ||F_j - F_hat_j||^2 over all tensor components."""
    diff = np.asarray(F_hat, dtype=float).reshape(data.F.shape) - data.F
    return float(data.alpha * np.sum(diff * diff) / len(data))


@dataclass
class ResidualOperator:
    """All subdomain residuals as ``R[:, k] = sum_J G[k][J] @ P[:, k, J] + const[:, k]``.

    ``points`` are the quadrature points whose stresses enter the residuals.
    """

    points: np.ndarray
    G: list  # n x dim CSR matrices (N_T, Qs)
    const: np.ndarray  # (N_T, n)

    @property
    def n_subdomains(self) -> int:
        return self.const.shape[0]

    def residuals(self, P: np.ndarray) -> np.ndarray:
        n, dim = len(self.G), len(self.G[0])
        R = self.const.copy()
        for k in range(n):
            for J in range(dim):
                R[:, k] += self.G[k][J] @ P[:, k, J]
        return R

    def adjoint(self, gR: np.ndarray) -> np.ndarray:
        """Pull back dL/dR (N_T, n) to dL/dP (Qs, n, dim)."""
        n, dim = len(self.G), len(self.G[0])
        out = np.empty((len(self.points), n, dim))
        for k in range(n):
            for J in range(dim):
                out[:, k, J] = self.G[k][J].T @ gR[:, k]
        return out


def build_residual_operator(subs: Sequence[Subdomain], quads: Sequence[QuadratureSet],
                           scheme: TestKind | str, f: BodyForce | None = None) -> ResidualOperator:
    scheme = TestKind(scheme)
    n = quads[0].boundary_classes.shape[1]
    dim = subs[0].dim
    pts, rows, coefs = [], [], []
    const = np.zeros((len(subs), n))
    for s, (sub, quad) in enumerate(zip(subs, quads)):
        _check_tractions(quad)
        cls = quad.boundary_classes
        ess = cls == SegmentClass.ESSENTIAL
        nat = cls == SegmentClass.NATURAL
        wb = quad.boundary_weights
        nb = quad.boundary_normals
        if scheme is TestKind.HEAVISIDE:
            const[s] += (quad.domain_weights[:, None] * _body(f, quad.domain_points, n)).sum(axis=0)
            const[s] += (wb[:, None] * np.where(nat, quad.boundary_traction, 0.0)).sum(axis=0)
            need = np.any(~nat, axis=1)
            # coefficient (m, n, dim): w n_J on non-natural components
            c = wb[need, None, None] * (~nat[need])[:, :, None] * nb[need, None, :]
            pts.append(quad.boundary_points[need])
            coefs.append(c)
        else:
            v, gv = test_function_c(quad.domain_points, sub)
            w = quad.domain_weights
            const[s] -= (w[:, None] * v[:, None] * _body(f, quad.domain_points, n)).sum(axis=0)
            cd = np.broadcast_to((w[:, None] * gv)[:, None, :], (len(w), n, dim))
            vb, _ = test_function_c(quad.boundary_points, sub)
            const[s] -= ((wb * vb)[:, None] * np.where(nat, quad.boundary_traction, 0.0)).sum(axis=0)
            need = np.any(ess, axis=1) & (vb != 0.0)
            cb = -(wb * vb)[need, None, None] * ess[need][:, :, None] * nb[need, None, :]
            pts.append(np.vstack([quad.domain_points, quad.boundary_points[need]]))
            coefs.append(np.concatenate([cd, cb]))
        rows.append(np.full(len(pts[-1]), s))
    points = np.vstack(pts)
    rows = np.concatenate(rows)
    coef = np.concatenate(coefs)
    # overlapping subdomains built on shared cell edges reuse identical points
    points, cols = np.unique(points, axis=0, return_inverse=True)
    cols = cols.ravel()
    shape = (len(subs), len(points))
    G = [[sp.csr_matrix((coef[:, k, J], (rows, cols)), shape=shape) for J in range(dim)]
         for k in range(n)]
    return ResidualOperator(points, G, const)
