"""Reproducing-kernel shape functions with boundary singular kernels.

Shape functions are evaluated in batches of points against a tensor-product
node grid. The monomial basis is expressed in the normalized offset
``(x_I - x) / a``, which leaves the shape functions unchanged but keeps the
moment matrix well scaled.
"""
from __future__ import annotations

import hashlib
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .discretization import NodeSet

COND_LIMIT = 1e12


class SupportCoverageError(ValueError):
    """Raised when a point is not covered by enough node supports."""

    def __init__(self, message: str, point=None, index=None):
        super().__init__(message)
        self.point = point
        self.index = index


def cubic_bspline(z):
    """Cubic B-spline kernel on normalized distance ``z`` and its derivative d/dz."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("cubic_bspline requires z >= 0")
    inner = z <= 0.5
    outer = (z > 0.5) & (z <= 1.0)
    val = np.where(inner, 2.0 / 3.0 - 4.0 * z**2 + 4.0 * z**3,
                   np.where(outer, 4.0 / 3.0 - 4.0 * z + 4.0 * z**2 - 4.0 / 3.0 * z**3, 0.0))
    der = np.where(inner, -8.0 * z + 12.0 * z**2,
                   np.where(outer, -4.0 + 8.0 * z - 4.0 * z**2, 0.0))
    if val.ndim == 0:
        return float(val), float(der)
    return val, der


def singular_kernel(z, exponent: int = 2, z_floor: float = 1e-8):
    """Cubic B-spline divided by ``max(z, z_floor) ** exponent``."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("singular_kernel requires z >= 0")
    phi, dphi = cubic_bspline(z)
    zc = np.maximum(z, z_floor)
    val = phi / zc**exponent
    der = np.where(z > z_floor, dphi / zc**exponent - exponent * phi / zc ** (exponent + 1),
                   dphi / zc**exponent)
    if val.ndim == 0:
        return float(val), float(der)
    return val, der


@dataclass(frozen=True)
class RKConfig:
    order: int = 2
    a_bar: float = 2.5
    singular_nodes: Mapping[int, int] = field(default_factory=dict)  # node -> exponent
    z_floor: float = 1e-8
    support_h: float | None = None  # spacing used for a = a_bar * h; default NodeSet.h

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("RK order must be >= 1")
        if self.a_bar <= 1.0:
            raise ValueError("a_bar must exceed 1")
        if self.z_floor <= 0:
            raise ValueError("z_floor must be positive")

    def support(self, nodes: NodeSet) -> float:
        return self.a_bar * (self.support_h if self.support_h is not None else nodes.h)

    def digest(self) -> str:
        items = sorted((int(k), int(v)) for k, v in self.singular_nodes.items())
        text = repr((self.order, self.a_bar, items, self.z_floor, self.support_h))
        return hashlib.sha1(text.encode()).hexdigest()[:16]


def with_singular(cfg: RKConfig, nodes: Sequence[int], exponent: int = 2) -> RKConfig:
    sing = dict(cfg.singular_nodes)
    sing.update({int(i): exponent for i in nodes})
    return RKConfig(cfg.order, cfg.a_bar, sing, cfg.z_floor, cfg.support_h)


def monomial_exponents(dim: int, order: int) -> np.ndarray:
    exps = [e for deg in range(order + 1)
            for e in itertools.product(range(deg + 1), repeat=dim) if sum(e) == deg]
    # graded order, x-power descending inside each degree: 1, x, y, x^2, xy, y^2
    exps.sort(key=lambda e: (sum(e), tuple(-v for v in e)))
    return np.array(exps, dtype=int)


@dataclass(frozen=True)
class ShapeSample:
    neighbors: np.ndarray
    values: np.ndarray
    gradients: np.ndarray  # (k, dim)


def _candidates(x: np.ndarray, nodes: NodeSet, a: float) -> np.ndarray:
    """Flat indices (-1 when off-grid) of grid nodes possibly within distance a."""
    per_axis = []
    for d in range(nodes.dim):
        lo = nodes.domain.bounds[d][0]
        dx = nodes.spacing[d]
        m = int(np.ceil(a / dx))
        base = np.floor((x[:, d] - lo) / dx).astype(int)
        idx = base[:, None] + np.arange(-m, m + 2)[None, :]
        idx = np.where((idx >= 0) & (idx < nodes.counts[d]), idx, -1)
        per_axis.append(idx)
    if nodes.dim == 1:
        return per_axis[0]
    ix, iy = per_axis
    flat = ix[:, None, :] + nodes.counts[0] * iy[:, :, None]
    bad = (ix[:, None, :] < 0) | (iy[:, :, None] < 0)
    flat = np.where(bad, -1, flat)
    return flat.reshape(len(x), -1)


def shape_batch(x: np.ndarray, nodes: NodeSet, cfg: RKConfig, offset: int = 0):
    """Shape functions and gradients at a batch of points.

    Returns ``(neighbors, psi, dpsi)`` with shapes (Q, K), (Q, K), (Q, K, dim);
    unused neighbor slots carry index -1 and zero values.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    Q, dim = x.shape
    a = cfg.support(nodes)
    cand = _candidates(x, nodes, a)
    valid = cand >= 0
    xi = nodes.positions[np.where(valid, cand, 0)]  # (Q, K, dim)
    y = (xi - x[:, None, :]) / a
    z = np.sqrt(np.sum(y * y, axis=-1))
    valid &= z <= 1.0
    if not np.any(valid):
        raise SupportCoverageError("no node support covers the points", x[0], offset)

    # compress to the largest neighbor count actually used
    order = np.argsort(~valid, axis=1, kind="stable")
    kmax = int(valid.sum(axis=1).max())
    order = order[:, :kmax]
    cand = np.take_along_axis(cand, order, axis=1)
    valid = np.take_along_axis(valid, order, axis=1)
    y = np.take_along_axis(y, order[:, :, None], axis=1)
    z = np.take_along_axis(z, order, axis=1)
    cand = np.where(valid, cand, -1)

    zv = np.where(valid, z, 2.0)
    phi, dphi = cubic_bspline(zv)
    if cfg.singular_nodes:
        sing_idx = np.array(sorted(cfg.singular_nodes), dtype=int)
        sing_exp = np.array([cfg.singular_nodes[i] for i in sing_idx], dtype=int)
        pos = np.searchsorted(sing_idx, np.where(valid, cand, -1))
        pos = np.clip(pos, 0, len(sing_idx) - 1)
        is_sing = valid & (sing_idx[pos] == cand)
        if np.any(is_sing):
            for e in np.unique(sing_exp):
                mask = is_sing & (sing_exp[pos] == e)
                if np.any(mask):
                    sv, sd = singular_kernel(zv[mask], int(e), cfg.z_floor)
                    phi[mask] = sv
                    dphi[mask] = sd
    phi = np.where(valid, phi, 0.0)
    dphi = np.where(valid, dphi, 0.0)

    exps = monomial_exponents(dim, cfg.order)
    M = len(exps)
    # p(y) and dp/dy
    powers = [np.stack([y[..., d] ** k for k in range(cfg.order + 1)], axis=-1) for d in range(dim)]
    P = np.ones(y.shape[:2] + (M,))
    for m, e in enumerate(exps):
        for d in range(dim):
            P[..., m] *= powers[d][..., e[d]]
    dP = np.zeros(y.shape[:2] + (M, dim))
    for m, e in enumerate(exps):
        for d in range(dim):
            if e[d] == 0:
                continue
            term = e[d] * powers[d][..., e[d] - 1]
            for o in range(dim):
                if o != d:
                    term = term * powers[o][..., e[o]]
            dP[..., m, d] = term
    # derivatives with respect to x: dy/dx = -1/a
    dPx = -dP / a
    with np.errstate(invalid="ignore", divide="ignore"):
        dzdx = np.where(z[..., None] > 0, -y / (a * z[..., None]), 0.0)
    dphix = dphi[..., None] * dzdx  # (Q, K, dim)

    Pt = np.swapaxes(P, 1, 2)  # (Q, M, K)
    A = np.matmul(Pt * phi[:, None, :], P)
    diag = np.einsum("qmm->qm", A)
    if np.any(diag <= 0):
        bad = int(np.flatnonzero(np.any(diag <= 0, axis=1))[0])
        raise SupportCoverageError(f"point {offset + bad} at {x[bad].tolist()} is not covered",
                                   x[bad], offset + bad)
    s = 1.0 / np.sqrt(diag)
    As = A * s[:, :, None] * s[:, None, :]
    eig = np.linalg.eigvalsh(As)
    with np.errstate(divide="ignore"):
        cond = np.where(eig[:, 0] > 0, eig[:, -1] / eig[:, 0], np.inf)
    if np.any(cond > COND_LIMIT):
        bad = int(np.flatnonzero(cond > COND_LIMIT)[0])
        raise SupportCoverageError(
            f"moment matrix ill-conditioned (cond {cond[bad]:.3e}) at point {offset + bad} "
            f"{x[bad].tolist()}: insufficient support coverage", x[bad], offset + bad)
    Ainv = np.linalg.inv(As) * s[:, :, None] * s[:, None, :]
    b = Ainv[:, :, 0]  # A^-1 p(0), p(0) = e_1

    Pb = np.matmul(P, b[:, :, None])[..., 0]
    psi = Pb * phi

    dpsi = np.empty(psi.shape + (dim,))
    for d in range(dim):
        dPd = dPx[..., d]
        # dA b = sum_I (dphi p p.b + phi dp p.b + phi p dp.b)
        dPdb = np.matmul(dPd, b[:, :, None])[..., 0]
        coef_p = dphix[..., d] * Pb + phi * dPdb
        dAb = (np.matmul(Pt, coef_p[:, :, None])
               + np.matmul(np.swapaxes(dPd, 1, 2), (phi * Pb)[:, :, None]))[..., 0]
        db = -np.matmul(Ainv, dAb[:, :, None])[..., 0]
        dpsi[..., d] = (dPdb * phi + np.matmul(P, db[:, :, None])[..., 0] * phi
                        + Pb * dphix[..., d])
    return cand, psi, dpsi


def evaluate_shape(x, nodes: NodeSet, cfg: RKConfig) -> ShapeSample:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    cand, psi, dpsi = shape_batch(x, nodes, cfg)
    keep = cand[0] >= 0
    return ShapeSample(cand[0][keep], psi[0][keep], dpsi[0][keep])


@dataclass(frozen=True)
class ShapeTable:
    """Sparse shape-function values and gradients at a fixed list of points."""

    points: np.ndarray
    values: sp.csr_matrix  # (Q, N)
    gradients: tuple[sp.csr_matrix, ...]  # dim x (Q, N)
    node_fingerprint: str
    config_digest: str

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @cached_property
    def stacked_gradients(self) -> sp.csr_matrix:
        """All gradient components stacked by axis, shape (dim*Q, N)."""
        return sp.vstack(self.gradients, format="csr")

    @cached_property
    def stacked_gradients_t(self) -> sp.csr_matrix:
        return self.stacked_gradients.T.tocsr()

    def sample(self, i: int) -> ShapeSample:
        row = self.values.getrow(i)
        idx = row.indices
        grads = np.column_stack([g[i, idx].toarray().ravel() for g in self.gradients])
        return ShapeSample(idx.copy(), row.data.copy(), grads)

    def to_csv(self, path) -> None:
        """Debug dump: point, node, psi and one gradient column per axis."""
        coo = self.values.tocoo()
        cols = ["point", "node", "psi"] + [f"dpsi_d{'xyz'[d]}" for d in range(len(self.gradients))]
        grads = [np.asarray(g[coo.row, coo.col]).ravel() for g in self.gradients]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in range(coo.nnz):
                vals = [f"{coo.row[r]}", f"{coo.col[r]}", repr(float(coo.data[r]))]
                vals += [repr(float(g[r])) for g in grads]
                fh.write(",".join(vals) + "\n")


def build_shape_table(points, nodes: NodeSet, cfg: RKConfig, chunk: int = 4096,
                      threads: int = 1) -> ShapeTable:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    Q = len(points)
    starts = list(range(0, Q, chunk))

    def work(s):
        return shape_batch(points[s:s + chunk], nodes, cfg, offset=s)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]

    rows, cols, vals = [], [], []
    grads = [[] for _ in range(nodes.dim)]
    for s, (cand, psi, dpsi) in zip(starts, parts):
        keep = cand >= 0
        r = np.nonzero(keep)[0] + s
        rows.append(r)
        cols.append(cand[keep])
        vals.append(psi[keep])
        for d in range(nodes.dim):
            grads[d].append(dpsi[..., d][keep])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    shape = (Q, len(nodes))

    def mat(data):
        return sp.csr_matrix((np.concatenate(data), (rows, cols)), shape=shape)

    return ShapeTable(points, mat(vals), tuple(mat(g) for g in grads),
                      nodes.fingerprint(), cfg.digest())
