"""Nodal clouds, overlapping subdomain covers and their quadrature.

The node grid carries the trial discretization; subdomains are axis-aligned
boxes (segments in 1D) centred on an independent grid and clipped to the
domain. Every face of a clipped box is tagged per displacement component as
interior, essential or natural so the residual assembly can pick the right
boundary integral.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Mapping, Sequence, Union

import numpy as np
from numpy.polynomial.legendre import leggauss


class ConfigurationError(ValueError):
    """Invalid discretization or problem configuration."""


class SegmentClass(IntEnum):
    INTERIOR = 0
    ESSENTIAL = 1
    NATURAL = 2


EDGE_NAMES = {1: ("left", "right"), 2: ("left", "right", "bottom", "top")}

Prescribed = Union[float, Callable[[np.ndarray], np.ndarray], None]


def edge_of(axis: int, side: int) -> str:
    """Name of the domain edge on ``axis`` at the lower (-1) or upper (+1) side."""
    return ("left", "right", "bottom", "top")[2 * axis + (side > 0)]


@dataclass(frozen=True)
class Domain:
    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.bounds) not in (1, 2):
            raise ConfigurationError("only 1D and 2D domains are supported")
        for lo, hi in self.bounds:
            if not lo < hi:
                raise ConfigurationError(f"empty interval [{lo}, {hi}]")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds], dtype=float)

    @property
    def extent(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, x: np.ndarray, tol: float = 0.0) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=1)


@dataclass(frozen=True)
class EdgeBC:
    """Boundary condition on one domain edge.

    ``displacement[k]`` prescribes component k (constant or callable of the
    (m, dim) position array); ``None`` leaves it free, in which case
    ``traction[k]`` (first Piola traction, reference configuration) applies.
    """

    displacement: tuple[Prescribed, ...]
    traction: tuple[float, ...]

    def classes(self) -> tuple[SegmentClass, ...]:
        return tuple(SegmentClass.NATURAL if v is None else SegmentClass.ESSENTIAL
                     for v in self.displacement)

    def prescribed_value(self, k: int, x: np.ndarray) -> np.ndarray:
        v = self.displacement[k]
        if v is None:
            raise ConfigurationError(f"component {k} is not prescribed on this edge")
        if callable(v):
            return np.asarray(v(np.atleast_2d(x)), dtype=float)
        return np.full(len(np.atleast_2d(x)), float(v))


def traction_free(dim: int) -> EdgeBC:
    return EdgeBC(displacement=(None,) * dim, traction=(0.0,) * dim)


@dataclass(frozen=True)
class NodeSet:
    domain: Domain
    counts: tuple[int, ...]
    positions: np.ndarray  # (N, dim), x index fastest
    spacing: tuple[float, ...]

    @property
    def h(self) -> float:
        return min(self.spacing)

    @property
    def dim(self) -> int:
        return self.domain.dim

    def __len__(self) -> int:
        return len(self.positions)

    def fingerprint(self) -> str:
        import hashlib
        return hashlib.sha1(np.ascontiguousarray(self.positions).tobytes()).hexdigest()[:16]

    def axis_coordinates(self, axis: int) -> np.ndarray:
        lo, hi = self.domain.bounds[axis]
        return np.linspace(lo, hi, self.counts[axis])

    def grid_index(self, idx: Sequence[np.ndarray]) -> np.ndarray:
        """Flat node index from per-axis indices."""
        flat = np.asarray(idx[0])
        stride = 1
        for d in range(1, self.dim):
            stride *= self.counts[d - 1]
            flat = flat + stride * np.asarray(idx[d])
        return flat

    def on_edge(self, edge: str, tol: float = 1e-12) -> np.ndarray:
        """Indices of nodes lying on a named domain edge."""
        axis = {"left": 0, "right": 0, "bottom": 1, "top": 1}[edge]
        if axis >= self.dim:
            raise ConfigurationError(f"edge {edge!r} does not exist in {self.dim}D")
        lo, hi = self.domain.bounds[axis]
        target = lo if edge in ("left", "bottom") else hi
        scale = max(abs(lo), abs(hi), hi - lo)
        return np.flatnonzero(np.abs(self.positions[:, axis] - target) <= tol * scale)


def _grid(domain: Domain, counts: Sequence[int]) -> np.ndarray:
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(domain.bounds, counts)]
    mesh = np.meshgrid(*axes, indexing="xy")
    if domain.dim == 1:
        return axes[0][:, None]
    return np.column_stack([m.ravel() for m in mesh])


def _check_counts(domain: Domain, counts: Sequence[int]) -> tuple[int, ...]:
    counts = tuple(int(c) for c in np.atleast_1d(counts))
    if len(counts) != domain.dim:
        raise ConfigurationError(f"expected {domain.dim} counts, got {len(counts)}")
    if any(c < 2 for c in counts):
        raise ConfigurationError(f"every per-axis count must be >= 2, got {counts}")
    return counts


def build_node_grid(domain: Domain, counts: Sequence[int] | int) -> NodeSet:
    counts = _check_counts(domain, counts)
    spacing = tuple(float(e) / (n - 1) for e, n in zip(domain.extent, counts))
    return NodeSet(domain, counts, _grid(domain, counts), spacing)


@dataclass(frozen=True)
class Face:
    """One face of a clipped subdomain box.

    In 1D a face is an end point; in 2D a segment along the axis other than
    ``axis``. ``classes`` holds one SegmentClass per displacement component.
    """

    axis: int
    side: int
    coordinate: float
    classes: tuple[SegmentClass, ...]
    traction: tuple[float, ...]
    edge: str | None = None


@dataclass(frozen=True)
class Subdomain:
    center: np.ndarray
    half_width: np.ndarray
    lower: np.ndarray  # clipped bounds
    upper: np.ndarray
    faces: tuple[Face, ...]

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def measure(self) -> float:
        return float(np.prod(self.upper - self.lower))

    @property
    def is_clipped(self) -> bool:
        return bool(np.any(self.lower > self.center - self.half_width)
                    or np.any(self.upper < self.center + self.half_width))

    def face_normal(self, face: Face) -> np.ndarray:
        n = np.zeros(self.dim)
        n[face.axis] = face.side
        return n

    def face_measure(self, face: Face) -> float:
        if self.dim == 1:
            return 1.0
        other = 1 - face.axis
        return float(self.upper[other] - self.lower[other])


def build_subdomains(
    domain: Domain,
    counts: Sequence[int] | int,
    r_bar: float,
    h: float | Sequence[float],
    bc: Mapping[str, EdgeBC] | None = None,
    n_components: int | None = None,
) -> list[Subdomain]:
    """Uniform grid of subdomain boxes of half-width ``r_bar * h``, clipped to ``domain``.

    ``h`` may be per-axis. Faces lying on the domain boundary are classified
    from ``bc`` (edges missing from ``bc`` are traction free); all other
    faces are interior.
    """
    counts = _check_counts(domain, counts)
    if r_bar <= 0:
        raise ConfigurationError("r_bar must be positive")
    n_components = domain.dim if n_components is None else n_components
    bc = dict(bc or {})
    half = float(r_bar) * np.broadcast_to(np.asarray(h, dtype=float), (domain.dim,))
    lo_dom, hi_dom = domain.lower, domain.upper
    tol = 1e-12 * np.maximum(np.abs(lo_dom), np.maximum(np.abs(hi_dom), domain.extent))

    subs = []
    for c in _grid(domain, counts):
        lo = np.maximum(c - half, lo_dom)
        hi = np.minimum(c + half, hi_dom)
        faces = []
        for axis in range(domain.dim):
            for side, coord in ((-1, lo[axis]), (1, hi[axis])):
                bound = lo_dom[axis] if side < 0 else hi_dom[axis]
                if abs(coord - bound) <= tol[axis]:
                    name = edge_of(axis, side)
                    ebc = bc.get(name, traction_free(n_components))
                    if len(ebc.displacement) != n_components:
                        raise ConfigurationError(f"edge {name!r}: expected {n_components} components")
                    faces.append(Face(axis, side, float(bound), ebc.classes(),
                                      tuple(float(t) for t in ebc.traction), name))
                else:
                    faces.append(Face(axis, side, float(coord),
                                      (SegmentClass.INTERIOR,) * n_components,
                                      (0.0,) * n_components))
        subs.append(Subdomain(c.copy(), half.copy(), lo, hi, tuple(faces)))
    return subs


@dataclass(frozen=True)
class QuadratureSet:
    domain_points: np.ndarray  # (Q, dim)
    domain_weights: np.ndarray  # (Q,)
    boundary_points: np.ndarray  # (B, dim)
    boundary_weights: np.ndarray  # (B,)
    boundary_normals: np.ndarray  # (B, dim)
    boundary_classes: np.ndarray  # (B, n_components) SegmentClass codes
    boundary_traction: np.ndarray  # (B, n_components)
    boundary_face: np.ndarray  # (B,) index into Subdomain.faces
    cells_per_axis: int
    gauss_order: int


def gauss_legendre(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre abscissae and weights on [-1, 1]."""
    if order < 1:
        raise ConfigurationError("gauss_order must be >= 1")
    return leggauss(order)


def composite_rule(lo: float, hi: float, cells: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule on [lo, hi] with ``cells`` equal cells."""
    xi, wi = gauss_legendre(order)
    edges = np.linspace(lo, hi, cells + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    pts = (mid[:, None] + half[:, None] * xi[None, :]).ravel()
    wts = (half[:, None] * wi[None, :]).ravel()
    return pts, wts


def _rule_on_edges(edges: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    xi, wi = gauss_legendre(order)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    return (mid[:, None] + half[:, None] * xi[None, :]).ravel(), (half[:, None] * wi[None, :]).ravel()


def _restrict(edges: np.ndarray, lo: float, hi: float) -> np.ndarray:
    i0 = int(np.argmin(np.abs(edges - lo)))
    i1 = int(np.argmin(np.abs(edges - hi)))
    scale = edges[-1] - edges[0]
    if abs(edges[i0] - lo) > 1e-9 * scale or abs(edges[i1] - hi) > 1e-9 * scale:
        raise ConfigurationError("subdomain bounds do not lie on the background cell edges")
    return edges[i0:i1 + 1]


def _cell_edges(sub: Subdomain, axis: int, cells: int) -> np.ndarray:
    """Cell edges of the unclipped box restricted to the clipped interval.

    Keeping the unclipped cell layout means test-function breakpoints stay on
    cell edges even for subdomains cut by the domain boundary.
    """
    c, r = sub.center[axis], sub.half_width[axis]
    lo, hi = sub.lower[axis], sub.upper[axis]
    full = c - r + 2.0 * r * np.arange(cells + 1) / cells
    inner = full[(full > lo + 1e-12 * r) & (full < hi - 1e-12 * r)]
    return np.concatenate([[lo], inner, [hi]])


def background_edges(domain: Domain, subs: Sequence[Subdomain], max_cells: int = 400,
                     tol: float = 1e-9) -> list[np.ndarray] | None:
    """Shared cell edges per axis: every subdomain bound and test-function breakpoint.

    With these edges every subdomain is an exact union of background cells,
    so quadrature points of overlapping subdomains coincide and stresses can
    be evaluated once per point. Returns None when the breakpoints do not
    line up into at most ``max_cells`` cells per axis.
    """
    edges = []
    for d in range(domain.dim):
        lo, hi = domain.bounds[d]
        pts = [lo, hi]
        for s in subs:
            c, r = s.center[d], s.half_width[d]
            pts.extend([s.lower[d], s.upper[d], c, c - 0.5 * r, c + 0.5 * r])
        pts = np.sort(np.clip(np.array(pts), lo, hi))
        scale = hi - lo
        keep = np.concatenate([[True], np.diff(pts) > tol * scale])
        e = pts[keep]
        e[-1] = hi
        if len(e) - 1 > max_cells:
            return None
        edges.append(e)
    return edges


def build_quadrature(sub: Subdomain, cells_per_axis: int, gauss_order: int,
                     edges: Sequence[np.ndarray] | None = None) -> QuadratureSet:
    """Tensor Gauss rule on the clipped box and on each face.

    ``edges`` (per-axis background cell edges) replaces the per-subdomain
    cell layout; the box bounds must lie on those edges.
    """
    if cells_per_axis < 1:
        raise ConfigurationError("cells_per_axis must be >= 1")
    if gauss_order < 1:
        raise ConfigurationError("gauss_order must be >= 1")
    if np.any(sub.upper - sub.lower <= 0.0):
        raise ConfigurationError(f"degenerate subdomain at {sub.center.tolist()}")
    dim = sub.dim
    if edges is None:
        rules = [_rule_on_edges(_cell_edges(sub, d, cells_per_axis), gauss_order) for d in range(dim)]
    else:
        rules = [_rule_on_edges(_restrict(edges[d], sub.lower[d], sub.upper[d]), gauss_order)
                 for d in range(dim)]
    if dim == 1:
        dpts = rules[0][0][:, None]
        dwts = rules[0][1]
    else:
        X, Y = np.meshgrid(rules[0][0], rules[1][0], indexing="xy")
        WX, WY = np.meshgrid(rules[0][1], rules[1][1], indexing="xy")
        dpts = np.column_stack([X.ravel(), Y.ravel()])
        dwts = (WX * WY).ravel()

    bp, bw, bn, bc, bt, bf = [], [], [], [], [], []
    for i, face in enumerate(sub.faces):
        normal = sub.face_normal(face)
        if dim == 1:
            pts = np.array([[face.coordinate]])
            wts = np.ones(1)
        else:
            other = 1 - face.axis
            s, w = rules[other]
            coord = face.coordinate
            if edges is not None:
                # snap so faces of different subdomains on one line share points
                e = edges[face.axis]
                coord = e[int(np.argmin(np.abs(e - coord)))]
            pts = np.empty((len(s), 2))
            pts[:, face.axis] = coord
            pts[:, other] = s
            wts = w
        m = len(wts)
        bp.append(pts)
        bw.append(wts)
        bn.append(np.tile(normal, (m, 1)))
        bc.append(np.tile(np.array(face.classes, dtype=np.int8), (m, 1)))
        bt.append(np.tile(np.array(face.traction, dtype=float), (m, 1)))
        bf.append(np.full(m, i))
    return QuadratureSet(dpts, dwts, np.vstack(bp), np.concatenate(bw), np.vstack(bn),
                         np.vstack(bc), np.vstack(bt), np.concatenate(bf),
                         cells_per_axis, gauss_order)
