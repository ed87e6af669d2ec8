"""Problem configuration, reference fields and forward/inverse drivers."""
from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RectBivariateSpline

from .discretization import (ConfigurationError, Domain, EdgeBC, EDGE_NAMES, NodeSet, SegmentClass,
                             background_edges, build_node_grid, build_quadrature, build_subdomains,
                             composite_rule)
from .field import (MLP, ConstraintMask, NeuroPUField, NIMProblem, ReactionAnchor, SigmoidRange,
                    def_gradient_from_coefficients)
from .materials import MaterialKind, MaterialModel, energy_density, green_strain, pk1_stress
from .optimizer import (IterationRecord, LBFGSOptions, StopReason, TrainingHistory, lbfgs_minimize,
                        relative_l2)
from .residual import StrainDataSet, TestKind, build_residual_operator
from .rk_basis import RKConfig, ShapeTable, build_shape_table

COMPONENTS = "xy"


class ConfigKeyError(ConfigurationError):
    def __init__(self, key: str, detail: str = "missing required key"):
        super().__init__(f"{detail}: {key}")
        self.key = key


class SolverFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- references

def analytic_bar_solution(x):
    """Exact displacement and strain of the hyperelastic bar with body force b(x) = x."""
    x = np.asarray(x, dtype=float)
    u = (68.0 + 105.0 * x - 40.0 * x**3 + 3.0 * x**5) / 135.0
    eps = (x**4 - 8.0 * x**2 + 7.0) / 9.0
    return u, eps


def _symmetric_raw(X, Y):
    return (0.1 * np.sin(2 * np.pi * X) + np.tanh(10 * X)) * np.sin(2 * np.pi * Y)


_SYM_RANGE = None


def symmetric_modulus(X, Y):
    """Symmetric modulus pattern rescaled so that a 201 x 201 sample spans [1, 2]."""
    global _SYM_RANGE
    if _SYM_RANGE is None:
        g = np.linspace(0.0, 1.0, 201)
        GX, GY = np.meshgrid(g, g, indexing="xy")
        raw = _symmetric_raw(GX, GY)
        _SYM_RANGE = (float(raw.min()), float(raw.max()))
    lo, hi = _SYM_RANGE
    return 1.0 + (_symmetric_raw(np.asarray(X, float), np.asarray(Y, float)) - lo) / (hi - lo)


def grf_samples(n: int, alpha: float, seed: int) -> np.ndarray:
    """n x n Gaussian random field with power-law amplitude |k|^(-alpha/2), rescaled to [1, 2]."""
    if alpha <= 0:
        raise ConfigurationError("spectral exponent must be positive")
    rng = np.random.default_rng(seed)
    k = np.fft.fftfreq(n) * n
    KX, KY = np.meshgrid(k, k, indexing="xy")
    kk = np.hypot(KX, KY)
    amp = np.zeros_like(kk)
    amp[kk > 0] = kk[kk > 0] ** (-alpha / 2.0)
    noise = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    field_ = np.real(np.fft.ifft2(noise * amp))
    return 1.0 + (field_ - field_.min()) / (field_.max() - field_.min())


def grf_modulus(grid: int, alpha: float = 3.0, seed: int = 0) -> Callable:
    """Modulus function on [0, 1]^2 interpolating a GRF sampled on a ``grid`` x ``grid`` lattice."""
    samples = grf_samples(grid, alpha, seed)
    ax = np.linspace(0.0, 1.0, grid)
    spline = RectBivariateSpline(ax, ax, samples.T, kx=3, ky=3)

    def E(X, Y):
        X = np.asarray(X, float)
        Y = np.asarray(Y, float)
        return spline.ev(X.ravel(), Y.ravel()).reshape(X.shape)

    E.samples = samples
    return E


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class ModulusSpec:
    kind: str = "constant"  # constant | symmetric | grf
    grf_alpha: float = 3.0
    grf_seed: int = 0
    grf_grid: int = 128

    def function(self, E0: float = 1.0) -> Callable:
        if self.kind == "constant":
            return lambda X, Y=None: np.full(np.shape(X), float(E0))
        if self.kind == "symmetric":
            return symmetric_modulus
        if self.kind == "grf":
            return grf_modulus(self.grf_grid, self.grf_alpha, self.grf_seed)
        raise ConfigurationError(f"unknown modulus kind {self.kind!r}")


@dataclass(frozen=True)
class InverseSpec:
    alpha: float = 10.0
    nodes: tuple[int, ...] | None = None  # modulus discretization; default: displacement nodes
    hidden: tuple[int, ...] = (10,)
    lo: float = 0.5
    span: float = 3.0
    anchor_weight: float = 1.0


@dataclass(frozen=True)
class ProblemConfig:
    name: str
    bounds: tuple[tuple[float, float], ...]
    nodes: tuple[int, ...]
    subdomains: tuple[int, ...]
    material: MaterialModel
    bc: Mapping[str, EdgeBC]
    scheme: TestKind = TestKind.CUBIC_BSPLINE
    r_bar: float = 2.5
    a_bar: float = 2.5
    order: int = 2
    cells: int = 4
    gauss_order: int = 5
    quadrature: str = "background"  # background | subdomain
    body_force: object = None  # None, "x" or a constant vector
    hidden: tuple[int, ...] = (10,)
    seed: int = 0
    optimizer: LBFGSOptions = field(default_factory=LBFGSOptions)
    modulus: ModulusSpec | None = None
    inverse: InverseSpec | None = None
    reference_path: str | None = None
    affine: tuple | None = None  # displacement gradient of an affine reference field
    threads: int = 1
    source: dict = field(default_factory=dict, compare=False)

    @property
    def domain(self) -> Domain:
        return Domain(self.bounds)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def with_(self, **kw) -> "ProblemConfig":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return ProblemConfig(**d)


def _req(d: Mapping, key: str, path: str):
    if key not in d:
        raise ConfigKeyError(f"{path}.{key}" if path else key)
    return d[key]


def _tuple_int(v, key):
    try:
        return tuple(int(x) for x in (v if isinstance(v, (list, tuple)) else [v]))
    except (TypeError, ValueError):
        raise ConfigKeyError(key, "expected integer(s)") from None


_FLOAT_OPTIONS = ("ftol", "gtol", "c1", "c2")


def _optimizer_options(opt: Mapping) -> LBFGSOptions:
    known = set(LBFGSOptions.__dataclass_fields__)
    kw = {}
    for k, v in opt.items():
        if k not in known:
            raise ConfigKeyError(f"optimizer.{k}", "unknown option")
        try:
            kw[k] = float(v) if k in _FLOAT_OPTIONS else int(v)
        except (TypeError, ValueError):
            raise ConfigKeyError(f"optimizer.{k}", "expected a number") from None
    try:
        return LBFGSOptions(**kw)
    except ValueError as exc:
        raise ConfigKeyError("optimizer", str(exc)) from None


def _scheme(v) -> TestKind:
    try:
        return TestKind(str(v))
    except ValueError:
        raise ConfigKeyError("discretization.scheme", "expected 'h' or 'c'") from None


def config_from_dict(d: Mapping) -> ProblemConfig:
    """Build a ProblemConfig from a parsed TOML document."""
    dom = _req(d, "domain", "")
    bounds = tuple(tuple(float(x) for x in b) for b in _req(dom, "bounds", "domain"))
    dim = len(bounds)
    disc = _req(d, "discretization", "")
    mat = _req(d, "material", "")
    kind = _req(mat, "kind", "material")
    try:
        material = MaterialModel(kind, float(mat.get("E", 1.0)), float(mat.get("nu", 0.0)))
    except ValueError as exc:
        raise ConfigKeyError("material.kind" if "kind" in str(exc) or "is not a valid" in str(exc)
                             else "material", str(exc)) from None
    affine = None
    if "affine" in d:
        affine = tuple(tuple(float(x) for x in row) for row in _req(d["affine"], "gradient", "affine"))

    bcs = {}
    for edge, spec in d.get("bc", {}).items():
        if edge not in EDGE_NAMES[dim]:
            raise ConfigKeyError(f"bc.{edge}", "unknown edge")
        disp, trac = [], []
        for k in range(dim):
            c = COMPONENTS[k]
            u = spec.get(f"u{c}")
            t = spec.get(f"t{c}", 0.0)
            if u == "affine" or t == "affine":
                if affine is None:
                    raise ConfigKeyError("affine.gradient")
            if u == "affine":
                u = _affine_displacement(affine, k)
            elif u is not None:
                u = float(u)
            if t == "affine":
                t = _affine_traction(affine, material, edge, k)
            disp.append(u)
            trac.append(float(t))
        bcs[edge] = EdgeBC(tuple(disp), tuple(trac))

    net = d.get("network", {})
    opt = d.get("optimizer", {})
    modulus = None
    if "modulus" in d:
        m = d["modulus"]
        modulus = ModulusSpec(str(_req(m, "kind", "modulus")), float(m.get("alpha", 3.0)),
                              int(m.get("seed", 0)), int(m.get("grid", 128)))
    inverse = None
    if "inverse" in d:
        inv = d["inverse"]
        inverse = InverseSpec(float(inv.get("alpha", 10.0)),
                              _tuple_int(inv["nodes"], "inverse.nodes") if "nodes" in inv else None,
                              _tuple_int(inv.get("hidden", [10]), "inverse.hidden"),
                              float(inv.get("lo", 0.5)), float(inv.get("span", 3.0)),
                              float(inv.get("anchor_weight", 1.0)))
    bf = mat.get("body_force")
    if isinstance(bf, list):
        bf = tuple(float(x) for x in bf)
    cfg = ProblemConfig(
        name=str(d.get("name", "problem")),
        bounds=bounds,
        nodes=_tuple_int(_req(disc, "nodes", "discretization"), "discretization.nodes"),
        subdomains=_tuple_int(_req(disc, "subdomains", "discretization"), "discretization.subdomains"),
        material=material,
        bc=bcs,
        scheme=_scheme(disc.get("scheme", "c")),
        r_bar=float(disc.get("r_bar", 2.5)),
        a_bar=float(disc.get("a_bar", 2.5)),
        order=int(disc.get("order", 2)),
        cells=int(disc.get("quadrature_cells", 4)),
        gauss_order=int(disc.get("gauss_order", 5)),
        quadrature=str(disc.get("quadrature", "background")),
        body_force=bf,
        hidden=_tuple_int(net.get("hidden", [10]), "network.hidden"),
        seed=int(net.get("seed", 0)),
        optimizer=_optimizer_options(opt),
        modulus=modulus,
        inverse=inverse,
        reference_path=d.get("reference", {}).get("path"),
        affine=affine,
        source=copy.deepcopy(dict(d)),
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: ProblemConfig) -> None:
    dim = cfg.dim
    for key, v in (("discretization.nodes", cfg.nodes), ("discretization.subdomains", cfg.subdomains)):
        if len(v) != dim:
            raise ConfigKeyError(key, f"expected {dim} entries")
        if min(v) < 2:
            raise ConfigKeyError(key, "every count must be >= 2")
    if cfg.inverse is not None and cfg.inverse.nodes is not None and len(cfg.inverse.nodes) != dim:
        raise ConfigKeyError("inverse.nodes", f"expected {dim} entries")
    if cfg.quadrature not in ("background", "subdomain"):
        raise ConfigKeyError("discretization.quadrature", "expected 'background' or 'subdomain'")
    if cfg.material.kind is MaterialKind.BAR1D and dim != 1:
        raise ConfigKeyError("material.kind", "bar1d requires a 1D domain")
    if not any(SegmentClass.ESSENTIAL in b.classes() for b in cfg.bc.values()):
        raise ConfigKeyError("bc", "at least one essential boundary condition is required")


def _affine_displacement(grad, k):
    G = np.asarray(grad, float)

    def u(X):
        X = np.atleast_2d(X)
        return X @ (G[k] - np.eye(len(G))[k])

    return u


def _affine_traction(grad, material, edge, k):
    F = np.asarray(grad, float)
    P = pk1_stress(material, F[None])[0]
    n = np.zeros(len(F))
    axis = {"left": 0, "right": 0, "bottom": 1, "top": 1}[edge]
    n[axis] = -1.0 if edge in ("left", "bottom") else 1.0
    return float(P[k] @ n)


def body_force_function(spec, dim: int):
    if spec is None:
        return None
    if spec == "x":
        def f(x):
            out = np.zeros((len(x), dim))
            out[:, 0] = x[:, 0]
            return out
        return f
    vec = np.asarray(spec, float).reshape(dim)
    return lambda x: np.broadcast_to(vec, (len(x), dim)).copy()


# ---------------------------------------------------------------- assembly

@dataclass
class Assembly:
    cfg: ProblemConfig
    nodes: NodeSet
    rk: RKConfig
    mask: ConstraintMask
    problem: NIMProblem
    modulus_fn: Callable | None = None
    modulus_nodes: NodeSet | None = None
    modulus_rk: RKConfig | None = None
    timings: dict = field(default_factory=dict)

    @property
    def displacement(self) -> NeuroPUField:
        return self.problem.displacement


def essential_mask(nodes: NodeSet, bc: Mapping[str, EdgeBC]) -> tuple[ConstraintMask, list[int]]:
    """Mask entries and singular-node list from the essential edges."""
    entries = {}
    singular = set()
    for edge in EDGE_NAMES[nodes.dim]:
        ebc = bc.get(edge)
        if ebc is None:
            continue
        idx = nodes.on_edge(edge)
        for k, cls in enumerate(ebc.classes()):
            if cls is not SegmentClass.ESSENTIAL:
                continue
            vals = ebc.prescribed_value(k, nodes.positions[idx])
            for i, v in zip(idx, vals):
                entries[(int(i), k)] = float(v)
            singular.update(int(i) for i in idx)
    keys = sorted(entries)
    mask = ConstraintMask(np.array([i for i, _ in keys], dtype=int),
                          np.array([k for _, k in keys], dtype=int),
                          np.array([entries[key] for key in keys]))
    return mask, sorted(singular)


def _support_h(nodes: NodeSet) -> float:
    return max(nodes.spacing)


def edge_quadrature(domain: Domain, edge: str, cells: int = 40, order: int = 5):
    """Points, weights and outward normal of a composite Gauss rule along a domain edge."""
    axis = {"left": 0, "right": 0, "bottom": 1, "top": 1}[edge]
    side = -1.0 if edge in ("left", "bottom") else 1.0
    other = 1 - axis
    lo, hi = domain.bounds[other]
    s, w = composite_rule(lo, hi, cells, order)
    pts = np.empty((len(s), 2))
    pts[:, axis] = domain.bounds[axis][0 if side < 0 else 1]
    pts[:, other] = s
    normal = np.zeros(2)
    normal[axis] = side
    return pts, w, normal


ANCHOR_EDGES = (("right", 0), ("top", 1))


def _anchor_weights(domain: Domain, n: int):
    """Linear maps from stresses at edge points to resultant forces (right: x, top: y)."""
    pts, weights = [], []
    for edge, k in ANCHOR_EDGES:
        p, w, nrm = edge_quadrature(domain, edge)
        pts.append(p)
        weights.append((w, nrm, k))
    points = np.vstack(pts)
    mats = []
    off = 0
    for (w, nrm, k), p in zip(weights, pts):
        m = np.zeros((len(points), n, n))
        m[off:off + len(p), k, :] = w[:, None] * nrm[None, :]
        mats.append(sp.csr_matrix(m.reshape(len(points), n * n)))
        off += len(p)
    return points, mats


def assemble(cfg: ProblemConfig, modulus_fn: Callable | None = None,
             data: StrainDataSet | None = None, inverse: bool = False) -> Assembly:
    """Build nodes, shape tables, masks, residual operator and the loss object."""
    t0 = time.perf_counter()
    dom = cfg.domain
    dim = cfg.dim
    nodes = build_node_grid(dom, cfg.nodes)
    mask, singular = essential_mask(nodes, cfg.bc)
    rk = RKConfig(cfg.order, cfg.a_bar, {i: 2 for i in singular}, support_h=_support_h(nodes))
    subs = build_subdomains(dom, cfg.subdomains, cfg.r_bar, nodes.spacing, cfg.bc, dim)
    edges = background_edges(dom, subs) if cfg.quadrature == "background" else None
    quads = [build_quadrature(s, cfg.cells, cfg.gauss_order, edges) for s in subs]
    op = build_residual_operator(subs, quads, cfg.scheme, body_force_function(cfg.body_force, dim))
    t1 = time.perf_counter()

    anchor = None
    pts = op.points
    if inverse and data is not None and cfg.inverse.anchor_weight > 0 and data.reactions and dim == 2:
        apts, amats = _anchor_weights(dom, dim)
        measured = np.array([data.reactions[e][k] for e, k in ANCHOR_EDGES])
        anchor = ReactionAnchor(apts, amats, measured, cfg.inverse.anchor_weight)
        pts = np.vstack([pts, apts])
    table = build_shape_table(pts, nodes, rk, threads=cfg.threads)
    n_out = len(nodes)
    disp = NeuroPUField(MLP(cfg.hidden, n_out, dim), table, mask)
    problem = NIMProblem(cfg.material, disp, op, table)

    mod_nodes = mod_rk = None
    if inverse:
        inv = cfg.inverse or InverseSpec()
        mod_nodes = build_node_grid(dom, inv.nodes or cfg.nodes)
        mod_rk = RKConfig(cfg.order, cfg.a_bar, {}, support_h=_support_h(mod_nodes))
        mtable = table if mod_nodes.fingerprint() == nodes.fingerprint() and not singular else \
            build_shape_table(pts, mod_nodes, mod_rk, threads=cfg.threads)
        problem.modulus_field = NeuroPUField(MLP(inv.hidden, len(mod_nodes), 1), mtable,
                                             ConstraintMask(), SigmoidRange(inv.lo, inv.span))
        if data is not None:
            problem.data_table = build_shape_table(data.positions, nodes, rk, threads=cfg.threads)
            problem.data_F = data.F
            problem.alpha = inv.alpha
        problem.anchor = anchor
    elif modulus_fn is not None and cfg.material.scales_with_modulus:
        problem.modulus_values = modulus_fn(*pts.T)
    t2 = time.perf_counter()
    return Assembly(cfg, nodes, rk, mask, problem, modulus_fn, mod_nodes, mod_rk,
                    {"operator": t1 - t0, "shape_tables": t2 - t1})


# ---------------------------------------------------------------- evaluation

def evaluation_grid(cfg: ProblemConfig) -> np.ndarray:
    if cfg.dim == 1:
        lo, hi = cfg.bounds[0]
        return np.linspace(lo, hi, 201)[:, None]
    axes = [np.linspace(lo, hi, 101) for lo, hi in cfg.bounds]
    X, Y = np.meshgrid(*axes, indexing="xy")
    return np.column_stack([X.ravel(), Y.ravel()])


@dataclass
class Solution:
    params: np.ndarray
    history: TrainingHistory
    stop_reason: StopReason
    grid: np.ndarray
    fields: dict
    report: dict
    assembly: Assembly | None = None

    def displacement(self) -> np.ndarray:
        return self.fields["u"]


class FieldEvaluator:
    """Evaluate a trained model at arbitrary points."""

    def __init__(self, asm: Assembly, params):
        self.asm = asm
        self.params = np.asarray(params, float)
        prob = asm.problem
        theta, gamma = prob.split(self.params)
        self.d = prob.displacement.coefficients(theta)
        self.dE = prob.modulus_field.coefficients(gamma)[0] if prob.modulus_field else None

    def table(self, points) -> ShapeTable:
        return build_shape_table(points, self.asm.nodes, self.asm.rk, threads=self.asm.cfg.threads)

    def displacement(self, points, table=None):
        t = table or self.table(points)
        return np.column_stack([t.values @ dk for dk in self.d])

    def def_gradient(self, points, table=None):
        return def_gradient_from_coefficients(self.d, table or self.table(points))

    def modulus(self, points):
        if self.dE is not None:
            t = build_shape_table(points, self.asm.modulus_nodes, self.asm.modulus_rk,
                                  threads=self.asm.cfg.threads)
            return t.values @ self.dE
        if self.asm.modulus_fn is not None:
            return self.asm.modulus_fn(*np.atleast_2d(points).T)
        return None

    def export(self, points) -> dict:
        t = self.table(points)
        u = self.displacement(points, t)
        F = self.def_gradient(points, t)
        mat = self.asm.cfg.material
        E = self.modulus(points)
        P = pk1_stress(mat, F, modulus=E)
        W = energy_density(mat, F, modulus=E)
        out = {"u": u, "F": F, "G": green_strain(F), "P": P, "W": np.asarray(W)}
        if self.dE is not None:
            out["E_hat"] = E
        return out


def field_columns(dim: int, inverse: bool) -> list[str]:
    if dim == 1:
        return ["X", "ux", "Fxx", "Exx", "Pxx", "W"]
    cols = ["X", "Y", "ux", "uy", "Fxx", "Fxy", "Fyx", "Fyy", "Exx", "Eyy", "Exy",
            "Pxx", "Pxy", "Pyx", "Pyy", "W"]
    return cols + (["E_hat"] if inverse else [])


def field_rows(grid, fields, inverse: bool) -> np.ndarray:
    dim = grid.shape[1]
    if dim == 1:
        cols = [grid[:, 0], fields["u"][:, 0], fields["F"][:, 0, 0], fields["G"][:, 0, 0],
                fields["P"][:, 0, 0], fields["W"]]
    else:
        F, G, P = fields["F"], fields["G"], fields["P"]
        cols = [grid[:, 0], grid[:, 1], fields["u"][:, 0], fields["u"][:, 1],
                F[:, 0, 0], F[:, 0, 1], F[:, 1, 0], F[:, 1, 1],
                G[:, 0, 0], G[:, 1, 1], G[:, 0, 1],
                P[:, 0, 0], P[:, 0, 1], P[:, 1, 0], P[:, 1, 1], fields["W"]]
        if inverse:
            cols.append(fields["E_hat"])
    return np.column_stack(cols)


def read_reference_grid(path) -> tuple[np.ndarray, np.ndarray]:
    """Reference displacement CSV with columns X,Y,ux,uy (or X,ux in 1D)."""
    import csv
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ConfigurationError(f"reference file {path} has no data")
    header = [h.strip() for h in rows[0]]
    dim = 2 if "Y" in header else 1
    need = ["X", "ux"] if dim == 1 else ["X", "Y", "ux", "uy"]
    for c in need:
        if c not in header:
            raise ConfigurationError(f"reference file {path} lacks column {c!r}")
    arr = np.array([[float(r[header.index(c)]) for c in need] for r in rows[1:] if r])
    return arr[:, :dim], arr[:, dim:]


def reactions(evaluator: FieldEvaluator, domain: Domain) -> dict:
    """Resultant boundary forces (integral of P n) on every edge of a 2D domain."""
    out = {}
    for edge in EDGE_NAMES[2]:
        pts, w, nrm = edge_quadrature(domain, edge)
        F = evaluator.def_gradient(pts)
        P = pk1_stress(evaluator.asm.cfg.material, F, modulus=evaluator.modulus(pts))
        out[edge] = (w[:, None] * (P @ nrm)).sum(axis=0).tolist()
    return out


# ---------------------------------------------------------------- drivers

def _cached(problem: NIMProblem):
    """Objective wrapper that remembers the loss breakdown of recent evaluations."""
    memo = {}

    def fun(x):
        lb, g = problem._evaluate(x, want_grad=True)
        memo.clear()
        memo[x.tobytes()] = lb
        return lb.total, g

    def breakdown(x):
        lb = memo.get(x.tobytes())
        return lb if lb is not None else problem.loss(x)

    return fun, breakdown


def _train(asm: Assembly, monitors: Mapping[str, Callable], init=None):
    prob = asm.problem
    x0 = prob.init(asm.cfg.seed) if init is None else np.asarray(init, float)
    fun, breakdown = _cached(prob)

    def callback(k, x, f):
        lb = breakdown(x)
        rec = IterationRecord(k, f, lb.residual, lb.data)
        rec.extra["anchor_loss"] = lb.anchor
        if "u" in monitors:
            rec.e_l2_u = monitors["u"](x)
        if "E" in monitors:
            rec.e_l2_E = monitors["E"](x)
        return rec

    t0 = time.perf_counter()
    x, hist, reason = lbfgs_minimize(fun, x0, asm.cfg.optimizer, callback)
    asm.timings["training"] = time.perf_counter() - t0
    return x, hist, reason


def _grid_monitor(asm: Assembly, grid: np.ndarray, ref: np.ndarray):
    table = build_shape_table(grid, asm.nodes, asm.rk, threads=asm.cfg.threads)
    disp = asm.problem.displacement

    def mon(x):
        theta, _ = asm.problem.split(x)
        d = disp.coefficients(theta)
        u = np.column_stack([table.values @ dk for dk in d])
        return relative_l2(u, ref)[0]

    return mon


def _modulus_monitor(asm: Assembly, grid: np.ndarray, ref: np.ndarray):
    table = build_shape_table(grid, asm.modulus_nodes, asm.modulus_rk, threads=asm.cfg.threads)
    mf = asm.problem.modulus_field

    def mon(x):
        _, gamma = asm.problem.split(x)
        return relative_l2(table.values @ mf.coefficients(gamma)[0], ref)[0]

    return mon


def _base_report(cfg: ProblemConfig, reason, hist, prob_loss) -> dict:
    return {
        "name": cfg.name,
        "config": cfg.source,
        "scheme": cfg.scheme.value,
        "seed": cfg.seed,
        "stop_reason": reason.value,
        "converged": reason.converged,
        "iterations": len(hist),
        "final_loss": prob_loss.total,
        "final_residual_loss": prob_loss.residual,
        "final_data_loss": prob_loss.data,
        "final_anchor_loss": prob_loss.anchor,
        "errors": {},
    }


def reference_displacement(cfg: ProblemConfig, grid: np.ndarray):
    """Exact displacement on ``grid`` when the problem has one (bar, affine patch)."""
    if cfg.material.kind is MaterialKind.BAR1D:
        return analytic_bar_solution(grid[:, 0])[0][:, None]
    if cfg.affine is not None:
        G = np.asarray(cfg.affine) - np.eye(cfg.dim)
        return grid @ G.T
    return None


def run_forward(cfg: ProblemConfig, init=None) -> Solution:
    """Train the displacement network for a forward problem and export fields."""
    modulus_fn = None
    if cfg.modulus is not None and cfg.material.scales_with_modulus:
        modulus_fn = cfg.modulus.function(cfg.material.E)
    asm = assemble(cfg, modulus_fn)
    grid = evaluation_grid(cfg)
    ref = reference_displacement(cfg, grid)
    ref_pts = None
    if ref is None and cfg.reference_path:
        ref_pts, ref = read_reference_grid(cfg.reference_path)
    monitors = {}
    if ref is not None:
        monitors["u"] = _grid_monitor(asm, grid if ref_pts is None else ref_pts, ref)
    x, hist, reason = _train(asm, monitors, init)
    ev = FieldEvaluator(asm, x)
    fields = ev.export(grid)
    final = asm.problem.loss(x)
    report = _base_report(cfg, reason, hist, final)
    if ref is not None:
        report["errors"]["e_l2_u"] = monitors["u"](x)
    if cfg.material.kind is MaterialKind.BAR1D:
        eps = analytic_bar_solution(grid[:, 0])[1]
        report["errors"]["max_du_error"] = float(np.max(np.abs(fields["F"][:, 0, 0] - 1.0 - eps)))
    report["timings"] = dict(asm.timings)
    return Solution(x, hist, reason, grid, fields, report, asm)


def generate_strain_data(cfg: ProblemConfig, n_data: int, seed: int = 0,
                         rel_limit: float = 1e-9):
    """Truth forward solve, then F sampled at ``n_data`` uniform random interior points.

    Returns ``(data, truth_solution)``. Raises SolverFailure unless the truth
    solve drives the loss below ``rel_limit`` times its value at the
    initial parameters.
    """
    if n_data < 1:
        raise ConfigurationError("n_data must be >= 1")
    if cfg.modulus is None:
        raise ConfigKeyError("modulus", "truth configuration needs a ground-truth modulus")
    truth = run_forward(cfg.with_(inverse=None))
    prob = truth.assembly.problem
    limit = rel_limit * prob.loss(prob.init(cfg.seed)).total
    if not truth.report["final_loss"] <= limit:
        raise SolverFailure(f"truth solve loss {truth.report['final_loss']:.3e} "
                            f"did not reach {limit:.1e}")
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in cfg.bounds])
    hi = np.array([b[1] for b in cfg.bounds])
    pos = lo + (hi - lo) * rng.uniform(size=(n_data, cfg.dim))
    # keep samples strictly inside the domain
    pos = np.clip(pos, lo + 1e-9 * (hi - lo), hi - 1e-9 * (hi - lo))
    ev = FieldEvaluator(truth.assembly, truth.params)
    F = ev.def_gradient(pos)
    reac = reactions(ev, cfg.domain) if cfg.dim == 2 else {}
    data = StrainDataSet(pos, F, alpha=cfg.inverse.alpha if cfg.inverse else 1.0, reactions=reac)
    truth.report["n_data"] = n_data
    truth.report["data_seed"] = seed
    truth.report["reactions"] = reac
    return data, truth


def run_inverse(cfg: ProblemConfig, data: StrainDataSet, truth_u: np.ndarray | None = None,
                init=None) -> Solution:
    """Jointly train displacement and modulus networks against strain data.

    ``truth_u`` is an optional reference displacement on the evaluation grid.
    """
    if cfg.inverse is None:
        cfg = cfg.with_(inverse=InverseSpec())
    if not cfg.material.scales_with_modulus:
        raise ConfigurationError("inverse identification needs a modulus-scaled material")
    asm = assemble(cfg, data=data, inverse=True)
    grid = evaluation_grid(cfg)
    monitors = {}
    E_ref = None
    if cfg.modulus is not None:
        E_ref = cfg.modulus.function(cfg.material.E)(*grid.T)
        monitors["E"] = _modulus_monitor(asm, grid, E_ref)
    if truth_u is not None:
        monitors["u"] = _grid_monitor(asm, grid, truth_u)
    x, hist, reason = _train(asm, monitors, init)
    ev = FieldEvaluator(asm, x)
    fields = ev.export(grid)
    final = asm.problem.loss(x)
    report = _base_report(cfg, reason, hist, final)
    report["n_data"] = len(data)
    report["anchored"] = asm.problem.anchor is not None
    for key, mon in monitors.items():
        report["errors"][f"e_l2_{key}"] = mon(x)
    report["timings"] = dict(asm.timings)
    return Solution(x, hist, reason, grid, fields, report, asm)


def config_digest(cfg: ProblemConfig) -> str:
    return hashlib.sha1(json.dumps(cfg.source, sort_keys=True, default=str).encode()).hexdigest()[:16]
