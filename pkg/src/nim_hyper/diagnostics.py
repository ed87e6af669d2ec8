"""Invariant check suites behind ``nim-hyper diagnose``."""
from __future__ import annotations

import numpy as np

from .discretization import ConfigurationError
from .experiments import ProblemConfig, assemble
from .field import MLP
from .rk_basis import build_shape_table, monomial_exponents

GRADIENT_TOL = 1e-5
PATCH_TOL = 1e-16
PU_TOL = 1e-12
REPRO_TOL = 1e-10


def params_for_coefficients(mlp: MLP, d: np.ndarray) -> np.ndarray:
    """Parameters whose network outputs are exactly ``d`` (zero weights, output bias = d)."""
    d = np.atleast_2d(np.asarray(d, dtype=float))
    theta = np.zeros(mlp.n_params)
    per = mlp.params_per_channel
    for c in range(mlp.channels):
        theta[(c + 1) * per - mlp.n_out:(c + 1) * per] = d[c]
    return theta


def fd_gradient_check(problem, params, step: float = 1e-5, components=None, floor: float = 1e-8):
    """Central-difference check of ``problem.loss_and_grad``.

    Returns ``(max_relative_deviation, worst_index, n_checked)`` over
    components whose analytic gradient exceeds ``floor`` in magnitude.
    """
    params = np.asarray(params, dtype=float)
    _, g = problem.loss_and_grad(params)
    idx = np.arange(len(params)) if components is None else np.asarray(components)
    worst, worst_i, n = 0.0, -1, 0
    for i in idx:
        if abs(g[i]) <= floor:
            continue
        e = np.zeros_like(params)
        e[i] = step
        fd = (problem.loss(params + e).total - problem.loss(params - e).total) / (2 * step)
        dev = abs(fd - g[i]) / abs(g[i])
        n += 1
        if dev > worst:
            worst, worst_i = dev, int(i)
    return worst, worst_i, n


def check_gradients(cfg: ProblemConfig, seed: int = 0, max_components: int = 200) -> dict:
    asm = assemble(cfg)
    prob = asm.problem
    params = prob.init(cfg.seed + 1000 + seed)
    rng = np.random.default_rng(seed)
    comps = None
    if prob.n_params > max_components:
        comps = np.sort(rng.choice(prob.n_params, max_components, replace=False))
    worst, wi, n = fd_gradient_check(prob, params, components=comps)
    return {"check": "gradients", "max_relative_deviation": worst, "worst": wi,
            "components_checked": n, "tolerance": GRADIENT_TOL, "passed": worst <= GRADIENT_TOL}


def check_patch(cfg: ProblemConfig) -> dict:
    if cfg.affine is None:
        raise ConfigurationError("the patch check needs an [affine] gradient in the config")
    asm = assemble(cfg)
    G = np.asarray(cfg.affine) - np.eye(cfg.dim)
    d = (asm.nodes.positions @ G.T).T
    params = params_for_coefficients(asm.problem.displacement.mlp, d)
    loss = asm.problem.loss(params).total
    return {"check": "patch", "loss_at_exact_coefficients": loss, "worst": "loss",
            "tolerance": PATCH_TOL, "passed": loss <= PATCH_TOL}


def reproduction_errors(nodes, rk, points) -> dict:
    table = build_shape_table(points, nodes, rk)
    Psi = table.values
    out = {"pu": float(np.max(np.abs(Psi @ np.ones(len(nodes)) - 1.0)))}
    worst = 0.0
    for e in monomial_exponents(nodes.dim, rk.order):
        mono_n = np.prod(nodes.positions ** e, axis=1)
        mono_x = np.prod(points ** e, axis=1)
        worst = max(worst, float(np.max(np.abs(Psi @ mono_n - mono_x))))
    out["reproduction"] = worst
    return out


def check_reproduce(cfg: ProblemConfig, n_points: int = 1000, seed: int = 0) -> dict:
    asm = assemble(cfg)
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in cfg.bounds])
    hi = np.array([b[1] for b in cfg.bounds])
    pts = lo + (hi - lo) * rng.uniform(size=(n_points, cfg.dim))
    from dataclasses import replace
    plain = replace(asm.rk, singular_nodes={})
    with_sk = reproduction_errors(asm.nodes, asm.rk, pts)
    without = reproduction_errors(asm.nodes, plain, pts)
    pu = max(with_sk["pu"], without["pu"])
    rep = max(with_sk["reproduction"], without["reproduction"])
    worst = "pu" if pu / PU_TOL > rep / REPRO_TOL else "reproduction"
    return {"check": "reproduce", "max_pu_deviation": pu, "max_reproduction_deviation": rep,
            "singular_nodes": len(asm.rk.singular_nodes), "worst": worst,
            "passed": pu <= PU_TOL and rep <= REPRO_TOL}


def run_check(name: str, cfg: ProblemConfig) -> dict:
    if name == "gradients":
        return check_gradients(cfg)
    if name == "patch":
        return check_patch(cfg)
    if name == "reproduce":
        return check_reproduce(cfg)
    raise ConfigurationError(f"unknown check {name!r}")
