"""NeuroPU fields: small networks emitting nodal coefficients for RK shape functions.

The network input is a fixed constant, so a field is fully determined by the
flat parameter vector. Displacement fields use one independent network per
component; a modulus field uses a single network with a sigmoid range map.
``NIMProblem`` ties fields, shape tables, material and residual operator
together and returns the loss with its exact parameter gradient.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .discretization import ConfigurationError
from .materials import InadmissibleStateError, MaterialModel, stress_and_tangent_action
from .residual import ResidualOperator
from .rk_basis import ShapeTable


@dataclass(frozen=True)
class MLP:
    """Dense tanh network with identity output, one copy per channel."""

    hidden: tuple[int, ...]
    n_out: int
    channels: int = 1
    input_value: float = 1.0
    output_scale: float = 0.01

    @property
    def sizes(self) -> tuple[int, ...]:
        return (1,) + tuple(self.hidden) + (self.n_out,)

    @property
    def params_per_channel(self) -> int:
        s = self.sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    @property
    def n_params(self) -> int:
        return self.channels * self.params_per_channel

    def init(self, seed: int = 0) -> np.ndarray:
        """Glorot-uniform weights, zero biases.

        The output layer is additionally scaled by ``output_scale`` so the
        initial nodal coefficients describe a small, admissible deformation.
        """
        rng = np.random.default_rng(seed)
        s = self.sizes
        parts = []
        for _ in range(self.channels):
            for i in range(len(s) - 1):
                lim = np.sqrt(6.0 / (s[i] + s[i + 1]))
                if i == len(s) - 2:
                    lim *= self.output_scale
                parts.append(rng.uniform(-lim, lim, size=s[i] * s[i + 1]))
                parts.append(np.zeros(s[i + 1]))
        return np.concatenate(parts)

    def _unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ConfigurationError(f"expected {self.n_params} parameters, got {theta.shape}")
        s = self.sizes
        layers, pos = [], 0
        for _ in range(self.channels):
            ch = []
            for i in range(len(s) - 1):
                W = theta[pos:pos + s[i] * s[i + 1]].reshape(s[i + 1], s[i])
                pos += s[i] * s[i + 1]
                b = theta[pos:pos + s[i + 1]]
                pos += s[i + 1]
                ch.append((W, b))
            layers.append(ch)
        return layers

    def forward(self, theta, keep: bool = False):
        """Outputs of shape (channels, n_out); with ``keep`` also the activations."""
        out, acts = [], []
        for ch in self._unpack(theta):
            a = np.array([self.input_value])
            seen = [a]
            for i, (W, b) in enumerate(ch):
                z = W @ a + b
                a = np.tanh(z) if i < len(ch) - 1 else z
                seen.append(a)
            out.append(a)
            acts.append(seen)
        out = np.array(out)
        return (out, acts) if keep else out

    def backward(self, theta, acts, grad_out) -> np.ndarray:
        """Parameter gradient given activations from ``forward(keep=True)``."""
        grads = []
        for ch, seen, g in zip(self._unpack(theta), acts, np.atleast_2d(grad_out)):
            ch_grads = []
            delta = np.asarray(g, dtype=float)
            for i in range(len(ch) - 1, -1, -1):
                W, _ = ch[i]
                ch_grads.append((np.outer(delta, seen[i]).ravel(), delta.copy()))
                if i > 0:
                    delta = (W.T @ delta) * (1.0 - seen[i] ** 2)
            for gw, gb in reversed(ch_grads):
                grads.append(gw)
                grads.append(gb)
        return np.concatenate(grads)


def mlp_forward(mlp: MLP, theta) -> np.ndarray:
    return mlp.forward(theta)


@dataclass(frozen=True)
class ConstraintMask:
    """Prescribed nodal coefficients: (node, channel, value) triples."""

    nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    channels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.nodes)

    def boolean(self, channels: int, n_nodes: int) -> np.ndarray:
        m = np.zeros((channels, n_nodes), dtype=bool)
        m[self.channels, self.nodes] = True
        return m

    def check(self, singular_nodes) -> None:
        missing = set(int(i) for i in self.nodes) - set(int(i) for i in singular_nodes)
        if missing:
            raise ConfigurationError(f"masked nodes without singular kernels: {sorted(missing)[:5]}")


def apply_constraints(d: np.ndarray, mask: ConstraintMask) -> np.ndarray:
    out = np.array(d, dtype=float, copy=True)
    if len(mask):
        out[mask.channels, mask.nodes] = mask.values
    return out


@dataclass(frozen=True)
class SigmoidRange:
    lo: float = 0.5
    span: float = 3.0

    def __call__(self, o):
        return self.span / (1.0 + np.exp(-o)) + self.lo

    def derivative(self, o):
        s = 1.0 / (1.0 + np.exp(-o))
        return self.span * s * (1.0 - s)


@dataclass(frozen=True)
class NeuroPUField:
    mlp: MLP
    table: ShapeTable | None = None
    mask: ConstraintMask = field(default_factory=ConstraintMask)
    transform: SigmoidRange | None = None  # None = identity

    @property
    def n_params(self) -> int:
        return self.mlp.n_params

    def coefficients(self, theta) -> np.ndarray:
        """Nodal coefficients (channels, N) after output map and constraints."""
        o = self.mlp.forward(theta)
        d = o if self.transform is None else self.transform(o)
        return apply_constraints(d, self.mask)


def evaluate_field(fld: NeuroPUField, theta, table: ShapeTable | None = None) -> np.ndarray:
    """Field values (Q, channels) at the table points."""
    table = fld.table if table is None else table
    d = fld.coefficients(theta)
    return np.column_stack([table.values @ d[c] for c in range(len(d))])


def def_gradient_from_coefficients(d: np.ndarray, table: ShapeTable) -> np.ndarray:
    n = len(d)
    dim = len(table.gradients)
    G = table.stacked_gradients @ np.ascontiguousarray(d.T)  # (dim*Q, n)
    F = G.reshape(dim, len(table), n).transpose(1, 2, 0).copy()
    F += np.eye(n, dim)
    return F


def def_gradient_adjoint(gF: np.ndarray, table: ShapeTable) -> np.ndarray:
    """Pull a (Q, n, dim) cotangent of F back to nodal coefficients (n, N)."""
    Q, n, dim = gF.shape
    stacked = np.ascontiguousarray(gF.transpose(2, 0, 1)).reshape(dim * Q, n)
    return (table.stacked_gradients_t @ stacked).T


def evaluate_def_gradient(fld: NeuroPUField, theta, table: ShapeTable | None = None) -> np.ndarray:
    """Deformation gradient I + grad u at the table points, shape (Q, n, dim)."""
    table = fld.table if table is None else table
    return def_gradient_from_coefficients(fld.coefficients(theta), table)


@dataclass
class ReactionAnchor:
    """Measured boundary resultants as linear functionals of the stress.

    ``weights[m]`` is a sparse (Qa, n*dim) map from stresses at the anchor
    points to resultant ``m``; the loss term is
    ``beta * sum_m ((f_hat_m - f_m) / f_m)^2``.
    """

    points: np.ndarray
    weights: list
    measured: np.ndarray
    beta: float = 1.0


@dataclass
class LossBreakdown:
    total: float
    residual: float
    data: float = 0.0
    anchor: float = 0.0


@dataclass
class NIMProblem:
    """Assembled discrete loss over displacement (and optionally modulus) parameters.

    The modulus enters either as a constant (``material.E``), as a fixed
    per-point array for the stress points (``modulus_values``) or as a
    trainable NeuroPU field (``modulus_field`` with a table at the stress
    points, plus ``modulus_anchor_table`` for anchor points).
    """

    material: MaterialModel
    displacement: NeuroPUField
    operator: ResidualOperator
    grad_table: ShapeTable  # displacement gradients at operator.points (+ anchor points)
    modulus_values: np.ndarray | None = None
    modulus_field: NeuroPUField | None = None
    data_table: ShapeTable | None = None
    data_F: np.ndarray | None = None
    alpha: float = 0.0
    anchor: ReactionAnchor | None = None

    @property
    def n_theta(self) -> int:
        return self.displacement.n_params

    @property
    def n_params(self) -> int:
        return self.n_theta + (self.modulus_field.n_params if self.modulus_field else 0)

    def split(self, params):
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise ConfigurationError(f"expected {self.n_params} parameters, got {params.shape}")
        return params[:self.n_theta], params[self.n_theta:]

    def init(self, seed: int = 0) -> np.ndarray:
        theta = self.displacement.mlp.init(seed)
        if self.modulus_field is None:
            return theta
        return np.concatenate([theta, self.modulus_field.mlp.init(seed + 1)])

    def modulus_at_points(self, gamma) -> np.ndarray | float:
        if self.modulus_field is not None:
            d = self.modulus_field.coefficients(gamma)[0]
            return self.modulus_field.table.values @ d
        if self.modulus_values is not None:
            return self.modulus_values
        return self.material.E

    def loss(self, params) -> LossBreakdown:
        return self._evaluate(params, want_grad=False)[0]

    def loss_and_grad(self, params):
        lb, g = self._evaluate(params, want_grad=True)
        return lb.total, g

    def _evaluate(self, params, want_grad: bool):
        theta, gamma = self.split(params)
        disp = self.displacement
        o, acts = disp.mlp.forward(theta, keep=True)
        d = apply_constraints(o, disp.mask)
        F = def_gradient_from_coefficients(d, self.grad_table)
        n, dim = F.shape[1], F.shape[2]

        scaled = self.material.scales_with_modulus
        unit = self.material.unit() if scaled else self.material
        if scaled:
            if self.modulus_field is not None:
                mf = self.modulus_field
                o_e, acts_e = mf.mlp.forward(gamma, keep=True)
                dE = apply_constraints(mf.transform(o_e) if mf.transform else o_e, mf.mask)[0]
                E = mf.table.values @ dE
            else:
                E = self.modulus_values if self.modulus_values is not None else self.material.E
            E = np.broadcast_to(np.asarray(E, dtype=float), (len(F),))
        else:
            E = np.ones(len(F))

        Qs = len(self.operator.points)
        # first pass: unit-modulus stress; the gradient direction is not known yet
        try:
            from .materials import pk1_stress
            Pbar = pk1_stress(unit, F)
        except InadmissibleStateError as exc:
            i = exc.index[0] if exc.index else 0
            raise InadmissibleStateError(
                f"{exc} at X = {self.grad_table.points[i].tolist()}", exc.index) from None
        P = Pbar * E[:, None, None]

        R = self.operator.residuals(P[:Qs])
        NT = self.operator.n_subdomains
        res_loss = float(np.sum(R * R) / NT)
        data_loss = 0.0
        if self.data_table is not None and self.alpha != 0.0:
            Fd = def_gradient_from_coefficients(d, self.data_table)
            diff = Fd - self.data_F
            data_loss = float(self.alpha * np.sum(diff * diff) / len(diff))
        anchor_loss = 0.0
        if self.anchor is not None:
            flat = P[Qs:].reshape(len(P) - Qs, n * dim)
            fhat = np.array([np.sum(w.multiply(flat)) for w in self.anchor.weights])
            rel = (fhat - self.anchor.measured) / self.anchor.measured
            anchor_loss = float(self.anchor.beta * np.sum(rel * rel))
        lb = LossBreakdown(res_loss + data_loss + anchor_loss, res_loss, data_loss, anchor_loss)
        if not want_grad:
            return lb, None

        gP = np.zeros_like(P)
        gP[:Qs] = self.operator.adjoint(2.0 * R / NT)
        if self.anchor is not None:
            coef = 2.0 * self.anchor.beta * rel / self.anchor.measured
            acc = sum(c * w.toarray() for c, w in zip(coef, self.anchor.weights))
            gP[Qs:] += acc.reshape(len(P) - Qs, n, dim)
        _, gF = stress_and_tangent_action(unit, F, gP * E[:, None, None])
        gd = def_gradient_adjoint(gF, self.grad_table)
        if self.data_table is not None and self.alpha != 0.0:
            gd = gd + def_gradient_adjoint(2.0 * self.alpha * diff / len(diff), self.data_table)
        if len(disp.mask):
            gd[disp.mask.channels, disp.mask.nodes] = 0.0
        g_theta = disp.mlp.backward(theta, acts, gd)
        if self.modulus_field is None:
            return lb, g_theta
        gE = np.einsum("qkj,qkj->q", gP, Pbar)
        mf = self.modulus_field
        gdE = mf.table.values.T @ gE
        if mf.transform is not None:
            gdE = gdE * mf.transform.derivative(o_e[0])
        if len(mf.mask):
            gdE[mf.mask.nodes] = 0.0
        g_gamma = mf.mlp.backward(gamma, acts_e, gdE[None, :])
        return lb, np.concatenate([g_theta, g_gamma])


def loss_and_grad(problem: NIMProblem, params):
    return problem.loss_and_grad(params)


def save_checkpoint(path, params, header: dict) -> None:
    """CSV checkpoint: ``# key=<json value>`` header lines, then one parameter per line."""
    with open(path, "w") as fh:
        for k, v in header.items():
            fh.write(f"# {k}={json.dumps(v)}\n")
        for p in np.asarray(params, dtype=float):
            fh.write(repr(float(p)) + "\n")


def load_checkpoint(path):
    header, vals = {}, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                try:
                    header[k] = json.loads(v)
                except json.JSONDecodeError:
                    header[k] = v
            else:
                vals.append(float(line))
    return np.array(vals), header
