import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nim_hyper.discretization import Domain, EdgeBC, build_quadrature, build_subdomains
from nim_hyper.experiments import analytic_bar_solution
from nim_hyper.materials import MaterialKind, MaterialModel, pk1_stress
from nim_hyper import residual
from nim_hyper.residual import (
    DataSchemaError, StrainDataSet, assemble_loss, build_residual_operator, data_loss,
    local_residual_c, local_residual_h,
)

# imported under other names so pytest does not collect them
bump = residual.test_function_c
Scheme = residual.TestKind

UNIT = Domain(((0.0, 1.0), (0.0, 1.0)))
BAR = Domain(((-1.0, 1.0),))
BAR_BC = {"left": EdgeBC((0.0,), (0.0,)), "right": EdgeBC((None,), (0.0,))}


def body_x(x):
    return x[:, :1].copy()


def interior_sub():
    subs = build_subdomains(UNIT, (11, 11), 2.5, 0.1)
    return subs[5 * 11 + 5]


def uniform(P, m):
    return np.broadcast_to(P, (m, 2, 2)).copy()


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 2), elements=st.floats(-10, 10)))
def test_uniform_stress_closed_box(P):
    sub = interior_sub()
    q = build_quadrature(sub, 4, 5)
    Rh = local_residual_h(sub, q, uniform(P, len(q.boundary_points)))
    Rc = local_residual_c(sub, q, uniform(P, len(q.domain_points)), uniform(P, len(q.boundary_points)))
    scale = max(1.0, np.abs(P).max())
    assert len(Rh) == 2 and len(Rc) == 2
    assert np.max(np.abs(Rh)) <= 1e-12 * scale
    assert np.max(np.abs(Rc)) <= 1e-10 * scale


def test_zero_stress_c_is_exactly_zero():
    sub = interior_sub()
    q = build_quadrature(sub, 4, 5)
    R = local_residual_c(sub, q, np.zeros((len(q.domain_points), 2, 2)),
                         np.zeros((len(q.boundary_points), 2, 2)))
    assert np.all(R == 0.0)


def bar_exact_residuals(scheme):
    subs = build_subdomains(BAR, 101, 2.5, 0.05, BAR_BC)
    model = MaterialModel(MaterialKind.BAR1D)
    out = []
    for sub in subs:
        q = build_quadrature(sub, 4, 5)
        _, eps_d = analytic_bar_solution(q.domain_points[:, 0])
        _, eps_b = analytic_bar_solution(q.boundary_points[:, 0])
        Pd = pk1_stress(model, (1 + eps_d)[:, None, None])
        Pb = pk1_stress(model, (1 + eps_b)[:, None, None])
        if scheme == "h":
            out.append(local_residual_h(sub, q, Pb, body_x))
        else:
            out.append(local_residual_c(sub, q, Pd, Pb, body_x))
    return np.array(out)


@pytest.mark.parametrize("scheme", ["h", "c"])
def test_bar_exact_solution_residuals(scheme):
    R = bar_exact_residuals(scheme)
    assert R.shape == (101, 1)
    assert np.max(np.abs(R)) <= 1e-6


def test_bump_values():
    sub = interior_sub()
    v, g = bump(sub.center, sub)
    assert v[0] == pytest.approx((2 / 3) ** 2)
    assert np.allclose(g, 0.0)
    face = sub.center + np.array([sub.half_width[0], 0.0])
    assert bump(face, sub)[0][0] == pytest.approx(0.0, abs=1e-15)
    bar = build_subdomains(BAR, 101, 2.5, 0.05)[50]
    x = bar.center + 0.5 * bar.half_width
    assert bump(x, bar)[0][0] == pytest.approx(1 / 6)


def test_bump_gradient_fd():
    sub = interior_sub()
    rng = np.random.default_rng(0)
    x = sub.center + rng.uniform(-0.9, 0.9, size=(50, 2)) * sub.half_width
    _, g = bump(x, sub)
    h = 1e-7
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        fd = (bump(x + e, sub)[0] - bump(x - e, sub)[0]) / (2 * h)
        assert np.allclose(g[:, d], fd, atol=1e-5)


def test_assemble_loss_values():
    assert assemble_loss(np.zeros((7, 2))) == 0.0
    assert assemble_loss([[3.0, 4.0]]) == 25.0


def test_assemble_loss_bruteforce():
    rng = np.random.default_rng(4)
    R = rng.normal(size=(100, 2))
    total = 0.0
    for s in range(100):
        for k in range(2):
            total += R[s, k] * R[s, k]
    assert assemble_loss(R) == pytest.approx(total / 100, rel=1e-15)


def test_data_loss():
    rng = np.random.default_rng(6)
    X = rng.uniform(size=(10, 2))
    F = np.eye(2) + 0.1 * rng.normal(size=(10, 2, 2))
    data = StrainDataSet(X, F, alpha=3.0)
    assert data_loss(F, data) == 0.0
    Fh = F + rng.normal(size=F.shape)
    brute = 0.0
    for j in range(10):
        for a in range(2):
            for b in range(2):
                brute += (F[j, a, b] - Fh[j, a, b]) ** 2
    assert data_loss(Fh, data) == pytest.approx(3.0 * brute / 10, rel=1e-15)
    doubled = StrainDataSet(X, F, alpha=6.0)
    assert data_loss(Fh, doubled) == pytest.approx(2 * data_loss(Fh, data), rel=1e-15)


def test_strain_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    data = StrainDataSet(rng.uniform(size=(5, 2)), np.eye(2) + rng.normal(size=(5, 2, 2)))
    p = tmp_path / "d.csv"
    data.write_csv(p)
    back = StrainDataSet.read_csv(p)
    assert np.array_equal(back.positions, data.positions)
    assert np.array_equal(back.F, data.F)


@pytest.mark.parametrize("header,column", [
    ("X,Y,Fxx,Fxy,Fyx", "Fyy"),
    ("X,Y,Fxx,Fxy,Fyx,Fyy,Fzz", "Fzz"),
])
def test_strain_csv_schema_errors(tmp_path, header, column):
    p = tmp_path / "bad.csv"
    p.write_text(header + "\n" + ",".join(["0.5"] * len(header.split(","))) + "\n")
    with pytest.raises(DataSchemaError) as exc:
        StrainDataSet.read_csv(p, dim=2)
    assert exc.value.column == column


def test_empty_data_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(DataSchemaError):
        StrainDataSet.read_csv(p)
    p.write_text("X,Y,Fxx,Fxy,Fyx,Fyy\n")
    with pytest.raises(DataSchemaError):
        StrainDataSet.read_csv(p)


@pytest.mark.parametrize("scheme", ["h", "c"])
def test_operator_matches_local_residuals(scheme):
    bc = {"left": EdgeBC((0.0, 0.0), (0.0, 0.0)), "right": EdgeBC((None, None), (2.0, -1.0))}
    subs = build_subdomains(UNIT, (5, 5), 2.0, 0.25, bc)
    quads = [build_quadrature(s, 2, 3) for s in subs]
    f = lambda x: np.column_stack([x[:, 0], -x[:, 1]])
    op = build_residual_operator(subs, quads, scheme, f)

    def stress(x):
        return np.stack([np.stack([x[:, 0] + 1, x[:, 1] * x[:, 0]], -1),
                         np.stack([np.sin(x[:, 1]), x[:, 0] ** 2], -1)], axis=1)

    R = op.residuals(stress(op.points))
    for s, (sub, q) in enumerate(zip(subs, quads)):
        if scheme == "h":
            ref = local_residual_h(sub, q, stress(q.boundary_points), f)
        else:
            ref = local_residual_c(sub, q, stress(q.domain_points), stress(q.boundary_points), f)
        assert np.allclose(R[s], ref, atol=1e-13)


def test_operator_adjoint():
    subs = build_subdomains(UNIT, (4, 4), 2.0, 1 / 3)
    quads = [build_quadrature(s, 2, 3) for s in subs]
    op = build_residual_operator(subs, quads, Scheme.CUBIC_BSPLINE)
    rng = np.random.default_rng(9)
    P = rng.normal(size=(len(op.points), 2, 2))
    gR = rng.normal(size=(op.n_subdomains, 2))
    lhs = np.sum((op.residuals(P) - op.const) * gR)
    rhs = np.sum(P * op.adjoint(gR))
    assert lhs == pytest.approx(rhs, rel=1e-12)
