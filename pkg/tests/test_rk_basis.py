import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nim_hyper.discretization import Domain, build_node_grid
from nim_hyper.rk_basis import (
    RKConfig, SupportCoverageError, build_shape_table, cubic_bspline, evaluate_shape,
    monomial_exponents, singular_kernel, with_singular,
)

BAR = build_node_grid(Domain(((-1.0, 1.0),)), 41)
SQUARE = build_node_grid(Domain(((0.0, 1.0), (0.0, 1.0))), (11, 11))


def brute_rk_1d(x, nodes, a_bar=2.5, order=2):
    """Loop-based RK shape functions: psi_I = H(0)^T M^-1 H(x - x_I) phi."""
    xs = nodes.positions[:, 0]
    a = a_bar * nodes.h
    M = np.zeros((order + 1, order + 1))
    terms = []
    for xi in xs:
        z = abs(x - xi) / a
        if z >= 1.0:
            terms.append(None)
            continue
        if z <= 0.5:
            phi = 2 / 3 - 4 * z * z + 4 * z ** 3
        else:
            phi = 4 / 3 - 4 * z + 4 * z * z - 4 / 3 * z ** 3
        H = np.array([(x - xi) ** k for k in range(order + 1)])
        M += np.outer(H, H) * phi
        terms.append((H, phi))
    b = np.linalg.solve(M, np.eye(order + 1)[0])
    return np.array([0.0 if t is None else b @ t[0] * t[1] for t in terms])


def test_bspline_values():
    assert cubic_bspline(0.0) == (pytest.approx(2 / 3), 0.0)
    v_lo = 2 / 3 - 4 * 0.25 + 4 * 0.125
    v_hi = 4 / 3 - 2 + 1 - 4 / 3 * 0.125
    assert v_lo == pytest.approx(1 / 6) and v_hi == pytest.approx(1 / 6)
    assert cubic_bspline(0.5)[0] == pytest.approx(1 / 6)
    assert cubic_bspline(1.2) == (0.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.3))
def test_bspline_derivative_matches_fd(z):
    h = 1e-6
    lo = max(z - h, 0.0)
    fd = (cubic_bspline(z + h)[0] - cubic_bspline(lo)[0]) / (z + h - lo)
    assert cubic_bspline(z)[1] == pytest.approx(fd, abs=1e-5)


def test_bspline_rejects_negative():
    with pytest.raises(ValueError):
        cubic_bspline(-0.1)


def test_singular_kernel_values():
    assert singular_kernel(0.5, 2)[0] == pytest.approx(2 / 3)
    assert singular_kernel(1.5, 2)[0] == 0.0
    v0, _ = singular_kernel(0.0, 2, z_floor=1e-8)
    assert np.isfinite(v0)
    assert v0 == pytest.approx((2 / 3) / 1e-16)


def test_monomial_order():
    assert monomial_exponents(2, 2).tolist() == [[0, 0], [1, 0], [0, 1], [2, 0], [1, 1], [0, 2]]
    assert monomial_exponents(1, 2).ravel().tolist() == [0, 1, 2]


@pytest.mark.parametrize("x", [-1.0, -0.9731, -0.31, 0.0, 0.4444, 0.99, 1.0])
def test_reproduction_1d(x):
    s = evaluate_shape([x], BAR, RKConfig())
    xi = BAR.positions[s.neighbors, 0]
    assert s.values.sum() == pytest.approx(1.0, abs=1e-10)
    assert np.dot(s.values, xi) == pytest.approx(x, abs=1e-10)
    assert np.dot(s.values, xi ** 2) == pytest.approx(x * x, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1.0, 1.0))
def test_matches_bruteforce_oracle(x):
    s = evaluate_shape([x], BAR, RKConfig())
    full = np.zeros(len(BAR))
    full[s.neighbors] = s.values
    assert np.allclose(full, brute_rk_1d(x, BAR), atol=1e-11)


def test_gradients_match_fd():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0.02, 0.98, size=(100, 2))
    cfg = RKConfig()
    step = 1e-6 * SQUARE.h
    worst = 0.0
    for x in pts:
        s = evaluate_shape(x, SQUARE, cfg)
        for d in range(2):
            e = np.zeros(2)
            e[d] = step
            plus = build_shape_table([x + e], SQUARE, cfg).values.toarray()[0]
            minus = build_shape_table([x - e], SQUARE, cfg).values.toarray()[0]
            fd = (plus - minus)[s.neighbors] / (2 * step)
            scale = np.max(np.abs(s.gradients[:, d]))
            worst = max(worst, np.max(np.abs(fd - s.gradients[:, d])) / scale)
    assert worst <= 1e-6


def test_uncovered_point_raises():
    with pytest.raises(SupportCoverageError):
        evaluate_shape([3.0], BAR, RKConfig())


def test_table_matches_pointwise_and_pu():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 1, size=(400, 2))
    table = build_shape_table(pts, SQUARE, RKConfig())
    assert len(table) == 400
    assert np.allclose(table.values.sum(axis=1), 1.0, atol=1e-12)
    s = evaluate_shape(pts[17], SQUARE, RKConfig())
    assert np.allclose(table.sample(17).values, s.values, atol=1e-14)


def test_table_deterministic():
    pts = np.linspace(-1, 1, 2020)[:, None]
    a = build_shape_table(pts, BAR, RKConfig(), chunk=500)
    b = build_shape_table(pts, BAR, RKConfig(), chunk=500, threads=3)
    assert len(a) == 2020
    assert (a.values != b.values).nnz == 0
    assert (a.gradients[0] != b.gradients[0]).nnz == 0
    # chunking changes only the padded neighbor width, so sums may differ in the last ulp
    c = build_shape_table(pts, BAR, RKConfig())
    assert abs(a.gradients[0] - c.gradients[0]).max() <= 1e-13


@pytest.mark.parametrize("node", [0, 55, 110])
def test_singular_delta_property(node):
    edge = SQUARE.on_edge("left")
    cfg = with_singular(RKConfig(), edge)
    xI = SQUARE.positions[node]
    assert node in set(edge.tolist())
    direction = np.array([1.0, 0.3]) / np.hypot(1.0, 0.3)
    offsets = SQUARE.h * np.array([1e-4, 1e-3, 1e-2, 5e-2])
    vals = []
    for o in offsets:
        s = evaluate_shape(xI + o * direction, SQUARE, cfg)
        vals.append(s.values[list(s.neighbors).index(node)])
    assert abs(vals[0] - 1.0) <= 1e-2
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_singular_nodes_keep_reproduction():
    edge = np.concatenate([SQUARE.on_edge(e) for e in ("left", "right", "bottom", "top")])
    cfg = with_singular(RKConfig(), np.unique(edge))
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 1, size=(300, 2))
    Psi = build_shape_table(pts, SQUARE, cfg).values
    for e in monomial_exponents(2, 2):
        mono_n = np.prod(SQUARE.positions ** e, axis=1)
        mono_x = np.prod(pts ** e, axis=1)
        assert np.max(np.abs(Psi @ mono_n - mono_x)) <= 1e-10


def test_config_validation():
    with pytest.raises(ValueError):
        RKConfig(a_bar=1.0)
    with pytest.raises(ValueError):
        RKConfig(order=0)
