import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nim_hyper.materials import (
    InadmissibleStateError, MaterialKind, MaterialModel, energy_density, green_strain,
    lame_parameters, pk1_stress, pk1_tangent, stress_and_tangent_action,
)

NH = MaterialModel(MaterialKind.NEO_HOOKEAN, 1000.0, 0.3)
SVK = MaterialModel(MaterialKind.SVK, 1000.0, 0.35)
BAR = MaterialModel(MaterialKind.BAR1D)


def closed_form_pk1(kind, F, lam, mu):
    """Hand-derived plane-strain stresses used only as an oracle."""
    if kind is MaterialKind.NEO_HOOKEAN:
        Finv_T = np.linalg.inv(F).swapaxes(-1, -2)
        lnJ = np.log(np.linalg.det(F))[..., None, None]
        return mu * F + (lam * lnJ - mu) * Finv_T
    E = green_strain(F)
    trE = np.trace(E, axis1=-2, axis2=-1)[..., None, None]
    S = lam * trE * np.eye(2) + 2 * mu * E
    return F @ S


def random_F(rng, n, spread=0.3):
    F = np.eye(2) + spread * rng.uniform(-1, 1, size=(n, 2, 2))
    J = np.linalg.det(F)
    return F[J > 0.2]


def test_lame_values():
    lam, mu = lame_parameters(1000.0, 0.3)
    assert lam == pytest.approx(576.9231, abs=1e-4)
    assert mu == pytest.approx(384.6154, abs=1e-4)
    lam, mu = lame_parameters(1000.0, 0.35)
    assert lam == pytest.approx(864.1975, abs=1e-4)
    assert mu == pytest.approx(370.3704, abs=1e-4)
    assert lame_parameters(7.0, 0.0) == (0.0, 3.5)


def test_lame_rejects_incompressible():
    with pytest.raises(ZeroDivisionError):
        lame_parameters(1.0, 0.5)


def test_reference_state_is_stress_free():
    I = np.eye(2)
    for m in (NH, SVK):
        assert energy_density(m, I) == pytest.approx(0.0, abs=1e-14)
        assert np.allclose(pk1_stress(m, I), 0.0, atol=1e-12)
    assert energy_density(BAR, np.ones((1, 1))) == pytest.approx(0.0, abs=1e-15)


def test_nh_energy_hand_evaluation():
    lam, mu = lame_parameters(1000.0, 0.3)
    J = 1.1
    expected = 0.5 * lam * np.log(J) ** 2 - mu * np.log(J) + 0.5 * mu * (1.21 + 1 + 1 - 3)
    assert energy_density(NH, np.diag([1.1, 1.0])) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("model", [NH, SVK], ids=["nh", "svk"])
def test_stress_matches_closed_form(model):
    rng = np.random.default_rng(11)
    F = random_F(rng, 200)
    lam, mu = lame_parameters(model.E, model.nu)
    P = pk1_stress(model, F)
    ref = closed_form_pk1(model.kind, F, lam, mu)
    assert np.max(np.abs(P - ref)) <= 1e-12 * np.max(np.abs(ref))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 2), elements=st.floats(-0.4, 0.4)))
def test_tangent_major_symmetry(G):
    F = np.eye(2) + G
    if np.linalg.det(F) <= 0.1:
        return
    for m in (NH, SVK):
        A = pk1_tangent(m, F)
        assert np.allclose(A, A.T, rtol=0, atol=1e-10 * np.max(np.abs(A)))


@pytest.mark.parametrize("model", [NH, SVK], ids=["nh", "svk"])
def test_tangent_matches_fd(model):
    rng = np.random.default_rng(5)
    for F in [np.eye(2)] + list(random_F(rng, 5)):
        A = pk1_tangent(model, F)
        step = 1e-6
        fd = np.empty((4, 4))
        for k in range(4):
            e = np.zeros(4)
            e[k] = step
            dF = e.reshape(2, 2)
            fd[:, k] = ((pk1_stress(model, F + dF) - pk1_stress(model, F - dF)) / (2 * step)).ravel()
        assert np.max(np.abs(A - fd)) <= 1e-6 * np.max(np.abs(A))


def test_tangent_action_matches_full_tangent():
    rng = np.random.default_rng(8)
    F = random_F(rng, 50)
    D = rng.normal(size=F.shape)
    for m in (NH, SVK):
        P, act = stress_and_tangent_action(m, F, D)
        A = pk1_tangent(m, F)
        ref = np.einsum("qij,qj->qi", A, D.reshape(len(F), 4)).reshape(F.shape)
        assert np.allclose(P, pk1_stress(m, F), atol=1e-10)
        assert np.allclose(act, ref, atol=1e-9)


def test_pointwise_modulus_scales_stress():
    rng = np.random.default_rng(2)
    F = random_F(rng, 20)
    Em = rng.uniform(1, 2, size=len(F))
    unit = SVK.unit()
    P = pk1_stress(unit, F, modulus=Em)
    assert np.allclose(P, Em[:, None, None] * pk1_stress(unit, F), rtol=1e-13)


def test_bar_stress_and_tangent():
    eps = np.linspace(-0.2, 0.5, 15)
    F = (1 + eps)[:, None, None]
    sigma = pk1_stress(BAR, F)[:, 0, 0]
    assert np.allclose(sigma, 1.5 * (np.sqrt(1 + eps) - 1), atol=1e-14)
    tangent = pk1_tangent(BAR, F)[:, 0, 0]
    assert np.allclose(tangent, 0.75 / np.sqrt(1 + eps), atol=1e-14)


def test_bar_stress_along_manufactured_strain():
    from nim_hyper.experiments import analytic_bar_solution
    x = np.linspace(-1, 1, 201)
    _, eps = analytic_bar_solution(x)
    sigma = pk1_stress(BAR, (1 + eps)[:, None, None])[:, 0, 0]
    assert np.allclose(sigma, (1 - x * x) / 2, atol=1e-13)


def test_inadmissible_deformation():
    F = np.array([[[1.0, 0.0], [0.0, -0.5]]])
    with pytest.raises(InadmissibleStateError):
        pk1_stress(NH, F)
    # SVK is defined for any finite F
    assert np.all(np.isfinite(pk1_stress(SVK, F)))


def test_green_strain():
    E = green_strain(np.diag([1.1, 1.0]))
    assert E[0, 0] == pytest.approx(0.105)
    assert E[1, 1] == 0.0
