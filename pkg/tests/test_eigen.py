import math

import numpy as np
import pytest

from bnmf import eigen, fixed_point as fp, nonlin
from bnmf.eigen import UltrasymmetricBrackets, bracket_class, ultrasym_eigen

# relu at B = 8 from tests/oracles/make_oracles.py (mpmath closed forms).
RELU_B8 = dict(lambda_L_up=0.74361105819792935883, lambda_M_up=0.53861074071883884517,
               lambda_G_down=1.7881899766587481291, lambda_cb=0.70967722602280317919)
IDENTITY_CB = {4: 0.8488263631567751241, 8: 0.93128378129200470758, 32: 0.98400309316481636911}


def _operator_tensor(B, op):
    """T[k, l, i, j] = (op(E_ij))[k, l] for a linear map on symmetric matrices."""
    T = np.zeros((B, B, B, B))
    for i in range(B):
        for j in range(B):
            E = np.zeros((B, B))
            E[i, j] = 1.0
            T[:, :, i, j] = op(E)
    return T


def test_bracket_class_table():
    assert bracket_class(0, 0, 0, 0) == "11|11"
    assert bracket_class(0, 0, 0, 1) == "11|12"
    assert bracket_class(0, 0, 1, 1) == "11|22"
    assert bracket_class(0, 0, 1, 2) == "11|23"
    assert bracket_class(0, 1, 0, 0) == "12|11"
    assert bracket_class(0, 1, 0, 1) == "12|12"
    assert bracket_class(0, 1, 1, 0) == "12|21"
    assert bracket_class(0, 1, 0, 2) == "12|13"
    assert bracket_class(0, 1, 2, 0) == "12|13"
    assert bracket_class(0, 1, 2, 2) == "12|33"
    assert bracket_class(0, 1, 2, 3) == "12|34"


def test_identity_operator_eigenvalues():
    B = 6
    br = UltrasymmetricBrackets.from_tensor(_operator_tensor(B, lambda E: 0.5 * (E + E.T)))
    ev = ultrasym_eigen(br, B)
    assert (ev["lambda_G"], ev["lambda_L"], ev["lambda_M"]) == pytest.approx((1.0, 1.0, 1.0))
    # The stored identity puts all weight on [12|12]; on symmetric inputs only
    # the sum [12|12] + [12|21] matters, so the eigenvalues coincide.
    ev2 = ultrasym_eigen(UltrasymmetricBrackets.identity(), B)
    assert ev2 == pytest.approx(ev, abs=1e-14)


def test_dos_operator_eigenvalues():
    # Sigma -> G (2 Sigma + diag(Sigma) / 2) G, a simple ultrasymmetric operator.
    B = 7
    G = np.eye(B) - 1.0 / B

    def op(E):
        S = 0.5 * (E + E.T)
        return G @ (2.0 * S + 0.5 * np.diag(np.diag(S))) @ G

    br = UltrasymmetricBrackets.from_tensor(_operator_tensor(B, op))
    ev = ultrasym_eigen(br, B)
    # Compare with the spectrum of the explicit matrix on symmetric G-projected inputs.
    basis = []
    e = np.linalg.qr(G)[0][:, : B - 1]
    for a in range(B - 1):
        for b in range(a, B - 1):
            M = np.outer(e[:, a], e[:, b])
            basis.append((M + M.T) / np.linalg.norm(M + M.T))
    A = np.array([[np.sum(X * op(Y)) for Y in basis] for X in basis])
    spectrum = np.sort(np.linalg.eigvals(A).real)
    for key in ("lambda_G", "lambda_L", "lambda_M"):
        assert np.min(np.abs(spectrum - ev[key])) < 1e-10


@pytest.mark.parametrize("method", eigen.METHODS)
def test_relu_forward_and_backward_b8(method):
    f = eigen.forward_eigen(nonlin.relu(), 8, method)
    b = eigen.backward_eigen(nonlin.relu(), 8, method)
    assert f["lambda_G_up"] == 0.0
    assert f["lambda_L_up"] == pytest.approx(RELU_B8["lambda_L_up"], abs=1e-9)
    assert f["lambda_M_up"] == pytest.approx(RELU_B8["lambda_M_up"], abs=1e-9)
    assert f["bsb1_stable"]
    assert b["lambda_G_down"] == pytest.approx(RELU_B8["lambda_G_down"], abs=1e-9)


@pytest.mark.parametrize("method", eigen.METHODS)
def test_identity_rates(method):
    B = 8
    f = eigen.forward_eigen(nonlin.identity(), B, method)
    b = eigen.backward_eigen(nonlin.identity(), B, method)
    assert b["lambda_G_down"] == pytest.approx((B - 2) / (B - 3), abs=1e-10)
    assert f["lambda_L_up"] == pytest.approx(7 / 9, abs=1e-10)
    assert f["lambda_M_up"] == pytest.approx(7 / 9, abs=1e-10)


def test_routes_agree_for_leaky_relu():
    d = nonlin.leaky_relu(0.2)
    vals = [eigen.backward_eigen(d, 10, m) for m in eigen.METHODS]
    for key in ("lambda_G_down", "lambda_L_down", "lambda_M_down"):
        assert max(v[key] for v in vals) - min(v[key] for v in vals) < 1e-8


def test_tanh_forward_routes_agree():
    d = nonlin.tanh()
    a = eigen.forward_eigen(d, 8, "spherical")
    b = eigen.forward_eigen(d, 8, "gegenbauer")
    assert a["lambda_L_up"] == pytest.approx(b["lambda_L_up"], abs=1e-9)
    assert a["lambda_M_up"] == pytest.approx(b["lambda_M_up"], abs=1e-9)


def test_gradient_explosion_exceeds_linear_rate():
    for d in (nonlin.relu(), nonlin.tanh(), nonlin.sin(), nonlin.leaky_relu(0.5)):
        for B in (5, 12):
            lam = eigen.backward_eigen(d, B, "gegenbauer")["lambda_G_down"]
            assert lam >= (B - 2) / (B - 3) - 1e-10


def test_cross_batch_rate_values():
    for m in eigen.METHODS:
        assert eigen.cross_batch_eigen(nonlin.relu(), 8, m) == pytest.approx(RELU_B8["lambda_cb"], abs=1e-10)
    for B, ref in IDENTITY_CB.items():
        assert eigen.identity_cross_batch_bound(B) == pytest.approx(ref, abs=1e-14)
    tanh_cb = eigen.cross_batch_eigen(nonlin.tanh(), 8, "gegenbauer")
    assert tanh_cb < IDENTITY_CB[8]


def test_degenerate_gradients_for_constant_phi():
    with pytest.raises(eigen.DegenerateGradientError):
        eigen.backward_eigen(nonlin.constant(2.0), 8, "spherical")


def test_dirichlet_form_at_one_is_derivative_moment():
    # t = 1 reduces to (B - 1) E[(1 - x^2) phi'(sqrt(B-1) x)^2]; for identity this is (B-1)(B-2)/(B-1).
    B = 7
    assert eigen.dirichlet_form(nonlin.identity(), B, 1.0) == pytest.approx(B - 2, rel=1e-12)
    assert eigen.dirichlet_form(nonlin.identity(), B, 0.3) == pytest.approx((B - 2) * 0.3, rel=1e-10)


def test_depth_scale_helpers():
    assert eigen.depth_scale(math.e) == pytest.approx(1.0)
    xi = eigen.depth_scale(1.0)
    assert isinstance(xi, eigen.NoExplosion) and math.isinf(xi)
    assert eigen.trainable_depth(2.0) == pytest.approx(32.0)
    assert math.isinf(eigen.trainable_depth(xi))
    p = fp.bsb1_fixed_point(nonlin.relu(), 8, "laplace")
    assert eigen.weight_gradient_scale(p, 3.0) == pytest.approx(3.0 * p.upsilon_star)


def test_eigen_report():
    r = eigen.eigen_report(nonlin.relu(), 8, "laplace")
    d = r.as_dict()
    assert d["lambda_G_down"] == pytest.approx(RELU_B8["lambda_G_down"], abs=1e-9)
    assert d["xi"] == pytest.approx(1 / math.log(RELU_B8["lambda_G_down"]))
    assert r.status == "ok"
    assert r.bsb1_stability_flag


def test_symmetry_breaking_predicted_for_high_degree():
    assert eigen.forward_eigen(nonlin.alpha_relu(1.2), 8, "laplace")["lambda_L_up"] < 1
    assert eigen.forward_eigen(nonlin.alpha_relu(2.5), 8, "laplace")["lambda_L_up"] > 1
