import math

import numpy as np
import pytest

from bnmf import kernels, nonlin
from bnmf.kernels import QuadratureSpec, SingularCovarianceError, SphereMoments
from bnmf.mcsim import random_input_covariance
from bnmf.quadrature import pair_quadrature, single_quadrature

# relu at B = 8 from tests/oracles/make_oracles.py: c* = J_1(-1/7).
RELU_B8_C_STAR = 0.25013493286145116225


def test_centering_and_basis():
    B = 7
    G = kernels.centering(B)
    assert np.allclose(G @ G, G)
    e = kernels.basis_e(B)
    assert np.allclose(e.T @ e, np.eye(B - 1))
    assert np.allclose(e.sum(axis=0), 0.0)
    assert np.allclose(e @ e.T, G)


def test_bsb1_helpers():
    m = kernels.bsb1(5, 2.0, 0.5)
    assert kernels.is_bsb1(m)
    assert not kernels.is_g_projected(m)
    assert kernels.is_g_projected(kernels.mean_center(m))
    m[0, 1] = m[1, 0] = 0.6
    assert not kernels.is_bsb1(m)


def test_covariance_validation():
    with pytest.raises(ValueError):
        kernels.CovarianceMatrix(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        kernels.CovarianceMatrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
    c = kernels.CovarianceMatrix(kernels.bsb1(4, 1.0, 0.1))
    assert c.B == 4 and c.is_bsb1()


def test_quadrature_spec_validation():
    with pytest.raises(ValueError):
        QuadratureSpec(nodes_per_angle=4)
    with pytest.raises(ValueError):
        QuadratureSpec(method="simpson")


@pytest.mark.parametrize("B", [4, 6, 11])
def test_single_quadrature_moments(B):
    # x = u.v with v uniform on S^(B-2): E x^2 = 1/(B-1), E x^4 = 3/((B-1)(B+1)).
    x, w = single_quadrature(B, 64)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    assert w @ x ** 2 == pytest.approx(1 / (B - 1), rel=1e-13)
    assert w @ x ** 4 == pytest.approx(3 / ((B - 1) * (B + 1)), rel=1e-13)


def test_pair_quadrature_correlation():
    B, rho = 8, -1 / 7
    X, Y, W = pair_quadrature(B, rho, 48)
    assert W.sum() == pytest.approx(1.0, abs=1e-13)
    assert W @ (X * Y) == pytest.approx(rho / (B - 1), rel=1e-12)
    assert W @ X ** 2 == pytest.approx(1 / (B - 1), rel=1e-12)


def test_sphere_moments_against_exact_and_sampling():
    B = 7
    sm = SphereMoments(B)
    x, w = single_quadrature(B, 64)
    w1 = math.sqrt((B - 1) / B) * x
    # Sum-zero constraint: E[w_a w_b] = -1 / (B (B - 1)) for a != b.
    poly = sm.cond_poly([("f", 0), ("f", 1)], k=1)
    assert w @ sm.eval_poly(poly, w1) == pytest.approx(-1 / (B * (B - 1)), rel=1e-12)
    poly4 = sm.cond_poly([("f", 0), ("f", 0), ("f", 1), ("f", 2)], k=1)
    exact4 = float(w @ sm.eval_poly(poly4, w1))
    rng = np.random.default_rng(5)
    z = rng.standard_normal((400_000, B - 1)) @ kernels.basis_e(B).T
    v = z / np.linalg.norm(z, axis=1, keepdims=True)
    s = v[:, 1] ** 2 * v[:, 2] * v[:, 3]
    assert abs(s.mean() - exact4) < 5 * s.std() / math.sqrt(len(s))


@pytest.mark.parametrize("B", [3, 4, 8, 16])
def test_bsb1_image_matches_laplace_for_relu(B):
    d = nonlin.relu()
    quad = kernels.v_transform_bsb1(d, B)
    lap = kernels.v_transform_laplace(d.pos_hom, B)
    assert quad[0] == pytest.approx(lap[0], abs=1e-11)
    assert quad[1] == pytest.approx(lap[1], abs=1e-11)
    if B == 8:
        assert lap[1] / lap[0] == pytest.approx(RELU_B8_C_STAR, abs=1e-14)


def test_bsb1_image_sampling_route():
    d = nonlin.tanh()
    ref = kernels.v_transform_bsb1(d, 6)
    mc = kernels.v_transform_bsb1(d, 6, QuadratureSpec(method="full_sphere_mc", mc_samples=200_000))
    assert mc[0] == pytest.approx(ref[0], abs=5e-3)
    assert mc[1] == pytest.approx(ref[1], abs=5e-3)


def test_laplace_general_agrees_at_bsb1_and_is_scale_invariant():
    d = nonlin.leaky_relu(0.3)
    B = 6
    V = kernels.v_transform_laplace_general(d.pos_hom, kernels.bsb1(B, 1.0, 0.2))
    diag, off = kernels.v_transform_laplace(d.pos_hom, B)
    assert np.allclose(np.diag(V), diag, atol=1e-10)
    assert np.allclose(V[~np.eye(B, dtype=bool)], off, atol=1e-10)
    S = random_input_covariance(B, 4)
    assert np.allclose(kernels.v_transform_laplace_general(d.pos_hom, 3.7 * S),
                       kernels.v_transform_laplace_general(d.pos_hom, S), atol=1e-10)


def test_identity_image_is_projected_input():
    # For phi = id, V(Sigma) = B E[y y^T / |y|^2] with y ~ N(0, G Sigma G); at BSB1 inputs this is B/(B-1) G.
    B = 5
    V = kernels.v_transform_laplace_general(nonlin.identity().pos_hom, kernels.bsb1(B, 2.0, 0.3))
    assert np.allclose(V, B / (B - 1) * kernels.centering(B), atol=1e-11)


def test_sampling_estimator_at_general_covariance():
    d = nonlin.relu()
    S = random_input_covariance(5, 2)
    ref = kernels.v_transform_laplace_general(d.pos_hom, S)
    est, se = kernels.v_transform_general(d, S, QuadratureSpec(mc_samples=200_000, seed=3),
                                          return_stderr=True)
    z = np.abs(est - ref) / np.maximum(se, 1e-12)
    assert z.max() < 4.5


def test_rank_deficient_input_is_rejected():
    B = 5
    S = np.ones((B, B))
    S[0, 0] = 2.0
    with pytest.raises(SingularCovarianceError):
        kernels.v_transform_laplace_general(nonlin.relu().pos_hom, S)
