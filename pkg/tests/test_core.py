import numpy as np
import pytest

from bnmf import _core_py, core


def _inputs(B=8, N=50, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((N, B)) * rng.uniform(0.5, 3.0, size=(N, 1)) + rng.standard_normal((N, 1))


def test_forward_normalizes_rows():
    Y, inv = core.bn_forward(_inputs())
    assert np.allclose(Y.mean(axis=1), 0.0, atol=1e-13)
    assert np.allclose((Y * Y).mean(axis=1), 1.0, atol=1e-12)
    assert inv.shape == (50,)


@pytest.mark.parametrize("eps", [0.0, 1e-3])
def test_vjp_matches_finite_differences(eps):
    H = _inputs(B=6, N=4, seed=1)
    rng = np.random.default_rng(2)
    Gt = rng.standard_normal(H.shape)
    Y, inv = core.bn_forward(H, eps)
    D = core.bn_vjp(Gt, Y, inv)
    h = 1e-6
    fd = np.zeros_like(H)
    for a in range(H.shape[0]):
        for b in range(H.shape[1]):
            Hp, Hm = H.copy(), H.copy()
            Hp[a, b] += h
            Hm[a, b] -= h
            fd[a, b] = (np.sum(Gt * core.bn_forward(Hp, eps)[0]) - np.sum(Gt * core.bn_forward(Hm, eps)[0])) / (2 * h)
    assert np.allclose(D, fd, atol=1e-7)


def test_gradients_vanish_for_batch_of_two():
    # With two samples the normalized output is +-1 whatever the input.
    H = _inputs(B=2, N=30, seed=3)
    Y, inv = core.bn_forward(H)
    assert np.allclose(np.abs(Y), 1.0)
    Gt = np.random.default_rng(4).standard_normal(H.shape)
    assert np.abs(core.bn_vjp(Gt, Y, inv)).max() < 1e-12


def test_backends_agree():
    H = _inputs(B=16, N=200, seed=5)
    Gt = np.random.default_rng(6).standard_normal(H.shape)
    Y1, i1 = core.bn_forward(H, 1e-5)
    Y2, i2 = _core_py.bn_forward(H, 1e-5)
    assert np.allclose(Y1, Y2, rtol=1e-13, atol=1e-14)
    assert np.allclose(i1, i2, rtol=1e-13)
    assert np.allclose(core.bn_vjp(Gt, Y1, i1), _core_py.bn_vjp(Gt, Y2, i2), rtol=1e-12, atol=1e-14)


def test_backend_name():
    assert core.BACKEND in ("cython", "python")
