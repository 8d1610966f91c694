"""NumPy implementation of the per-neuron batchnorm kernels.

Same interface as the compiled ``bnmf._core``; used when the extension is
not built or when ``BNMF_PURE_PYTHON=1``.
"""
import numpy as np


def bn_forward(H, eps=0.0):
    """Return (Y, inv_sigma) with Y[a] = (H[a] - mean) * inv_sigma[a]."""
    H = np.asarray(H, dtype=np.float64)
    Z = H - H.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt((Z * Z).mean(axis=1) + eps)
    return Z * inv[:, None], inv


def bn_vjp(Gt, Y, inv_sigma):
    """Transposed Jacobian of the normalization applied row-wise."""
    mg = Gt.mean(axis=1, keepdims=True)
    mgy = (Gt * Y).mean(axis=1, keepdims=True)
    return inv_sigma[:, None] * (Gt - mg - Y * mgy)
