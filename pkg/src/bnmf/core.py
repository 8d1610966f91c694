"""Backend selection for the batchnorm kernels.

The compiled extension is used when it is importable, unless the
environment variable ``BNMF_PURE_PYTHON`` is set to ``1``.
"""
import os

from . import _core_py

BACKEND = "python"
_impl = _core_py
if os.environ.get("BNMF_PURE_PYTHON", "") != "1":
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _core_py

bn_forward = _impl.bn_forward
bn_vjp = _impl.bn_vjp

__all__ = ["BACKEND", "bn_forward", "bn_vjp"]
