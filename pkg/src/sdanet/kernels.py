"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``SDANET_PURE_PYTHON=1`` before import to force the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("SDANET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward
median3x3 = _impl.median3x3
leaky_relu_forward = _impl.leaky_relu_forward
leaky_relu_backward = _impl.leaky_relu_backward
instance_norm_forward = _impl.instance_norm_forward
instance_norm_backward = _impl.instance_norm_backward
