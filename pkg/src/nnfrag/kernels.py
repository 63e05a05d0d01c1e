"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise (or when
``NNFRAG_PURE_PYTHON=1``) the numpy fallback is used.  ``BACKEND`` names the
active one.
"""
import os

from . import _kernels_py

_force_py = os.environ.get("NNFRAG_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_py:
        raise ImportError
    from . import _kernels as _impl
    BACKEND = "compiled"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

conv_out_size = _kernels_py.conv_out_size
im2col = _impl.im2col
col2im = _impl.col2im
softplus_family = _impl.softplus_family
