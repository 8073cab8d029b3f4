"""Kernel backend selection.

The compiled extension is preferred when importable; the pure-numpy
fallback is always available.  Set ``VSRKIT_PURE_KERNELS=1`` to force
the fallback (used by the backend-parity tests and the benchmark).
"""

import os

from . import pure

if os.environ.get("VSRKIT_PURE_KERNELS") == "1":
    _impl = pure
else:
    try:
        from . import _fastkernels as _impl
    except ImportError:
        _impl = pure

BACKEND = "pure" if _impl is pure else "compiled"

im2col2d = _impl.im2col2d
col2im2d = _impl.col2im2d
im2col3d = _impl.im2col3d
col2im3d = _impl.col2im3d
ctc_forward_backward = _impl.ctc_forward_backward
