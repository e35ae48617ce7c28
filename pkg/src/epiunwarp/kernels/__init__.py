"""Convolution kernel backend selection.

The compiled Cython lane is used when the extension built; the numpy
fallback is always available.  Set EPIUNWARP_PURE_PYTHON=1 to force the
fallback (used by the kernel benchmark and equivalence tests).
"""

import os

from . import _conv_np

if os.environ.get("EPIUNWARP_PURE_PYTHON"):
    _impl = _conv_np
else:
    try:
        from . import _conv_cy as _impl
    except ImportError:
        _impl = _conv_np

HAVE_COMPILED = _impl.COMPILED

conv_forward = _impl.conv_forward
conv_bwd_kernel = _impl.conv_bwd_kernel
conv_bwd_input = _impl.conv_bwd_input
