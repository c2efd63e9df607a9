"""Kernel backend selection.

The compiled extension is used when it imports; set ``EDGEPRO_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

from edgepro import _pykernels

if os.environ.get("EDGEPRO_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from edgepro import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward
