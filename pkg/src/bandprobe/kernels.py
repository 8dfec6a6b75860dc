"""Backend selection for the hot kernels.

The compiled extension is used when it imports; set ``BANDPROBE_PURE=1``
to force the numpy fallback.
"""

import logging
import os

import numpy as np

from . import _kernels_py

log = logging.getLogger(__name__)

_c = None
if os.environ.get("BANDPROBE_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _c
    except ImportError:  # pragma: no cover - depends on the build
        log.debug("compiled kernels unavailable; using numpy fallback")

BACKEND = "cython" if _c is not None else "numpy"


def _contig(x):
    return np.ascontiguousarray(x)


if _c is not None:

    def im2col3x3(x):
        return _c.im2col3x3(_contig(x))

    def col2im3x3(cols, n, c, h, w):
        return _c.col2im3x3(_contig(cols), n, c, h, w)

    def maxpool2x2(x):
        return _c.maxpool2x2(_contig(x))

    def maxpool2x2_backward(dout, idx):
        return _c.maxpool2x2_backward(_contig(dout), _contig(idx))

else:
    im2col3x3 = _kernels_py.im2col3x3
    col2im3x3 = _kernels_py.col2im3x3
    maxpool2x2 = _kernels_py.maxpool2x2
    maxpool2x2_backward = _kernels_py.maxpool2x2_backward
