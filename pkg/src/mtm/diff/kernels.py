"""Hot-loop kernels, compiled when available.

The Cython module ``mtm.diff._kernels`` is used if it was built; otherwise
the numpy versions in ``_reference`` are used. Setting ``MTM_PURE_PYTHON=1``
forces the numpy path. ``BACKEND`` names the active implementation.
"""

import os

from mtm.diff import _reference

if os.environ.get("MTM_PURE_PYTHON") == "1":
    _impl = _reference
    BACKEND = "numpy"
else:
    try:
        from mtm.diff import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _reference
        BACKEND = "numpy"

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
masked_max_fwd = _impl.masked_max_fwd
masked_max_bwd = _impl.masked_max_bwd
scatter_add_rows = _impl.scatter_add_rows
