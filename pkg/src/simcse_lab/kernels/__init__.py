"""Hot loops behind the autograd ops and the rank statistics.

``SIMCSE_LAB_BACKEND`` picks the implementation at import time:

* ``numba`` (default when numba imports) -- ``@njit`` loop kernels
* ``numpy`` -- vectorised reference path

Both backends agree to rounding error; bit-exact reproducibility is only
promised within one backend, so the active name is written into run metadata.
"""

import os

from . import _numpy

_requested = os.environ.get("SIMCSE_LAB_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"SIMCSE_LAB_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

_impl = _numpy
BACKEND = "numpy"
if _requested == "numba":
    try:
        from . import _numba as _impl  # noqa: F811

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba missing
        _impl = _numpy

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
log_softmax_rows = _impl.log_softmax_rows
log_softmax_rows_backward = _impl.log_softmax_rows_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
gelu = _impl.gelu
gelu_backward = _impl.gelu_backward
embedding_backward = _impl.embedding_backward
average_ranks = _impl.average_ranks

__all__ = [
    "BACKEND",
    "softmax_rows",
    "softmax_rows_backward",
    "log_softmax_rows",
    "log_softmax_rows_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "gelu",
    "gelu_backward",
    "embedding_backward",
    "average_ranks",
]
