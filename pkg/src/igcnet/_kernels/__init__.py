"""Hot kernels with a compiled implementation and a numpy fallback.

The compiled extension is used when it imports; set ``IGCNET_PURE_PYTHON=1``
to force the numpy path.  ``BACKEND`` names the active implementation.
"""
import os

from . import lstm_py

_ext = None
if not os.environ.get("IGCNET_PURE_PYTHON"):
    try:
        from . import _lstm_ext as _ext
    except ImportError:
        _ext = None

if _ext is not None:
    lstm_forward = _ext.lstm_forward
    lstm_backward = _ext.lstm_backward
    BACKEND = "cython"
else:
    lstm_forward = lstm_py.lstm_forward
    lstm_backward = lstm_py.lstm_backward
    BACKEND = "numpy"


def implementations() -> dict:
    """All importable (forward, backward) pairs keyed by backend name."""
    impls = {"numpy": (lstm_py.lstm_forward, lstm_py.lstm_backward)}
    try:
        from . import _lstm_ext
    except ImportError:
        return impls
    impls["cython"] = (_lstm_ext.lstm_forward, _lstm_ext.lstm_backward)
    return impls
