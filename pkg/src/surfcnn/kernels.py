"""Selects the compiled convolution kernel, falling back to numpy.

Set ``SURFCNN_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _gconv_py

BACKEND = "python"
gconv_forward = _gconv_py.gconv_forward
gconv_backward = _gconv_py.gconv_backward

if os.environ.get("SURFCNN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _gconv
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        gconv_forward = _gconv.gconv_forward
        gconv_backward = _gconv.gconv_backward


def backends():
    """Available ``{name: (forward, backward)}`` pairs."""
    out = {"python": (_gconv_py.gconv_forward, _gconv_py.gconv_backward)}
    try:
        from . import _gconv
    except ImportError:
        return out
    out["cython"] = (_gconv.gconv_forward, _gconv.gconv_backward)
    return out
