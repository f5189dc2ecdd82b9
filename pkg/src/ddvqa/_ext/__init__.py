"""Kernel backend selection.

The compiled extension is used when it imported cleanly; otherwise the
numpy/pure-Python twins are used. Set ``DDVQA_PURE_PYTHON=1`` to force the
fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
kernels = _pykernels

if os.environ.get("DDVQA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        kernels = _ckernels
        BACKEND = "cython"


def available_backends():
    out = {"python": _pykernels}
    try:
        from . import _ckernels  # type: ignore[attr-defined]
    except ImportError:
        return out
    out["cython"] = _ckernels
    return out


__all__ = ["BACKEND", "kernels", "available_backends"]
