"""Kernel backend selection.

The compiled Cython module is used when it imports; otherwise, or when the
environment variable ``LIDOG_PURE_PYTHON=1`` is set, the numpy fallback is used.
"""

import os

from . import _fallback as fallback

compiled = None
if os.environ.get("LIDOG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled
    except ImportError:
        compiled = None

kernels = compiled if compiled is not None else fallback
BACKEND = "cython" if compiled is not None else "numpy"

__all__ = ["kernels", "fallback", "compiled", "BACKEND"]
