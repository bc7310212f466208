"""Scan kernels with a compiled fast path.

The Cython module is used when it was built; otherwise the numpy fallback
is selected at import.  Setting ``GRANK_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _fallback as fallback

compiled = None
if not os.environ.get("GRANK_PURE_PYTHON"):
    try:
        from . import _scan as compiled
    except ImportError:
        compiled = None

_active = compiled if compiled is not None else fallback
BACKEND = "cython" if compiled is not None else "python"

topk_select = _active.topk_select
topk_dense = _active.topk_dense
topk_codes = _active.topk_codes

__all__ = ["BACKEND", "compiled", "fallback", "topk_codes", "topk_dense", "topk_select"]
