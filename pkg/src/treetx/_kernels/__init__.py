"""Dynamic-programming kernels with a compiled core and a pure-Python fallback.

The Cython extension ``_ckernels`` is used when it was built; otherwise, or
when ``TREETX_PURE_PYTHON=1`` is set, the functions come from ``_pykernels``.
``BACKEND`` names the implementation that was selected at import.
"""

import os

from . import _pykernels

try:
    if os.environ.get("TREETX_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-Python kernels requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

forest_table = _impl.forest_table
tree_dist_table = _impl.tree_dist_table
levenshtein_table = _impl.levenshtein_table


def available_backends():
    """Map backend name to module for every importable implementation."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


__all__ = ["BACKEND", "forest_table", "tree_dist_table", "levenshtein_table",
           "available_backends"]
