"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
NumPy versions in ``_pykernels`` are used. Set ``UNSUPFACE_PURE_PYTHON=1`` to
force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("UNSUPFACE_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        pass

iou_matrix = _impl.iou_matrix
lbp_codes = _impl.lbp_codes
lbp_histograms = _impl.lbp_histograms
UNIFORM_BINS = _pykernels.UNIFORM_BINS


def backends():
    """Return ``{name: module}`` for every importable backend."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
