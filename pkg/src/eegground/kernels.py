"""Kernel dispatch: the compiled extension when built, numpy otherwise.

Set ``EEGGROUND_PURE_PYTHON=1`` to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np

from ._ext import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("EEGGROUND_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._ext import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def nearest_code(x, codes) -> tuple[np.ndarray, np.ndarray]:
    """(index, squared distance) of the nearest code per row; ties -> lowest index."""
    return _impl.nearest_code(np.ascontiguousarray(x, dtype=np.float64),
                              np.ascontiguousarray(codes, dtype=np.float64))


def valid_filter2d(img, win) -> np.ndarray:
    return _impl.valid_filter2d(np.ascontiguousarray(img, dtype=np.float64),
                                np.ascontiguousarray(win, dtype=np.float64))
