"""Numpy versions of the compiled kernels, same contracts."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def nearest_code(x: np.ndarray, codes: np.ndarray, chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    x = np.ascontiguousarray(x, dtype=np.float64)
    codes = np.ascontiguousarray(codes, dtype=np.float64)
    if x.shape[1] != codes.shape[1]:
        raise ValueError(f"feature dim {x.shape[1]} vs code dim {codes.shape[1]}")
    idx = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x), dtype=np.float64)
    for start in range(0, len(x), chunk):
        block = x[start:start + chunk]
        diff = block[:, None, :] - codes[None, :, :]
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        arg = d2.argmin(axis=1)  # first minimum, i.e. lowest index on ties
        idx[start:start + chunk] = arg
        dist[start:start + chunk] = d2[np.arange(len(block)), arg]
    return idx, dist


def valid_filter2d(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    if win.shape[0] > img.shape[0] or win.shape[1] > img.shape[1]:
        raise ValueError(f"window {win.shape} larger than image {img.shape}")
    views = sliding_window_view(np.asarray(img, dtype=np.float64), win.shape)
    return np.einsum("ijab,ab->ij", views, win)
