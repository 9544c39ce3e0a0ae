"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from eegground._ext import _kernels_py

try:
    from eegground._ext import _kernels as _compiled
except ImportError:
    _compiled = None


def cases(rng):
    x = rng.standard_normal((4096, 48))
    codes = rng.standard_normal((256, 48))
    img = rng.random((64, 64))
    g = np.exp(-0.5 * ((np.arange(11) - 5) / 1.5) ** 2)
    win = np.outer(g, g) / np.outer(g, g).sum()
    return {
        "nearest_code 4096x256x48": (lambda m: m.nearest_code(x, codes)),
        "valid_filter2d 64x64 * 11x11": (lambda m: m.valid_filter2d(img, win)),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    if _compiled is None:
        print("compiled extension not built; only the numpy path is timed")
    print(f"{'kernel':32s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if _compiled is None:
            print(f"{name:32s} {py:10.2f} {'-':>10s} {'-':>8s}")
            continue
        a, b = fn(_kernels_py), fn(_compiled)
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)
        cy = min(timeit.repeat(lambda: fn(_compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:32s} {py:10.2f} {cy:10.2f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
