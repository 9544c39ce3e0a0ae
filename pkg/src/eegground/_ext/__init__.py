"""Compiled kernels (Cython) with pure-numpy equivalents."""
