"""Numerical kernels with a compiled fast path and a NumPy fallback."""
