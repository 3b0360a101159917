"""Selects the numerical kernel backend at import time.

The compiled extension ``triangle_risk._core._series`` is preferred when it
imported cleanly; otherwise the NumPy implementation is used.  Set
``TRIANGLE_RISK_BACKEND=python`` to force the fallback (useful for
benchmarking and debugging) or ``TRIANGLE_RISK_BACKEND=c`` to require the
extension.
"""
import os

_requested = os.environ.get("TRIANGLE_RISK_BACKEND", "").strip().lower()
if _requested not in ("", "c", "python"):
    raise ImportError(
        "TRIANGLE_RISK_BACKEND must be 'c' or 'python', got %r" % _requested
    )

if _requested == "python":
    from triangle_risk._core import series_py as _impl

    BACKEND = "python"
else:
    try:
        from triangle_risk._core import _series as _impl

        BACKEND = "c"
    except ImportError:
        if _requested == "c":
            raise ImportError(
                "TRIANGLE_RISK_BACKEND=c but the compiled extension is not "
                "available; reinstall without TRIANGLE_RISK_PURE_PYTHON=1"
            )
        from triangle_risk._core import series_py as _impl

        BACKEND = "python"

log_series_a = _impl.log_series_a
