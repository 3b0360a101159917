"""NumPy implementation of the compound Poisson-gamma series kernel.

The positive part of a Tweedie density with power parameter 1 < p < 2
factorises as ``f(y) = a(y; phi, p) * exp(tilt)`` where the tilt term is
elementary and ``a`` is the series

    a(y; phi, p) = (1/y) * sum_{j>=1} W_j,
    log W_j = j*c - lgamma(j + 1) - lgamma(j*alpha),
    alpha   = (2 - p) / (p - 1),
    c       = alpha*log(y) - alpha*log(p - 1) - (1 + alpha)*log(phi) - log(2 - p).

``log W_j`` is concave in ``j``, so the sum is evaluated by locating the
maximal term and expanding outward until terms fall below a relative
threshold.  A compiled twin of this module lives in ``_series.pyx``; both
must implement identical semantics (same threshold, same term cap).
"""
import numpy as np
from scipy.special import gammaln

from triangle_risk.exceptions import AccuracyError

# Terms below max_term * REL_TOL are dropped; the cap bounds worst-case work.
REL_TOL_LOG = np.log(1e-12)
MAX_TERMS = 50_000
_CLIMB_CAP = 4_096


def log_series_a(y, phi, p):
    """Return ``log a(y; phi, p)`` elementwise for 1-D arrays y, phi > 0."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    phi = np.ascontiguousarray(phi, dtype=np.float64)
    if y.shape != phi.shape:
        raise ValueError("y and phi must have identical shapes")
    alpha = (2.0 - p) / (p - 1.0)
    logy = np.log(y)
    c = (
        alpha * logy
        - alpha * np.log(p - 1.0)
        - (1.0 + alpha) * np.log(phi)
        - np.log(2.0 - p)
    )

    def logw(j, sel=slice(None)):
        return j * c[sel] - gammaln(j + 1.0) - gammaln(j * alpha)

    # Start from the analytic location of the maximal term, then climb to
    # the exact integer peak (safe because log W_j is concave in j).
    jp = np.maximum(1.0, np.floor(y ** (2.0 - p) / (phi * (2.0 - p))))
    if np.max(jp) > MAX_TERMS:
        raise AccuracyError(
            "series index bound exceeds the %d-term cap; "
            "the requested (y, phi, p) range is outside supported accuracy" % MAX_TERMS
        )
    lw_peak = logw(jp)
    for _ in range(_CLIMB_CAP):
        up = logw(jp + 1.0)
        moved = up > lw_peak
        if not moved.any():
            break
        jp = np.where(moved, jp + 1.0, jp)
        lw_peak = np.where(moved, up, lw_peak)
    else:
        raise AccuracyError("series peak search failed to terminate")
    for _ in range(_CLIMB_CAP):
        down = np.where(jp > 1.0, logw(np.maximum(jp - 1.0, 1.0)), -np.inf)
        moved = down > lw_peak
        if not moved.any():
            break
        jp = np.where(moved, jp - 1.0, jp)
        lw_peak = np.where(moved, down, lw_peak)
    else:
        raise AccuracyError("series peak search failed to terminate")

    total = np.ones_like(y)

    # Upward sweep: j = jp+1, jp+2, ... until the term is negligible.
    sel = np.arange(y.size)
    j = jp + 1.0
    for _ in range(MAX_TERMS):
        if sel.size == 0:
            break
        t = logw(j[sel], sel) - lw_peak[sel]
        total[sel] += np.exp(t)
        keep = t > REL_TOL_LOG
        sel = sel[keep]
        j[sel] += 1.0
    else:
        raise AccuracyError("series exceeded the %d-term cap" % MAX_TERMS)

    # Downward sweep: j = jp-1, ..., 1.
    sel = np.arange(y.size)[jp > 1.0]
    j = jp - 1.0
    for _ in range(MAX_TERMS):
        if sel.size == 0:
            break
        t = logw(j[sel], sel) - lw_peak[sel]
        total[sel] += np.exp(t)
        keep = (t > REL_TOL_LOG) & (j[sel] > 1.0)
        sel = sel[keep]
        j[sel] -= 1.0
    else:
        raise AccuracyError("series exceeded the %d-term cap" % MAX_TERMS)

    return lw_peak + np.log(total) - logy
