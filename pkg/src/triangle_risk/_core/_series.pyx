# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twin of ``series_py.log_series_a``.

Evaluates the compound Poisson-gamma series term sum per element with the
same peak-and-expand strategy, relative threshold, and term cap as the
NumPy implementation.  Semantics of the two backends must stay identical.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, lgamma, log, pow

cnp.import_array()

cdef double REL_TOL_LOG = log(1e-12)
cdef long MAX_TERMS = 50_000
cdef long CLIMB_CAP = 4_096


cdef inline double _logw(double j, double c, double alpha) nogil:
    return j * c - lgamma(j + 1.0) - lgamma(j * alpha)


def log_series_a(object y_in, object phi_in, double p):
    """Return ``log a(y; phi, p)`` elementwise for 1-D arrays y, phi > 0."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] phi = np.ascontiguousarray(phi_in, dtype=np.float64)
    if y.shape[0] != phi.shape[0]:
        raise ValueError("y and phi must have identical shapes")
    cdef Py_ssize_t n = y.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double alpha = (2.0 - p) / (p - 1.0)
    cdef double lp1 = log(p - 1.0)
    cdef double l2p = log(2.0 - p)
    cdef double logy, c, jp, lw_peak, cand, total, t, j
    cdef long steps, climb
    cdef Py_ssize_t i
    cdef int failed = 0

    with nogil:
        for i in range(n):
            logy = log(y[i])
            c = alpha * logy - alpha * lp1 - (1.0 + alpha) * log(phi[i]) - l2p
            jp = pow(y[i], 2.0 - p) / (phi[i] * (2.0 - p))
            if jp < 1.0:
                jp = 1.0
            else:
                jp = <double> (<long> jp)
            if jp > MAX_TERMS:
                failed = 1
                break
            lw_peak = _logw(jp, c, alpha)
            climb = 0
            while climb < CLIMB_CAP:
                cand = _logw(jp + 1.0, c, alpha)
                if cand <= lw_peak:
                    break
                jp += 1.0
                lw_peak = cand
                climb += 1
            while climb < CLIMB_CAP and jp > 1.0:
                cand = _logw(jp - 1.0, c, alpha)
                if cand <= lw_peak:
                    break
                jp -= 1.0
                lw_peak = cand
                climb += 1
            if climb >= CLIMB_CAP:
                failed = 1
                break

            total = 1.0
            j = jp + 1.0
            steps = 0
            while True:
                t = _logw(j, c, alpha) - lw_peak
                total += exp(t)
                if t <= REL_TOL_LOG:
                    break
                j += 1.0
                steps += 1
                if steps > MAX_TERMS:
                    failed = 1
                    break
            if failed:
                break
            j = jp - 1.0
            steps = 0
            while j >= 1.0:
                t = _logw(j, c, alpha) - lw_peak
                total += exp(t)
                if t <= REL_TOL_LOG:
                    break
                j -= 1.0
                steps += 1
                if steps > MAX_TERMS:
                    failed = 1
                    break
            if failed:
                break
            out[i] = lw_peak + log(total) - logy

    if failed:
        from triangle_risk.exceptions import AccuracyError
        raise AccuracyError(
            "series exceeded the %d-term cap; the requested (y, phi, p) "
            "range is outside supported accuracy" % MAX_TERMS
        )
    return out
