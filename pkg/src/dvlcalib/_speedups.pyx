# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled assembly of white-noise-on-jerk covariance blocks.

Hot-loop twin of `_wnoj_numpy.wnoj_channel_block`; see that module for the
math. Kept to a single entry point so the two backends stay interchangeable.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _phi_dot(int da, int db, double x, double y) nogil:
    # sum_k Phi[da,k](x) * Phi[db,k](y) for the constant-jerk transition
    if da > db:
        return _phi_dot(db, da, y, x)
    if da == 0:
        if db == 0:
            return 1.0 + x * y + 0.25 * x * x * y * y
        if db == 1:
            return x + 0.5 * x * x * y
        return 0.5 * x * x
    if da == 1:
        if db == 1:
            return 1.0 + x * y
        return x
    return 1.0


cdef inline double _f_entry(int da, int db, double x, double y, double c) nogil:
    if da > db:
        return _f_entry(db, da, y, x, c)
    if da == 0:
        if db == 0:
            return c * (c * (c * (c * (c * 0.05 - (x + y) * 0.125)
                                 + x * x / 12.0 + x * y / 3.0 + y * y / 12.0)
                             - (x * x * y + x * y * y) * 0.25)
                        + x * x * y * y * 0.25)
        if db == 1:
            return c * (c * (c * (-c * 0.125 + x / 3.0 + y / 6.0)
                             - x * x * 0.25 - x * y * 0.5)
                        + x * x * y * 0.5)
        return c * (c * (c / 6.0 - x * 0.5) + x * x * 0.5)
    if da == 1:
        if db == 1:
            return c * (c * (c / 3.0 - (x + y) * 0.5) + x * y)
        return c * (-c * 0.5 + x)
    return c


def wnoj_channel_block(ta, int da, tb, int db, seg_starts, seg_psd,
                       double t0, double p0):
    """Covariance block between channel `da` at `ta` and channel `db` at `tb`."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] a = np.ascontiguousarray(ta, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] b = np.ascontiguousarray(tb, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] starts = np.ascontiguousarray(seg_starts, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] psd = np.ascontiguousarray(seg_psd, dtype=np.float64)
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0], ns = starts.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((na, nb), dtype=np.float64)

    cdef Py_ssize_t i, j, s
    cdef double xa, xb, m, acc, lo, hi, c, q
    for i in range(na):
        xa = a[i] - t0
        if xa < -1e-12:
            raise ValueError("evaluation times precede the kernel start time")
        for j in range(nb):
            xb = b[j] - t0
            if xb < -1e-12:
                raise ValueError("evaluation times precede the kernel start time")
            m = xa if xa < xb else xb
            acc = p0 * _phi_dot(da, db, xa, xb) if p0 != 0.0 else 0.0
            for s in range(ns):
                q = psd[s]
                if q == 0.0:
                    continue
                lo = starts[s] - t0
                if lo < 0.0:
                    lo = 0.0
                if lo >= m:
                    continue
                hi = (starts[s + 1] - t0) if s + 1 < ns else m
                c = hi if hi < m else m
                c -= lo
                if c <= 0.0:
                    continue
                acc += q * _f_entry(da, db, xa - lo, xb - lo, c)
            out[i, j] = acc
    return out
