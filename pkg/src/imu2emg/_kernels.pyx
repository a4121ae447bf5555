# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled biquad-cascade kernel (transposed direct form II)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def sosfilt(double[:, ::1] sos, double[:, ::1] x, double[:, :, ::1] zi):
    """Filter every column of ``x`` through the cascade ``sos``.

    ``x`` is ``[n_samples, n_channels]``; ``zi`` is ``[n_sections, n_channels, 2]``
    and is updated in place with the final state.
    """
    cdef Py_ssize_t n = x.shape[0], nch = x.shape[1], nsec = sos.shape[0]
    cdef Py_ssize_t i, c, s
    cdef double b0, b1, b2, a1, a2, xi, yi, z0, z1
    out = np.empty((n, nch), dtype=np.float64)
    cdef double[:, ::1] y = out
    for c in range(nch):
        for i in range(n):
            y[i, c] = x[i, c]
    for s in range(nsec):
        b0 = sos[s, 0]; b1 = sos[s, 1]; b2 = sos[s, 2]
        a1 = sos[s, 4]; a2 = sos[s, 5]
        for c in range(nch):
            z0 = zi[s, c, 0]
            z1 = zi[s, c, 1]
            for i in range(n):
                xi = y[i, c]
                yi = b0 * xi + z0
                z0 = b1 * xi - a1 * yi + z1
                z1 = b2 * xi - a2 * yi
                y[i, c] = yi
            zi[s, c, 0] = z0
            zi[s, c, 1] = z1
    return out
