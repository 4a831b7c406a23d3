# cython: language_level=3
"""Compiled inner loops.

Every accumulator is passed as the real view of a C-contiguous complex
array, shape ``(ns, nx, 2 * ny)``: real parts at even columns, imaginary
parts at odd columns. Each term is formed in double precision, cast to the
accumulator dtype and then added, the same operation sequence as the numpy
fallback in ``_fallback.py``.
"""
cimport cython

ctypedef fused data_t:
    float
    double

ctypedef fused acc_t:
    float
    double

ctypedef fused index_t:
    int
    long long


@cython.boundscheck(False)
@cython.wraparound(False)
def accumulate_slice(const data_t[:, :] tau, const double[::1] w_re,
                     const double[::1] w_im, acc_t[:, :, ::1] out):
    cdef Py_ssize_t nx = tau.shape[0], ny = tau.shape[1], ns = w_re.shape[0]
    cdef Py_ssize_t q, i, j
    cdef double v, wr, wi
    with nogil:
        for q in range(ns):
            wr = w_re[q]
            wi = w_im[q]
            for i in range(nx):
                for j in range(ny):
                    v = <double>tau[i, j]
                    out[q, i, 2 * j] = out[q, i, 2 * j] + <acc_t>(v * wr)
                    out[q, i, 2 * j + 1] = out[q, i, 2 * j + 1] + <acc_t>(v * wi)


@cython.boundscheck(False)
@cython.wraparound(False)
def accumulate_cube(const data_t[:, :, :] tau, const double[:, ::1] w_re,
                    const double[:, ::1] w_im, acc_t[:, :, ::1] out):
    cdef Py_ssize_t nx = tau.shape[0], ny = tau.shape[1], nt = tau.shape[2]
    cdef Py_ssize_t ns = w_re.shape[0]
    cdef Py_ssize_t q, i, j, n
    cdef double v
    cdef acc_t re, im
    with nogil:
        for i in range(nx):
            for j in range(ny):
                for q in range(ns):
                    re = out[q, i, 2 * j]
                    im = out[q, i, 2 * j + 1]
                    for n in range(nt):
                        v = <double>tau[i, j, n]
                        re = re + <acc_t>(v * w_re[q, n])
                        im = im + <acc_t>(v * w_im[q, n])
                    out[q, i, 2 * j] = re
                    out[q, i, 2 * j + 1] = im


@cython.boundscheck(False)
@cython.wraparound(False)
def scatter_events(const index_t[::1] pixel_i, const index_t[::1] pixel_j,
                   const double[:, ::1] w_re, const double[:, ::1] w_im,
                   acc_t[:, :, ::1] out):
    cdef Py_ssize_t m = pixel_i.shape[0], ns = w_re.shape[0]
    cdef Py_ssize_t e, q, i, j
    with nogil:
        for e in range(m):
            i = pixel_i[e]
            j = pixel_j[e]
            for q in range(ns):
                out[q, i, 2 * j] = out[q, i, 2 * j] + <acc_t>w_re[q, e]
                out[q, i, 2 * j + 1] = out[q, i, 2 * j + 1] + <acc_t>w_im[q, e]
