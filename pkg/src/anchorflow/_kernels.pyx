# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: splitmix64/Box-Muller draws and dense-layer passes.

Dense layers call BLAS ``dgemm`` through SciPy's Cython bindings with the
bias and tanh-derivative passes fused around it.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, log, sqrt
from libc.stdint cimport uint64_t
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef double TWO_PI = 6.283185307179586
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def uniforms(object state, Py_ssize_t n):
    cdef uint64_t s = <uint64_t>state
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            s = s + GOLDEN
            o[i] = <double>(_mix(s) >> 11) * INV_2_53
    return out, int(s)


def normals(object state, Py_ssize_t n):
    cdef uint64_t s = <uint64_t>state
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    cdef double u1, u2
    with nogil:
        for i in range(n):
            s = s + GOLDEN
            u1 = 1.0 - <double>(_mix(s) >> 11) * INV_2_53
            s = s + GOLDEN
            u2 = <double>(_mix(s) >> 11) * INV_2_53
            o[i] = sqrt(-2.0 * log(u1)) * cos(TWO_PI * u2)
    return out, int(s)


cdef inline void _gemm(char ta, char tb, int m, int n, int k, double* a, int lda,
                       double* b, int ldb, double beta, double* c, int ldc) noexcept nogil:
    # column-major C = op(A) op(B) + beta C
    cdef double one = 1.0
    dgemm(&ta, &tb, &m, &n, &k, &one, a, &lda, b, &ldb, &beta, c, &ldc)


def dense_forward(const double[:, ::1] x, const double[:, ::1] w,
                  const double[::1] b, bint tanh):
    """``act(x @ w.T + b)``: bias preloaded into the output, then one GEMM."""
    cdef int n = x.shape[0], din = x.shape[1], dout = w.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, dout), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef Py_ssize_t r, j
    if n == 0:
        return out
    with nogil:
        for r in range(n):
            for j in range(dout):
                y[r, j] = b[j]
        # row-major y (n, dout) is column-major y^T; y^T = w x^T
        _gemm(b"T", b"N", dout, n, din, <double*>&w[0, 0], din, <double*>&x[0, 0], din, 1.0, &y[0, 0], dout)
    if tanh:
        # NumPy's vectorised tanh beats any scalar libm loop here
        np.tanh(out, out=out)
    return out


def dense_backward(const double[:, ::1] x, const double[:, ::1] w,
                   const double[:, ::1] y, const double[:, ::1] g, bint tanh):
    cdef int n = x.shape[0], din = x.shape[1], dout = w.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gp_arr = np.empty((n, dout), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dw_arr = np.empty((dout, din), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] db_arr = np.zeros(dout, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dx_arr = np.empty((n, din), dtype=np.float64)
    cdef double[:, ::1] gp = gp_arr
    cdef double[:, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[:, ::1] dx = dx_arr
    cdef Py_ssize_t r, j
    cdef double gj
    if n == 0:
        dw_arr.fill(0.0)
        return dw_arr, db_arr, dx_arr
    with nogil:
        for r in range(n):
            for j in range(dout):
                gj = g[r, j]
                if tanh:
                    gj = gj * (1.0 - y[r, j] * y[r, j])
                gp[r, j] = gj
                db[j] = db[j] + gj
        # dw^T (din, dout) = x^T gp ; dx^T (din, n) = w^T gp^T
        _gemm(b"N", b"T", din, dout, n, <double*>&x[0, 0], din, &gp[0, 0], dout, 0.0, &dw[0, 0], din)
        _gemm(b"N", b"N", din, n, dout, <double*>&w[0, 0], din, &gp[0, 0], dout, 0.0, &dx[0, 0], din)
    return dw_arr, db_arr, dx_arr
